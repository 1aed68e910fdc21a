"""Drive the whole CLI pipeline in one go, then verify the manifest.

Equivalent to running the eight `wclgen` subcommands from a shell; uses the
bundled 200-report spec and desk config.
"""

import json
import os
import sys
import tempfile

from wclgen.cli import run_command, verify_manifest

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIGS = os.path.join(HERE, os.pardir, "configs")

work = tempfile.mkdtemp(prefix="wclgen-pipeline-")
manifest = os.path.join(work, "manifest.json")
print("working in", work)

steps = [
    ["synth", "--spec", os.path.join(CONFIGS, "synth_200.json"),
     "--out", os.path.join(work, "data")],
    ["vocab", "--data", os.path.join(work, "data"), "--min-freq", "3",
     "--out", os.path.join(work, "vocab.json")],
    ["embed", "--data", os.path.join(work, "data"),
     "--vocab", os.path.join(work, "vocab.json"),
     "--out", os.path.join(work, "embeddings.ndjson")],
    ["cluster", "--data", os.path.join(work, "data"),
     "--vocab", os.path.join(work, "vocab.json"),
     "--embeddings", os.path.join(work, "embeddings.ndjson"),
     "--k", "13", "--seed", "1", "--out", os.path.join(work, "labels.ndjson")],
    ["train", "--config", os.path.join(CONFIGS, "train_desk.json"),
     "--data", os.path.join(work, "data"), "--vocab", os.path.join(work, "vocab.json"),
     "--clusters", os.path.join(work, "labels.ndjson"),
     "--out", os.path.join(work, "run")],
    ["generate", "--checkpoint", os.path.join(work, "run", "best.ckpt"),
     "--config", os.path.join(work, "run", "run_config.json"),
     "--data", os.path.join(work, "data"), "--vocab", os.path.join(work, "vocab.json"),
     "--beam", "3", "--out", os.path.join(work, "generations.ndjson")],
    ["eval", "--generations", os.path.join(work, "generations.ndjson"),
     "--references", os.path.join(work, "data", "dataset.ndjson"),
     "--labeler", "toy", "--out", os.path.join(work, "report.json")],
]
for step in steps:
    print("\n$ wclgen", " ".join(step))
    rc = run_command(step + ["--manifest", manifest])
    if rc != 0:
        sys.exit(rc)

body = json.load(open(manifest))
print(f"\nmanifest lists {len(body['artifacts'])} artifacts:",
      ", ".join(sorted(body["artifacts"])))
stale = verify_manifest(manifest)
print("verify:", "all artifacts clean" if not stale else f"stale: {stale}")
print("\neval report:")
print(json.dumps(json.load(open(os.path.join(work, "report.json"))), indent=2))
