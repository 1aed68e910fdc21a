"""Command-line pipeline: synth, vocab, embed, cluster, train, generate,
eval, gridsearch.

Every stage writes its outputs atomically with canonical formatting, so
re-running with identical inputs and seeds produces byte-identical files.
When ``--manifest`` is given, the stage records its artifact paths (relative
to the manifest), their content hashes, and a hash of the stage's resolved
configuration; ``verify_manifest`` re-hashes everything later.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .datakit import Dataset, SynthSpec, generate_synthetic, load_dataset, save_dataset
from .decoding import beam_decode, greedy_decode_batch
from .errors import ConfigError, ContractError, IngestionError
from .ioutil import (
    canonical_json,
    atomic_write_text,
    read_ndjson,
    sha256_file,
    sha256_text,
    write_ndjson,
)
from .metrics import KeywordTable, LabelVector, evaluate_corpus
from .model import ModelConfig, ReportGenerator
from .text import Vocabulary, build_vocab, tokenize
from .trainer import RunConfig, grid_search, grid_table_csv, save_train_log, train
from .weaklabel import (
    assign_labels,
    kmeans,
    load_embeddings,
    load_labels,
    save_embeddings,
    save_labels,
    tfidf_embed,
)

_VALIDATION_ERRORS = (ConfigError, ContractError, IngestionError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


# -- manifest -----------------------------------------------------------------


def record_artifacts(manifest_path: str, stage: str, config_obj,
                     artifacts: dict[str, str]) -> None:
    """Add this stage's artifacts and config hash to the manifest file."""
    body = {"artifacts": {}, "configs": {}}
    if os.path.exists(manifest_path):
        with open(manifest_path, "r", encoding="utf-8") as fh:
            body = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    for name, path in artifacts.items():
        body["artifacts"][name] = {
            "path": os.path.relpath(os.path.abspath(path), base),
            "sha256": sha256_file(path),
        }
    body["configs"][stage] = sha256_text(canonical_json(config_obj))
    atomic_write_text(manifest_path, canonical_json(body) + "\n")


def verify_manifest(manifest_path: str) -> list[str]:
    """Re-hash every artifact; returns the names that are stale or missing."""
    with open(manifest_path, "r", encoding="utf-8") as fh:
        body = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    stale = []
    for name, entry in sorted(body.get("artifacts", {}).items()):
        path = os.path.join(base, entry["path"])
        if not os.path.exists(path):
            stale.append(name)
        elif sha256_file(path) != entry["sha256"]:
            stale.append(name)
    return stale


# -- shared loading helpers -----------------------------------------------------


def _dataset_path(data_arg: str) -> str:
    if os.path.isdir(data_arg):
        return os.path.join(data_arg, "dataset.ndjson")
    return data_arg


def _load_references(path: str, wanted_ids: list[str]) -> dict[str, str]:
    """Accept either {"id","text"} rows or a full dataset file."""
    rows = read_ndjson(path)
    if not rows:
        raise IngestionError(f"reference file {path} is empty")
    if "text" in rows[0]:
        refs = {r["id"]: r["text"] for r in rows}
    elif "report" in rows[0]:
        refs = {r["id"]: r["report"] for r in rows}
    else:
        raise IngestionError("reference rows need a 'text' or 'report' field")
    missing = [i for i in wanted_ids if i not in refs]
    if missing:
        raise IngestionError(f"reference file is missing id {missing[0]!r}")
    return refs


def _resolve_run_config(config_path: str, vocab: Vocabulary) -> RunConfig:
    with open(config_path, "r", encoding="utf-8") as fh:
        body = json.load(fh)
    model_body = dict(body.get("model", {}))
    model_body.setdefault("vocab_size", len(vocab))
    body["model"] = model_body
    cfg = RunConfig.from_dict(body)
    if cfg.model.vocab_size != len(vocab):
        raise ConfigError(
            f"config vocab_size {cfg.model.vocab_size} != vocabulary size {len(vocab)}")
    return cfg


# -- subcommands ---------------------------------------------------------------


def _cmd_synth(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        spec_body = json.load(fh)
    if args.seed is not None:
        spec_body["seed"] = args.seed
    spec = SynthSpec.from_dict(spec_body)
    dataset = generate_synthetic(spec)
    out_path = os.path.join(args.out, "dataset.ndjson")
    save_dataset(out_path, dataset)
    if args.manifest:
        record_artifacts(args.manifest, "synth", spec_body, {"dataset": out_path})
    print(f"wrote {out_path} ({len(dataset.records)} records)")
    return 0


def _cmd_vocab(args) -> int:
    dataset = load_dataset(_dataset_path(args.data))
    corpus = [tokenize(r.report) for r in dataset.split_records("train")]
    vocab = build_vocab(corpus, args.min_freq)
    vocab.save(args.out)
    if args.manifest:
        record_artifacts(args.manifest, "vocab", {"min_freq": args.min_freq},
                         {"vocab": args.out})
    print(f"wrote {args.out} ({len(vocab)} tokens incl. specials)")
    return 0


def _tfidf_for_split(dataset: Dataset, vocab: Vocabulary, split: str):
    records = dataset.split_records(split)
    corpus = [tokenize(r.report) for r in records]
    return [r.record_id for r in records], tfidf_embed(corpus, vocab)


def _cmd_embed(args) -> int:
    dataset = load_dataset(_dataset_path(args.data))
    ids = dataset.ids("train")
    if args.embeddings == "tfidf":
        if not args.vocab:
            raise ConfigError("--embeddings tfidf requires --vocab")
        vocab = Vocabulary.load(args.vocab)
        ids, emb = _tfidf_for_split(dataset, vocab, "train")
    else:
        emb = load_embeddings(args.embeddings, ids)
    save_embeddings(args.out, ids, emb)
    if args.manifest:
        record_artifacts(args.manifest, "embed", {"provider": args.embeddings},
                         {"embeddings": args.out})
    print(f"wrote {args.out} ({emb.rows} x {emb.dim}, {emb.provider_tag})")
    return 0


def _cmd_cluster(args) -> int:
    dataset = load_dataset(_dataset_path(args.data))
    ids = dataset.ids("train")
    if args.embeddings == "tfidf":
        if not args.vocab:
            raise ConfigError("--embeddings tfidf requires --vocab")
        vocab = Vocabulary.load(args.vocab)
        ids, emb = _tfidf_for_split(dataset, vocab, "train")
    else:
        emb = load_embeddings(args.embeddings, ids)
    model = kmeans(emb, k=args.k, seed=args.seed, max_iters=args.max_iters)
    labels = assign_labels(model, ids)
    save_labels(args.out, labels)
    if args.manifest:
        record_artifacts(
            args.manifest, "cluster",
            {"k": args.k, "seed": args.seed, "embeddings": args.embeddings},
            {"labels": args.out})
    print(f"wrote {args.out} (k={model.k}, inertia={model.inertia:.6g}, "
          f"iterations={model.iterations_run})")
    return 0


def _cmd_train(args) -> int:
    dataset = load_dataset(_dataset_path(args.data))
    vocab = Vocabulary.load(args.vocab)
    cfg = _resolve_run_config(args.config, vocab)
    if args.seed is not None:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    cluster_labels = load_labels(args.clusters) if args.clusters else None
    log = train(cfg, dataset, cluster_labels, vocab, args.out)
    ckpt_path = os.path.join(args.out, log.best_checkpoint)
    save_train_log(os.path.join(args.out, "trainlog.json"), log)
    atomic_write_text(os.path.join(args.out, "run_config.json"),
                      canonical_json(cfg.to_dict()) + "\n")
    if args.manifest:
        record_artifacts(args.manifest, "train", cfg.to_dict(), {"checkpoint": ckpt_path})
    best = log.epochs[log.best_epoch]
    print(f"best epoch {log.best_epoch}: val_bleu4={best.val_bleu4:.4f} -> {ckpt_path}")
    return 0


def _cmd_generate(args) -> int:
    dataset = load_dataset(_dataset_path(args.data))
    vocab = Vocabulary.load(args.vocab)
    cfg = _resolve_run_config(args.config, vocab)
    model = ReportGenerator(cfg.model, seed=cfg.seed)
    model.load(args.checkpoint)
    model.set_training(False)
    max_len = args.max_len or cfg.model.max_len
    if max_len > cfg.model.max_len:
        raise ConfigError(
            f"--max-len {max_len} exceeds the model's max_len {cfg.model.max_len}")
    records = dataset.split_records(args.split)
    rows = []
    if args.beam == 1:
        for start in range(0, len(records), 64):
            chunk = records[start:start + 64]
            feats = np.stack([r.features for r in chunk])
            for record, result in zip(chunk, greedy_decode_batch(model, feats, max_len)):
                text = " ".join(vocab.token_of(i)
                                for i in result.seq.ids[1: result.seq.length - 1])
                rows.append({"id": record.record_id, "text": text})
    else:
        for record in records:
            result = beam_decode(model, record.features, width=args.beam, max_len=max_len)
            text = " ".join(vocab.token_of(i)
                            for i in result.seq.ids[1: result.seq.length - 1])
            rows.append({"id": record.record_id, "text": text})
    write_ndjson(args.out, rows)
    if args.manifest:
        record_artifacts(
            args.manifest, "generate",
            {"checkpoint": os.path.basename(args.checkpoint), "beam": args.beam,
             "max_len": max_len, "split": args.split},
            {"generations": args.out})
    print(f"wrote {args.out} ({len(rows)} generations, beam={args.beam})")
    return 0


def _load_file_labels(path: str, ids: list[str]) -> tuple[list, list]:
    rows = read_ndjson(path)
    by_id = {}
    for lineno, row in enumerate(rows, start=1):
        for key in ("id", "pred", "gold"):
            if key not in row:
                raise IngestionError(f"line {lineno}: label row needs 'id', 'pred', 'gold'")
        by_id[row["id"]] = (LabelVector(tuple(bool(b) for b in row["pred"])),
                            LabelVector(tuple(bool(b) for b in row["gold"])))
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise IngestionError(f"label file is missing id {missing[0]!r}")
    preds = [by_id[i][0] for i in ids]
    golds = [by_id[i][1] for i in ids]
    return preds, golds


def _cmd_eval(args) -> int:
    generations = read_ndjson(args.generations)
    if not generations:
        raise IngestionError(f"no generations in {args.generations}")
    ids = [g["id"] for g in generations]
    hyp_texts = [g["text"] for g in generations]
    refs = _load_references(args.references, ids)
    ref_texts = [refs[i] for i in ids]

    if args.labeler == "toy":
        report = evaluate_corpus(hyp_texts, ref_texts, table=KeywordTable.default())
    elif args.labeler.startswith("file:"):
        preds, golds = _load_file_labels(args.labeler[len("file:"):], ids)
        report = evaluate_corpus(hyp_texts, ref_texts, pred_labels=preds,
                                 gold_labels=golds)
    else:
        raise ConfigError(f"unknown labeler {args.labeler!r}; use 'toy' or 'file:<path>'")

    atomic_write_text(args.out, report.to_json() + "\n")
    hist_path = os.path.splitext(args.out)[0] + ".histogram.csv"
    lines = ["bin_start,bin_end,count"]
    for i, count in enumerate(report.length_hist):
        lines.append(f"{5 * i},{5 * (i + 1)},{count}")
    atomic_write_text(hist_path, "\n".join(lines) + "\n")
    if args.manifest:
        record_artifacts(args.manifest, "eval", {"labeler": args.labeler},
                         {"eval_report": args.out})
    print(f"wrote {args.out} (bleu4={report.bleu[4]:.4f}, ce_f1={report.ce_f1:.4f})")
    return 0


def _parse_grid(text: str) -> list[float]:
    values = [float(v) for v in text.split(",") if v.strip() != ""]
    if not values:
        raise ConfigError(f"empty grid: {text!r}")
    return values


def _cmd_gridsearch(args) -> int:
    dataset = load_dataset(_dataset_path(args.data))
    vocab = Vocabulary.load(args.vocab)
    cfg = _resolve_run_config(args.config, vocab)
    if args.seed is not None:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    cluster_labels = load_labels(args.clusters) if args.clusters else None
    lambdas = _parse_grid(args.lambdas)
    taus = _parse_grid(args.taus)
    (best_lam, best_tau), cells = grid_search(
        cfg, lambdas, taus, dataset, cluster_labels, vocab, args.out, jobs=args.jobs)
    table_path = os.path.join(args.out, "grid.csv")
    atomic_write_text(table_path, grid_table_csv(cells))
    best_path = os.path.join(args.out, "best.json")
    atomic_write_text(best_path,
                      canonical_json({"lambda": best_lam, "tau": best_tau}) + "\n")
    if args.manifest:
        record_artifacts(
            args.manifest, "gridsearch",
            {"lambdas": lambdas, "taus": taus, "config": cfg.to_dict()},
            {"grid_table": table_path})
    print(f"evaluated {len(cells)} cells; best lambda={best_lam}, tau={best_tau}")
    return 0


# -- entry point ------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="wclgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--manifest", default=None, help="pipeline manifest to update")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="generate the synthetic paired corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("vocab", help="build the frequency-thresholded vocabulary")
    p.add_argument("--data", required=True)
    p.add_argument("--min-freq", type=int, default=3)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_vocab)

    p = sub.add_parser("embed", help="compute or ingest report embeddings")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--embeddings", default="tfidf", help="'tfidf' or an NDJSON path")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_embed)

    p = sub.add_parser("cluster", help="k-means weak labels over train reports")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--embeddings", default="tfidf", help="'tfidf' or an NDJSON path")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_cluster)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--clusters", default=None)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("generate", help="decode reports from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("eval", help="score generations against references")
    p.add_argument("--generations", required=True)
    p.add_argument("--references", required=True,
                   help="NDJSON of {'id','text'} rows or a dataset file")
    p.add_argument("--labeler", default="toy", help="'toy' or 'file:<path>'")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gridsearch", help="lambda x tau grid over training runs")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--clusters", default=None)
    p.add_argument("--lambdas", default="0.1,0.2,0.3,0.4,0.5")
    p.add_argument("--taus", default="0.1,1,10")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_gridsearch)

    return parser


def run_command(argv: list[str]) -> int:
    """Dispatch one subcommand; 0 = ok, 1 = validation error, 2 = runtime error."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.fn(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures (divergence, IO races, ...)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))
