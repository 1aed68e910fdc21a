"""Dataset ingestion, the synthetic paired-corpus generator, and batching.

The synthetic generator is the desk-scale stand-in for a real paired
image/report corpus: each report draws a sparse latent vector of positive
findings (with severity flags) plus a small set of explicitly-negated
findings; patch features are the summed per-finding signature vectors with
Gaussian noise, and the text concatenates one template sentence per
mentioned finding. Everything is a deterministic function of the seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, IngestionError
from .ioutil import canonical_json, atomic_write_text
from .metrics import KeywordTable, LabelVector
from .text import EncodedSeq, Vocabulary, encode, tokenize

SPLITS = ("train", "val", "test")


@dataclass
class ReportRecord:
    """One example: id, raw text, patch features, split, optional labels."""

    record_id: str
    report: str
    features: np.ndarray  # (patch_count, feature_dim)
    split: str
    gold_labels: tuple[bool, ...] | None = None
    cluster_label: int | None = None


@dataclass
class Dataset:
    records: list[ReportRecord]
    patch_count: int
    feature_dim: int

    def __post_init__(self):
        seen = set()
        for record in self.records:
            if record.record_id in seen:
                raise ContractError(f"duplicate record id {record.record_id!r}")
            seen.add(record.record_id)
            if record.split not in SPLITS:
                raise ContractError(f"record {record.record_id!r} has bad split {record.split!r}")
            if record.features.shape != (self.patch_count, self.feature_dim):
                raise ContractError(
                    f"record {record.record_id!r} features {record.features.shape} != "
                    f"({self.patch_count}, {self.feature_dim})")

    def split_records(self, split: str) -> list[ReportRecord]:
        if split not in SPLITS:
            raise ContractError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def ids(self, split: str | None = None) -> list[str]:
        if split is None:
            return [r.record_id for r in self.records]
        return [r.record_id for r in self.split_records(split)]

    def by_id(self, record_id: str) -> ReportRecord:
        for record in self.records:
            if record.record_id == record_id:
                return record
        raise ContractError(f"no record with id {record_id!r}")

    def encode_reports(self, vocab: Vocabulary, max_len: int) -> dict[str, EncodedSeq]:
        return {r.record_id: encode(tokenize(r.report), vocab, max_len)
                for r in self.records}


def save_dataset(path: str, dataset: Dataset) -> None:
    """NDJSON, one record per line, features inlined."""
    lines = []
    for r in dataset.records:
        row = {
            "id": r.record_id,
            "split": r.split,
            "report": r.report,
            "features": [[float(x) for x in patch] for patch in r.features],
        }
        if r.gold_labels is not None:
            row["gold_labels"] = list(r.gold_labels)
        lines.append(canonical_json(row))
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def load_dataset(path: str) -> Dataset:
    """Read and validate a dataset file; errors carry the line number."""
    records: list[ReportRecord] = []
    seen: dict[str, int] = {}
    shape: tuple[int, int] | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"line {lineno}: invalid JSON: {exc}") from exc
            for key in ("id", "split", "report", "features"):
                if key not in row:
                    raise IngestionError(f"line {lineno}: missing field {key!r}")
            record_id = row["id"]
            if record_id in seen:
                raise IngestionError(
                    f"line {lineno}: duplicate id {record_id!r} (first seen on line "
                    f"{seen[record_id]})")
            seen[record_id] = lineno
            if row["split"] not in SPLITS:
                raise IngestionError(f"line {lineno}: unknown split {row['split']!r}")
            features = row["features"]
            if isinstance(features, dict):
                sidecar = features.get("path")
                if not isinstance(sidecar, str):
                    raise IngestionError(f"line {lineno}: feature sidecar needs a 'path'")
                sidecar_path = os.path.join(os.path.dirname(os.path.abspath(path)), sidecar)
                try:
                    with open(sidecar_path, "r", encoding="utf-8") as side:
                        features = json.load(side)
                except OSError as exc:
                    raise IngestionError(f"line {lineno}: cannot read sidecar: {exc}") from exc
            try:
                mat = np.asarray(features, dtype=np.float64)
            except ValueError as exc:
                raise IngestionError(f"line {lineno}: malformed features: {exc}") from exc
            if mat.ndim != 2 or not np.all(np.isfinite(mat)):
                raise IngestionError(f"line {lineno}: features must be a finite 2-D matrix")
            if shape is None:
                shape = mat.shape
            elif mat.shape != shape:
                raise IngestionError(
                    f"line {lineno}: feature shape {mat.shape} != {shape} of earlier records")
            gold = row.get("gold_labels")
            records.append(ReportRecord(
                record_id=record_id,
                report=row["report"],
                features=mat,
                split=row["split"],
                gold_labels=None if gold is None else tuple(bool(g) for g in gold),
            ))
    if not records:
        raise IngestionError("dataset file contains no records")
    return Dataset(records=records, patch_count=shape[0], feature_dim=shape[1])


# -- synthetic corpus --------------------------------------------------------


@dataclass
class SynthSpec:
    """Knobs for the synthetic generator; everything derives from ``seed``."""

    seed: int
    n_train: int
    n_val: int
    n_test: int
    n_findings: int = 14
    templates_per_finding: int = 2
    patch_count: int = 49
    feature_dim: int = 32
    noise_sigma: float = 0.05
    positive_rate: float = 0.18
    severity_gain: float = 1.0  # "large" scales the signature by 1 + gain

    def __post_init__(self):
        if self.templates_per_finding < 2:
            raise ConfigError("templates_per_finding must be >= 2")
        if self.n_findings < 1 or min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("bad synthetic corpus sizes")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    @classmethod
    def from_dict(cls, body: dict) -> "SynthSpec":
        return cls(**body)


_POSITIVE_PATTERNS = (
    "there is {sev} {phrase} .",
    "{sev} {phrase} is seen .",
    "findings show {sev} {phrase} .",
    "{sev} {phrase} is noted .",
)
_NEGATION_PATTERNS = (
    "no {phrase} .",
    "the chest is free of {phrase} .",
)
_SEVERITY_WORDS = ("mild", "large")


def positive_templates(phrase: str, count: int) -> list[str]:
    if count > len(_POSITIVE_PATTERNS):
        raise ConfigError(
            f"at most {len(_POSITIVE_PATTERNS)} paraphrase patterns available, asked {count}")
    return [p.replace("{phrase}", phrase) for p in _POSITIVE_PATTERNS[:count]]


def generate_synthetic(spec: SynthSpec, table: KeywordTable | None = None) -> Dataset:
    """Build the paired corpus; see the module docstring for the scheme."""
    table = table or KeywordTable.default()
    if spec.n_findings > table.size:
        raise ConfigError(f"table has {table.size} findings, spec wants {spec.n_findings}")
    phrases = [" ".join(table.phrases[i][0]) for i in range(spec.n_findings)]

    rng = np.random.default_rng(spec.seed)
    pos_sig = rng.normal(size=(spec.n_findings, spec.feature_dim))
    pos_sig /= np.linalg.norm(pos_sig, axis=1, keepdims=True)
    neg_sig = rng.normal(size=(spec.n_findings, spec.feature_dim))
    neg_sig = 0.6 * neg_sig / np.linalg.norm(neg_sig, axis=1, keepdims=True)

    records: list[ReportRecord] = []
    for split, count in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        for index in range(count):
            positives = rng.random(spec.n_findings) < spec.positive_rate
            severities = rng.random(spec.n_findings) < 0.5
            negatives = np.flatnonzero(~positives)
            n_mentions = min(int(rng.integers(1, 3)), len(negatives))
            mentioned = set(rng.choice(negatives, size=n_mentions, replace=False)) \
                if n_mentions else set()

            base = np.zeros(spec.feature_dim)
            sentences = []
            for f in range(spec.n_findings):
                if positives[f]:
                    scale = 1.0 + (spec.severity_gain if severities[f] else 0.0)
                    base += scale * pos_sig[f]
                    pattern = _POSITIVE_PATTERNS[int(rng.integers(spec.templates_per_finding))]
                    sev = _SEVERITY_WORDS[int(severities[f])]
                    sentences.append(
                        pattern.replace("{sev}", sev).replace("{phrase}", phrases[f]))
                elif f in mentioned:
                    base += neg_sig[f]
                    pattern = _NEGATION_PATTERNS[int(rng.integers(len(_NEGATION_PATTERNS)))]
                    sentences.append(pattern.replace("{phrase}", phrases[f]))

            noise = rng.normal(scale=spec.noise_sigma,
                               size=(spec.patch_count, spec.feature_dim)) \
                if spec.noise_sigma > 0 else np.zeros((spec.patch_count, spec.feature_dim))
            features = base[None, :] + noise
            records.append(ReportRecord(
                record_id=f"{split}-{index:05d}",
                report=" ".join(sentences),
                features=features,
                split=split,
                gold_labels=tuple(bool(p) for p in positives),
            ))
    return Dataset(records=records, patch_count=spec.patch_count,
                   feature_dim=spec.feature_dim)


def gold_label_vector(record: ReportRecord) -> LabelVector:
    if record.gold_labels is None:
        raise ContractError(f"record {record.record_id!r} carries no gold labels")
    return LabelVector(findings=record.gold_labels)


# -- batching -----------------------------------------------------------------


@dataclass
class Batch:
    """Aligned per-batch arrays handed to the trainer."""

    ids: list[str]
    features: np.ndarray  # (N, patch_count, feature_dim)
    target_ids: np.ndarray  # (N, max_len) int64
    target_lengths: np.ndarray  # (N,)
    cluster_labels: np.ndarray | None  # (N,) int64, train batches only

    @property
    def size(self) -> int:
        return len(self.ids)


def make_batches(dataset: Dataset, split: str, batch_size: int, seed: int, epoch: int,
                 encoded: dict[str, EncodedSeq],
                 cluster_labels: dict[str, int] | None = None,
                 contrastive: bool = True) -> Iterator[Batch]:
    """Seeded per-epoch shuffle into batches; the final short batch is kept."""
    if contrastive and batch_size < 2:
        raise ConfigError("contrastive batches need batch_size >= 2")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    records = dataset.split_records(split)
    if not records:
        raise ContractError(f"split {split!r} is empty")
    if cluster_labels is not None:
        missing = [r.record_id for r in records if r.record_id not in cluster_labels]
        if missing:
            raise ContractError(f"no cluster label for record {missing[0]!r}")

    order = np.random.default_rng([seed, epoch]).permutation(len(records))
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        seqs = [encoded[r.record_id] for r in chunk]
        yield Batch(
            ids=[r.record_id for r in chunk],
            features=np.stack([r.features for r in chunk]),
            target_ids=np.array([s.ids for s in seqs], dtype=np.int64),
            target_lengths=np.array([s.length for s in seqs], dtype=np.int64),
            cluster_labels=None if cluster_labels is None else np.array(
                [cluster_labels[r.record_id] for r in chunk], dtype=np.int64),
        )
