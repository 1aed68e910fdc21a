"""Corpus evaluation: BLEU-n, ROUGE-L, a METEOR-style scorer, keyword-based
clinical-finding labels with micro P/R/F1, and the length histogram.

All scores live in [0, 1]. The METEOR implementation is deliberately "lite":
exact and stem matching stages only, no synonym or paraphrase tables, with
the published default parameters.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError, ContractError
from .ioutil import canonical_json
from .stemming import stem
from .text import tokenize

TokenList = Sequence[str]

_ROUGE_BETA = 1.2
_HIST_BINS = 20
_HIST_BIN_WIDTH = 5


def _require_pairs(hyps: Sequence[TokenList], refs: Sequence[TokenList]) -> None:
    if len(hyps) == 0 or len(refs) == 0:
        raise ContractError("metric needs a non-empty corpus")
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses vs {len(refs)} references")


def _ngram_counts(tokens: TokenList, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyps: Sequence[TokenList], refs: Sequence[TokenList], n: int = 4) -> float:
    """Corpus-level BLEU-n with clipped precisions and brevity penalty.

    Geometric mean of modified k-gram precisions for k = 1..n, pooled over
    the corpus, times min(1, e^(1 - r/c)). Any all-zero precision gives 0.
    """
    _require_pairs(hyps, refs)
    if not 1 <= n <= 4:
        raise ContractError(f"BLEU order must be in 1..4, got {n}")
    matched = [0] * n
    total = [0] * n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for k in range(1, n + 1):
            hyp_counts = _ngram_counts(hyp, k)
            ref_counts = _ngram_counts(ref, k)
            matched[k - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            total[k - 1] += max(len(hyp) - k + 1, 0)
    if hyp_len == 0 or any(m == 0 for m in matched):
        return 0.0
    precision_product = math.prod(m / t for m, t in zip(matched, total))
    brevity = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    return brevity * precision_product ** (1.0 / n)


def _lcs_length(a: TokenList, b: TokenList) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(hyps: Sequence[TokenList], refs: Sequence[TokenList]) -> float:
    """Mean per-pair LCS F-score with beta = 1.2."""
    _require_pairs(hyps, refs)
    beta_sq = _ROUGE_BETA * _ROUGE_BETA
    scores = []
    for hyp, ref in zip(hyps, refs):
        lcs = _lcs_length(hyp, ref)
        if lcs == 0:
            scores.append(0.0)
            continue
        recall = lcs / len(ref)
        precision = lcs / len(hyp)
        scores.append((1 + beta_sq) * recall * precision / (recall + beta_sq * precision))
    return sum(scores) / len(scores)


def _align(hyp: TokenList, ref: TokenList) -> list[tuple[int, int]]:
    """Two-stage unigram alignment: exact matches, then stem matches.

    Within each stage, hypothesis tokens are scanned left to right and each
    takes the leftmost unmatched reference token, which keeps runs of
    consecutive matches together (fewer chunks).
    """
    pairs: list[tuple[int, int]] = []
    hyp_free = [True] * len(hyp)
    ref_free = [True] * len(ref)
    for key in (lambda t: t, stem):
        ref_keys = [key(t) for t in ref]
        for i, token in enumerate(hyp):
            if not hyp_free[i]:
                continue
            want = key(token)
            for j, ref_key in enumerate(ref_keys):
                if ref_free[j] and ref_key == want:
                    pairs.append((i, j))
                    hyp_free[i] = False
                    ref_free[j] = False
                    break
    pairs.sort()
    return pairs


def _chunk_count(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite(hyps: Sequence[TokenList], refs: Sequence[TokenList]) -> float:
    """Mean per-pair unigram F-mean with a fragmentation penalty.

    m matches give P = m/|hyp|, R = m/|ref|, Fmean = 10PR/(R+9P); the
    penalty is 0.5 * (chunks/m)^3 and the pair score Fmean * (1 - penalty).
    """
    _require_pairs(hyps, refs)
    scores = []
    for hyp, ref in zip(hyps, refs):
        pairs = _align(hyp, ref)
        m = len(pairs)
        if m == 0:
            scores.append(0.0)
            continue
        precision = m / len(hyp)
        recall = m / len(ref)
        f_mean = 10 * precision * recall / (recall + 9 * precision)
        penalty = 0.5 * (_chunk_count(pairs) / m) ** 3
        scores.append(f_mean * (1.0 - penalty))
    return sum(scores) / len(scores)


# -- clinical-finding labels ------------------------------------------------

_DEFAULT_TABLE_PATH = os.path.join(os.path.dirname(__file__), "data", "findings_toy.json")
_NEGATION_WINDOW = 3


@dataclass(frozen=True)
class KeywordTable:
    """The 14 findings, their keyword phrases, and the negation cues."""

    names: tuple[str, ...]
    phrases: tuple[tuple[tuple[str, ...], ...], ...]  # per finding, tokenized phrases
    negation_cues: tuple[tuple[str, ...], ...]

    @classmethod
    def from_dict(cls, body: dict) -> "KeywordTable":
        names = tuple(f["name"] for f in body["findings"])
        phrases = tuple(
            tuple(tuple(p.split()) for p in f["phrases"]) for f in body["findings"])
        cues = tuple(tuple(c.split()) for c in body["negation_cues"])
        return cls(names=names, phrases=phrases, negation_cues=cues)

    @classmethod
    def load(cls, path: str) -> "KeywordTable":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "KeywordTable":
        return cls.load(_DEFAULT_TABLE_PATH)

    @property
    def size(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class LabelVector:
    """Positive/negative decision per finding, in the table's fixed order."""

    findings: tuple[bool, ...]

    def __post_init__(self):
        if not self.findings:
            raise ContractError("label vector must not be empty")


def _phrase_at(tokens: list[str], phrase: tuple[str, ...], start: int) -> bool:
    return tuple(tokens[start:start + len(phrase)]) == phrase


def _negated(tokens: list[str], start: int, cues) -> bool:
    window_start = max(0, start - _NEGATION_WINDOW)
    for cue in cues:
        for pos in range(window_start, start - len(cue) + 1):
            if _phrase_at(tokens, cue, pos):
                return True
    return False


def label_report(text: str, table: KeywordTable | None = None) -> LabelVector:
    """Keyword labeler: a finding is positive iff one of its phrases occurs
    somewhere without a negation cue in the three tokens just before it."""
    table = table or KeywordTable.default()
    tokens = tokenize(text)
    out = []
    for phrases in table.phrases:
        positive = False
        for phrase in phrases:
            for start in range(len(tokens) - len(phrase) + 1):
                if _phrase_at(tokens, phrase, start) and not _negated(
                        tokens, start, table.negation_cues):
                    positive = True
                    break
            if positive:
                break
        out.append(positive)
    return LabelVector(findings=tuple(out))


def ce_metrics(pred_labels: Sequence[LabelVector],
               gold_labels: Sequence[LabelVector]) -> tuple[float, float, float]:
    """Micro-averaged precision/recall/F1 over (report, finding) positives."""
    if len(pred_labels) != len(gold_labels) or len(pred_labels) == 0:
        raise ContractError(
            f"label lists must align and be non-empty: {len(pred_labels)} vs {len(gold_labels)}")
    tp = fp = fn = 0
    for pred, gold in zip(pred_labels, gold_labels):
        if len(pred.findings) != len(gold.findings):
            raise ContractError("label vectors disagree on the number of findings")
        for p, g in zip(pred.findings, gold.findings):
            tp += p and g
            fp += p and not g
            fn += g and not p
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def length_histogram(generated: Sequence[TokenList]) -> list[int]:
    """20 bins over [0, 100) in steps of 5; the last bin absorbs length >= 95."""
    bins = [0] * _HIST_BINS
    for tokens in generated:
        bins[min(len(tokens) // _HIST_BIN_WIDTH, _HIST_BINS - 1)] += 1
    return bins


# -- corpus-level bundle ----------------------------------------------------


@dataclass
class EvalReport:
    """All metrics for one generation run."""

    bleu: dict[int, float]
    rouge_l: float
    meteor: float
    ce_precision: float
    ce_recall: float
    ce_f1: float
    length_hist: list[int]

    def to_dict(self) -> dict:
        return {
            "bleu": {str(n): v for n, v in sorted(self.bleu.items())},
            "rouge_l": self.rouge_l,
            "meteor": self.meteor,
            "ce_precision": self.ce_precision,
            "ce_recall": self.ce_recall,
            "ce_f1": self.ce_f1,
            "length_hist": list(self.length_hist),
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def evaluate_corpus(hyp_texts: Sequence[str], ref_texts: Sequence[str],
                    pred_labels: Sequence[LabelVector] | None = None,
                    gold_labels: Sequence[LabelVector] | None = None,
                    table: KeywordTable | None = None) -> EvalReport:
    """Score hypotheses against references; label them if labels not given."""
    if len(hyp_texts) != len(ref_texts) or not hyp_texts:
        raise ContractError("need equal non-empty hypothesis/reference lists")
    hyps = [tokenize(t) for t in hyp_texts]
    refs = [tokenize(t) for t in ref_texts]
    if (pred_labels is None) != (gold_labels is None):
        raise ConfigError("provide both label lists or neither")
    if pred_labels is None:
        table = table or KeywordTable.default()
        pred_labels = [label_report(t, table) for t in hyp_texts]
        gold_labels = [label_report(t, table) for t in ref_texts]
    precision, recall, f1 = ce_metrics(pred_labels, gold_labels)
    return EvalReport(
        bleu={n: bleu(hyps, refs, n) for n in (1, 2, 3, 4)},
        rouge_l=rouge_l(hyps, refs),
        meteor=meteor_lite(hyps, refs),
        ce_precision=precision,
        ce_recall=recall,
        ce_f1=f1,
        length_hist=length_histogram(hyps),
    )
