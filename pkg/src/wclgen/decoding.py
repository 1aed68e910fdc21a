"""Greedy and beam-search generation against a frozen model.

The model contract is duck-typed: ``encode_memory(features)`` produces a
reusable memory object and ``step_logits(memory, prefix_ids)`` maps a batch
of prefixes (N, t) to next-token logits (N, V). Scores are raw cumulative
log-probabilities (no length normalization); every hypothesis records its
per-step token log-probs so the score is recomputable by teacher forcing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .text import BOS_ID, EOS_ID, EncodedSeq, PAD_ID


@dataclass(frozen=True)
class DecodeResult:
    seq: EncodedSeq
    score: float
    step_log_probs: tuple[float, ...]  # one entry per emitted (scored) token


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _to_encoded(ids: tuple[int, ...], max_len: int) -> EncodedSeq:
    # ids holds BOS plus emitted tokens; guarantee a terminal EOS and padding
    if ids[-1] != EOS_ID:
        ids = ids + (EOS_ID,)
    length = len(ids)
    return EncodedSeq(ids=ids + (PAD_ID,) * (max_len - length), length=length,
                      max_len=max_len)


def greedy_decode_batch(model, features: np.ndarray, max_len: int) -> list[DecodeResult]:
    """Argmax decoding for a batch of inputs; ties go to the lowest token id."""
    if max_len < 3:
        raise ContractError(f"max_len must be >= 3, got {max_len}")
    memory = model.encode_memory(features)
    n = memory.shape[0]
    prefixes = np.full((n, 1), BOS_ID, dtype=np.int64)
    finished = np.zeros(n, dtype=bool)
    step_logs: list[list[float]] = [[] for _ in range(n)]
    while prefixes.shape[1] < max_len - 1 and not finished.all():
        logits = model.step_logits(memory, prefixes)
        log_probs = _log_softmax_rows(logits)
        chosen = logits.argmax(axis=1)
        for i in range(n):
            if finished[i]:
                chosen[i] = PAD_ID  # inert filler; causality keeps it harmless
            else:
                step_logs[i].append(float(log_probs[i, chosen[i]]))
        finished |= chosen == EOS_ID
        prefixes = np.concatenate([prefixes, chosen[:, None]], axis=1)

    results = []
    for i in range(n):
        ids = [BOS_ID]
        for token in prefixes[i, 1:]:
            ids.append(int(token))
            if token == EOS_ID:
                break
        results.append(DecodeResult(
            seq=_to_encoded(tuple(ids), max_len),
            score=float(sum(step_logs[i])),
            step_log_probs=tuple(step_logs[i]),
        ))
    return results


def greedy_decode(model, features: np.ndarray, max_len: int) -> DecodeResult:
    """Single-input greedy decoding (features are one patch matrix)."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[None]
    return greedy_decode_batch(model, feats, max_len)[0]


@dataclass(frozen=True)
class _Hypothesis:
    ids: tuple[int, ...]  # BOS + emitted tokens (EOS included once finished)
    score: float
    step_log_probs: tuple[float, ...]

    @property
    def sort_key(self):
        return (-self.score, self.ids)


def beam_decode(model, features: np.ndarray, width: int, max_len: int) -> DecodeResult:
    """Beam search over raw cumulative log-prob with deterministic ties.

    Each step keeps the ``width`` best extensions by (score, then
    lexicographic ids); extensions emitting EOS freeze into the finished
    pool. The search stops once no live hypothesis can still beat the best
    finished one, or at max_len, where live hypotheses compete with an
    unscored forced EOS.
    """
    if width < 1:
        raise ContractError(f"beam width must be >= 1, got {width}")
    if max_len < 3:
        raise ContractError(f"max_len must be >= 3, got {max_len}")
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[None]
    memory = model.encode_memory(feats)

    live = [_Hypothesis(ids=(BOS_ID,), score=0.0, step_log_probs=())]
    finished: list[_Hypothesis] = []
    while live and len(live[0].ids) < max_len - 1:
        prefix_matrix = np.array([h.ids for h in live], dtype=np.int64)
        logits = model.step_logits(memory, prefix_matrix)
        log_probs = _log_softmax_rows(logits)

        candidates: list[_Hypothesis] = []
        vocab = log_probs.shape[1]
        per_hyp = min(width, vocab)
        for row, hyp in enumerate(live):
            # stable argsort: ties between equal log-probs pick lower ids
            top = np.argsort(-log_probs[row], kind="stable")[:per_hyp]
            for token in top:
                lp = float(log_probs[row, token])
                candidates.append(_Hypothesis(
                    ids=hyp.ids + (int(token),),
                    score=hyp.score + lp,
                    step_log_probs=hyp.step_log_probs + (lp,),
                ))
        candidates.sort(key=lambda h: h.sort_key)
        live = []
        for hyp in candidates[:width]:
            if hyp.ids[-1] == EOS_ID:
                finished.append(hyp)
            else:
                live.append(hyp)
        if finished and live and min(f.sort_key for f in finished) < live[0].sort_key:
            break  # no live extension can beat the best finished hypothesis

    pool = finished + live  # live hypotheses get an unscored forced EOS
    best = min(pool, key=lambda h: h.sort_key)
    return DecodeResult(
        seq=_to_encoded(best.ids, max_len),
        score=best.score,
        step_log_probs=best.step_log_probs,
    )
