"""Tokenization, frequency-thresholded vocabulary, and sequence codecs."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ContractError
from .ioutil import atomic_write_text, canonical_json

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN = "<pad>", "<bos>", "<eos>", "<unk>"
_SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, split sentence-final periods off.

    "No pleural effusion." -> ["no", "pleural", "effusion", "."]
    """
    tokens: list[str] = []
    for piece in text.lower().split():
        trailing = 0
        while len(piece) > 1 and piece.endswith("."):
            piece = piece[:-1]
            trailing += 1
        tokens.append(piece)
        tokens.extend("." for _ in range(trailing))
    return tokens


class Vocabulary:
    """Token/id maps with four reserved specials at ids 0..3.

    Non-special ids are assigned by descending corpus frequency, ties broken
    lexicographically; tokens seen fewer than ``min_freq`` times are dropped.
    """

    def __init__(self, tokens: Sequence[str], min_freq: int):
        if min_freq < 1:
            raise ContractError(f"min_freq must be >= 1, got {min_freq}")
        self.min_freq = min_freq
        self.id_to_token: list[str] = list(_SPECIAL_TOKENS) + list(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ContractError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.id_to_token):
            raise ContractError(f"token id {token_id} out of range (vocab size {len(self)})")
        return self.id_to_token[token_id]

    def save(self, path: str) -> None:
        body = {"min_freq": self.min_freq, "tokens": self.id_to_token[len(_SPECIAL_TOKENS):]}
        atomic_write_text(path, canonical_json(body) + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            body = json.load(fh)
        return cls(body["tokens"], body["min_freq"])


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int) -> Vocabulary:
    """Count tokens over the corpus and keep those with count >= min_freq."""
    if min_freq < 1:
        raise ContractError(f"min_freq must be >= 1, got {min_freq}")
    counts: Counter[str] = Counter()
    for tokens in corpus:
        counts.update(tokens)
    for special in _SPECIAL_TOKENS:
        counts.pop(special, None)
    kept = [t for t, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_freq)


@dataclass(frozen=True)
class EncodedSeq:
    """BOS-prefixed, EOS-terminated, PAD-filled id sequence."""

    ids: tuple[int, ...]
    length: int  # real tokens including BOS/EOS
    max_len: int

    def __post_init__(self):
        if len(self.ids) != self.max_len:
            raise ContractError("ids must be padded to max_len")
        if self.ids[0] != BOS_ID or self.ids[self.length - 1] != EOS_ID:
            raise ContractError("sequence must start with BOS and end with EOS")
        if any(i != PAD_ID for i in self.ids[self.length:]):
            raise ContractError("positions beyond length must be PAD")


def encode(tokens: Sequence[str], vocab: Vocabulary, max_len: int) -> EncodedSeq:
    """Map tokens to ids, truncate to max_len - 2, then wrap in BOS/EOS."""
    if max_len < 3:
        raise ContractError(f"max_len must be >= 3, got {max_len}")
    body = [vocab.id_of(t) for t in tokens[: max_len - 2]]
    ids = [BOS_ID] + body + [EOS_ID]
    length = len(ids)
    ids.extend([PAD_ID] * (max_len - length))
    return EncodedSeq(ids=tuple(ids), length=length, max_len=max_len)


def decode_ids(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Drop specials and join with single spaces; UNK renders as "<unk>"."""
    words = []
    for token_id in ids:
        token = vocab.token_of(int(token_id))
        if token_id in (PAD_ID, BOS_ID, EOS_ID):
            continue
        words.append(token)
    return " ".join(words)
