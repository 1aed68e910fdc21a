"""Training objectives: teacher-forced cross-entropy, the cluster-weighted
contrastive loss with its ablation variants, and their mixture.

The contrastive loss contrasts each image latent against every report latent
in the batch. Negatives that share the anchor's weak cluster label are
weighted by alpha (they are the hard ones); alpha = 1 recovers the plain
one-directional NT-Xent loss and alpha = 0 drops same-cluster negatives
entirely. All losses are negations of the underlying log-likelihoods, so
training minimizes them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, log_softmax
from .errors import ConfigError, ContractError
from .model import BatchLatents
from .text import PAD_ID

VARIANTS = ("wcl", "vanilla", "excluding", "ce_only")


@dataclass
class LossConfig:
    """Mixture weight, hard-negative weight, temperature, and the variant tag."""

    lam: float = 0.2
    alpha: float = 2.0
    tau: float = 1.0
    variant: str = "wcl"
    bidirectional: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.alpha < 0.0:
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "vanilla" and self.alpha != 1.0:
            raise ConfigError("variant 'vanilla' forces alpha == 1")
        if self.variant == "excluding" and self.alpha != 0.0:
            raise ConfigError("variant 'excluding' forces alpha == 0")
        if self.variant == "ce_only" and self.lam != 0.0:
            raise ConfigError("variant 'ce_only' forces lambda == 0")

    @classmethod
    def from_dict(cls, body: dict) -> "LossConfig":
        body = dict(body)
        if "lambda" in body:
            body["lam"] = body.pop("lambda")
        return cls(**body)

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "alpha": self.alpha, "tau": self.tau,
                "variant": self.variant, "bidirectional": self.bidirectional}


def shifted_targets(target_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split padded (N, max_len) sequences into decoder inputs and CE targets.

    The decoder reads positions 0..T-2 and predicts positions 1..T-1; PAD
    target positions are masked out.
    """
    ids = np.asarray(target_ids, dtype=np.int64)
    decoder_in = ids[:, :-1]
    targets = ids[:, 1:]
    return decoder_in, targets, targets != PAD_ID


def ce_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the target token over unmasked positions."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 3 or logits.shape[:2] != targets.shape or targets.shape != mask.shape:
        raise ContractError(
            f"shape mismatch: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    total = int(mask.sum())
    if total == 0:
        raise ContractError("all target positions are masked out")
    vocab = logits.shape[2]
    if targets.min() < 0 or targets.max() >= vocab:
        raise ContractError(f"target id out of range for vocab of {vocab}")
    one_hot = np.zeros(logits.shape)
    n_idx, t_idx = np.nonzero(mask)
    one_hot[n_idx, t_idx, targets[n_idx, t_idx]] = 1.0
    log_probs = log_softmax(logits, axis=-1)
    return -(log_probs * Tensor(one_hot)).sum() * (1.0 / total)


def wcl_loss(bl: BatchLatents, alpha: float) -> Tensor:
    """Cluster-weighted contrastive loss over a batch of projected pairs.

    For anchor i the positive is exp(s_ii); the denominator adds negatives
    from other clusters with weight 1 and same-cluster negatives with weight
    alpha. Stabilized by subtracting each row's max over the terms that are
    actually present, which keeps the no-negatives case exactly zero.
    """
    if alpha < 0.0:
        raise ContractError(f"alpha must be nonnegative, got {alpha}")
    if bl.labels is None:
        raise ContractError("batch latents carry no cluster labels")
    sims = bl.sims
    n = sims.shape[0]
    labels = np.asarray(bl.labels)
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")

    eye = np.eye(n)
    same = (labels[:, None] == labels[None, :]).astype(np.float64) - eye
    diff = 1.0 - same - eye

    used = eye + diff + (same if alpha > 0.0 else 0.0)
    row_max = np.where(used > 0.0, sims.data, -np.inf).max(axis=1, keepdims=True)
    shifted = (sims - Tensor(row_max)).exp()

    positive = (shifted * Tensor(eye)).sum(axis=1)
    denominator = positive \
        + (shifted * Tensor(diff)).sum(axis=1) \
        + (shifted * Tensor(same)).sum(axis=1) * alpha
    per_anchor = denominator.log() - positive.log()
    return per_anchor.mean()


def mixture_loss(ce, wcl, lam: float):
    """(1 - lambda) * ce + lambda * wcl; accepts Tensors or plain floats."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must be in [0, 1], got {lam}")
    return ce * (1.0 - lam) + wcl * lam


def variant_loss(bl: BatchLatents, cfg: LossConfig) -> Tensor:
    """Dispatch the contrastive term for the configured ablation variant."""
    if cfg.variant == "ce_only":
        return Tensor(0.0)
    alpha = {"wcl": cfg.alpha, "vanilla": 1.0, "excluding": 0.0}[cfg.variant]
    forward = wcl_loss(bl, alpha)
    if not cfg.bidirectional:
        return forward
    flipped = BatchLatents(z_x=bl.z_y, z_y=bl.z_x, sims=bl.sims.transpose((1, 0)),
                           labels=bl.labels, tau=bl.tau)
    return (forward + wcl_loss(flipped, alpha)) * 0.5
