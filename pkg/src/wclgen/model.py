"""Encoder-decoder transformer over precomputed patch features, plus the
pooling and projection heads that produce the contrastive latents.

Pre-norm residual blocks throughout, sinusoidal positions, causal masking in
the decoder. Parameters live in a flat name -> Tensor dict so the optimizer
can form learning-rate groups by name prefix ("visual." is the patch input
projection, everything else is "other").
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, masked_mean_pool, matmul, softmax, take_rows
from .errors import ConfigError, ContractError, DegenerateVectorError
from .text import BOS_ID

_NEG_BIAS = -1e9  # additive attention mask; finite to keep tensors NaN-free


@dataclass
class ModelConfig:
    vocab_size: int
    max_len: int
    feature_dim: int
    d_model: int = 512
    heads: int = 8
    layers: int = 3
    d_proj: int = 256
    d_ff: int = 0  # 0 means 4 * d_model
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        dims = (self.vocab_size, self.max_len, self.feature_dim, self.d_model,
                self.heads, self.layers, self.d_proj, self.d_ff)
        if any(d <= 0 for d in dims):
            raise ConfigError(f"all model dimensions must be positive: {self}")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def from_dict(cls, body: dict) -> "ModelConfig":
        return cls(**body)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "max_len": self.max_len,
            "feature_dim": self.feature_dim, "d_model": self.d_model,
            "heads": self.heads, "layers": self.layers, "d_proj": self.d_proj,
            "d_ff": self.d_ff, "dropout": self.dropout,
        }


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    positions = np.arange(length, dtype=np.float64)[:, None]
    freqs = np.exp(-math.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = positions * freqs  # (length, ceil(dim / 2))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim // 2])
    return table


@dataclass
class BatchLatents:
    """Projected pairs, their scaled cosine matrix, and the weak labels."""

    z_x: Tensor  # (N, d_proj)
    z_y: Tensor  # (N, d_proj)
    sims: Tensor  # (N, N), cosine / tau
    labels: np.ndarray | None  # (N,) cluster ids
    tau: float


def similarity_matrix(z_x: Tensor, z_y: Tensor, tau: float,
                      labels: np.ndarray | None = None) -> BatchLatents:
    """sims[i][j] = cos(z_x[i], z_y[j]) / tau; rejects zero-norm vectors."""
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if z_x.shape != z_y.shape or z_x.ndim != 2:
        raise ContractError(f"latents must share an (N, d) shape: {z_x.shape} vs {z_y.shape}")
    for name, z in (("z_x", z_x), ("z_y", z_y)):
        norms = np.linalg.norm(z.data, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateVectorError(f"{name} contains a zero-norm vector")
    xn = z_x / (z_x * z_x).sum(axis=1, keepdims=True).sqrt()
    yn = z_y / (z_y * z_y).sum(axis=1, keepdims=True).sqrt()
    sims = matmul(xn, yn.transpose((1, 0))) * (1.0 / tau)
    return BatchLatents(z_x=z_x, z_y=z_y, sims=sims, labels=labels, tau=tau)


class ReportGenerator:
    """The full model: visual encoder, report decoder, projection heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.training = False
        self._dropout_rng = np.random.default_rng([seed, 0xD0])
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)

        def linear(name: str, fan_in: int, fan_out: int) -> None:
            bound = 1.0 / math.sqrt(fan_in)
            self._add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self._add(f"{name}.b", rng.uniform(-bound, bound, size=fan_out))

        def layer_norm(name: str) -> None:
            self._add(f"{name}.g", np.ones(cfg.d_model))
            self._add(f"{name}.b", np.zeros(cfg.d_model))

        def attention(name: str) -> None:
            for part in ("q", "k", "v", "o"):
                linear(f"{name}.{part}", cfg.d_model, cfg.d_model)

        def ffn(name: str) -> None:
            linear(f"{name}.1", cfg.d_model, cfg.d_ff)
            linear(f"{name}.2", cfg.d_ff, cfg.d_model)

        linear("visual.proj", cfg.feature_dim, cfg.d_model)
        bound = 1.0 / math.sqrt(cfg.d_model)
        self._add("embed.tok", rng.uniform(-bound, bound, size=(cfg.vocab_size, cfg.d_model)))
        for i in range(cfg.layers):
            layer_norm(f"enc{i}.ln1")
            attention(f"enc{i}.attn")
            layer_norm(f"enc{i}.ln2")
            ffn(f"enc{i}.ffn")
        layer_norm("enc.lnf")
        for i in range(cfg.layers):
            layer_norm(f"dec{i}.ln1")
            attention(f"dec{i}.self")
            layer_norm(f"dec{i}.ln2")
            attention(f"dec{i}.cross")
            layer_norm(f"dec{i}.ln3")
            ffn(f"dec{i}.ffn")
        layer_norm("dec.lnf")
        linear("out", cfg.d_model, cfg.vocab_size)
        for head in ("proj_x", "proj_y"):
            linear(f"{head}.1", cfg.d_model, cfg.d_model)
            linear(f"{head}.2", cfg.d_model, cfg.d_proj)

    def _add(self, name: str, values: np.ndarray) -> None:
        self.params[name] = Tensor(values, requires_grad=True)

    # -- modes and parameter groups -------------------------------------

    def set_training(self, training: bool) -> None:
        self.training = training

    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        visual = {n: t for n, t in self.params.items() if n.startswith("visual.")}
        other = {n: t for n, t in self.params.items() if not n.startswith("visual.")}
        return {"visual": visual, "other": other}

    # -- building blocks -------------------------------------------------

    def _dropout(self, x: Tensor) -> Tensor:
        p = self.cfg.dropout
        if not self.training or p == 0.0:
            return x
        keep = (self._dropout_rng.random(x.shape) >= p) / (1.0 - p)
        return x * Tensor(keep)

    def _linear(self, name: str, x: Tensor) -> Tensor:
        return matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def _layer_norm(self, name: str, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / (var + 1e-5).sqrt()
        return normed * self.params[f"{name}.g"] + self.params[f"{name}.b"]

    def _attention(self, name: str, query_in: Tensor, kv_in: Tensor,
                   mask_bias: np.ndarray | None) -> Tensor:
        cfg = self.cfg
        n, t_q = query_in.shape[0], query_in.shape[1]
        dh = cfg.d_model // cfg.heads

        def split(x: Tensor) -> Tensor:
            # keep each tensor's own batch size: a single-row memory serves
            # many decoder prefixes through matmul broadcasting
            return x.reshape((x.shape[0], x.shape[1], cfg.heads, dh)).transpose((0, 2, 1, 3))

        q = split(self._linear(f"{name}.q", query_in))
        k = split(self._linear(f"{name}.k", kv_in))
        v = split(self._linear(f"{name}.v", kv_in))
        scores = matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        if mask_bias is not None:
            scores = scores + Tensor(mask_bias)
        weights = self._dropout(softmax(scores, axis=-1))
        context = matmul(weights, v).transpose((0, 2, 1, 3)).reshape((n, t_q, cfg.d_model))
        return self._linear(f"{name}.o", context)

    def _ffn(self, name: str, x: Tensor) -> Tensor:
        return self._linear(f"{name}.2", self._linear(f"{name}.1", x).relu())

    # -- forward passes ----------------------------------------------------

    def encode_image(self, features) -> Tensor:
        """Patch features (N, P, feature_dim) -> visual states (N, P, d_model)."""
        feats = features if isinstance(features, Tensor) else Tensor(features)
        if feats.ndim != 3 or feats.shape[2] != self.cfg.feature_dim:
            raise ContractError(
                f"expected (N, P, {self.cfg.feature_dim}) features, got {feats.shape}")
        x = self._linear("visual.proj", feats)
        x = x + Tensor(sinusoidal_positions(feats.shape[1], self.cfg.d_model))
        for i in range(self.cfg.layers):
            normed = self._layer_norm(f"enc{i}.ln1", x)
            x = x + self._dropout(self._attention(f"enc{i}.attn", normed, normed, None))
            x = x + self._dropout(self._ffn(f"enc{i}.ffn", self._layer_norm(f"enc{i}.ln2", x)))
        return self._layer_norm("enc.lnf", x)

    def decode_hidden(self, memory: Tensor, input_ids: np.ndarray) -> Tensor:
        """Teacher-forced decoder states for input tokens (N, T) -> (N, T, d)."""
        ids = np.asarray(input_ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ContractError(f"input ids must be (N, T), got shape {ids.shape}")
        n, t = ids.shape
        if t > self.cfg.max_len:
            raise ContractError(f"prefix length {t} exceeds max_len {self.cfg.max_len}")
        if t == 0 or np.any(ids[:, 0] != BOS_ID):
            raise ContractError("decoder input must be non-empty and begin with BOS")
        causal = np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, _NEG_BIAS)
        x = take_rows(self.params["embed.tok"], ids) * math.sqrt(self.cfg.d_model)
        x = x + Tensor(sinusoidal_positions(t, self.cfg.d_model))
        for i in range(self.cfg.layers):
            normed = self._layer_norm(f"dec{i}.ln1", x)
            x = x + self._dropout(self._attention(f"dec{i}.self", normed, normed, causal))
            x = x + self._dropout(self._attention(
                f"dec{i}.cross", self._layer_norm(f"dec{i}.ln2", x), memory, None))
            x = x + self._dropout(self._ffn(f"dec{i}.ffn", self._layer_norm(f"dec{i}.ln3", x)))
        return self._layer_norm("dec.lnf", x)

    def output_logits(self, hidden: Tensor) -> Tensor:
        return self._linear("out", hidden)

    def teacher_forced_logits(self, memory: Tensor,
                              input_ids: np.ndarray) -> tuple[Tensor, Tensor]:
        hidden = self.decode_hidden(memory, input_ids)
        return self.output_logits(hidden), hidden

    def pool_and_project(self, hidden: Tensor, mask, head: str) -> Tensor:
        """Masked mean pool then a two-layer ReLU head into the latent space.

        A single (T, d) input yields (d_proj,); a batch (N, T, d) yields
        (N, d_proj). The "x" and "y" heads have independent parameters.
        """
        if head not in ("x", "y"):
            raise ContractError(f"head must be 'x' or 'y', got {head!r}")
        single = hidden.ndim == 2
        pooled = masked_mean_pool(hidden, mask)
        if single:
            pooled = pooled.reshape((1, pooled.shape[0]))
        name = f"proj_{head}"
        z = self._linear(f"{name}.2", self._linear(f"{name}.1", pooled).relu())
        return z.reshape((self.cfg.d_proj,)) if single else z

    # -- inference helpers ---------------------------------------------------

    def encode_memory(self, features) -> Tensor:
        """Frozen visual states for decoding (dropout off, no tape)."""
        was_training = self.training
        self.training = False
        try:
            with ad.no_grad():
                feats = np.asarray(features, dtype=np.float64)
                if feats.ndim == 2:
                    feats = feats[None, :, :]
                return self.encode_image(feats)
        finally:
            self.training = was_training

    def step_logits(self, memory: Tensor, prefix_ids: np.ndarray) -> np.ndarray:
        """Next-token logits (N, V) for a batch of prefixes (dropout off)."""
        was_training = self.training
        self.training = False
        try:
            with ad.no_grad():
                logits, _ = self.teacher_forced_logits(memory, prefix_ids)
                return logits.data[:, -1, :].copy()
        finally:
            self.training = was_training

    def decode_step(self, memory: Tensor, prefix_ids) -> np.ndarray:
        """Single-sequence next-token logits for the prefix y_1..y_{t-1}."""
        prefix = np.asarray(prefix_ids, dtype=np.int64).reshape(1, -1)
        return self.step_logits(memory, prefix)[0]

    # -- persistence -----------------------------------------------------------

    def save(self, path: str) -> None:
        ad.save_checkpoint(path, self.params)

    def load(self, path: str) -> None:
        loaded = ad.load_checkpoint(path)
        missing = set(self.params) - set(loaded)
        extra = set(loaded) - set(self.params)
        if missing or extra:
            raise ContractError(
                f"checkpoint mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
        for name, tensor in self.params.items():
            if loaded[name].shape != tensor.shape:
                raise ContractError(
                    f"checkpoint shape {loaded[name].shape} != {tensor.shape} for '{name}'")
            tensor.data = loaded[name].astype(np.float64)

    def state_snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_snapshot(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, values in snapshot.items():
            self.params[name].data = values.copy()
