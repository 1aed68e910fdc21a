"""Training loop, validation-driven model selection, and the grid search.

One optimizer step per batch with two Adam parameter groups: the patch-
feature input projection trains at ``lr_visual`` (the slot a trainable
visual extractor would inherit) and everything else at ``lr_other``. After
each epoch both learning rates decay by ``lr_decay`` and the val split is
greedy-decoded for BLEU-4; the best epoch's parameters are checkpointed.
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, backward, decay_lr, zero_grads
from .datakit import Batch, Dataset, make_batches
from .decoding import greedy_decode_batch
from .errors import ConfigError, ContractError
from .ioutil import canonical_json, atomic_write_text, format_float
from .metrics import bleu
from .model import ModelConfig, ReportGenerator, similarity_matrix
from .objective import LossConfig, ce_loss, mixture_loss, shifted_targets, variant_loss
from .text import PAD_ID, Vocabulary, tokenize


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the failing location."""

    def __init__(self, epoch: int, batch_index: int, detail: str):
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}: {detail}")
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass
class RunConfig:
    model: ModelConfig
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 30
    batch_size: int = 128
    lr_other: float = 1e-4
    lr_visual: float = 5e-5
    lr_decay: float = 0.8
    seed: int = 0
    selection_metric: str = "bleu4"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_other <= 0:
            raise ConfigError(f"lr_other must be positive, got {self.lr_other}")
        if self.lr_visual < 0:
            # 0 is allowed and freezes the visual projection exactly
            raise ConfigError(f"lr_visual must be >= 0, got {self.lr_visual}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.selection_metric != "bleu4":
            raise ConfigError(f"unsupported selection metric {self.selection_metric!r}")

    @classmethod
    def from_dict(cls, body: dict) -> "RunConfig":
        body = dict(body)
        model = ModelConfig.from_dict(body.pop("model"))
        loss = LossConfig.from_dict(body.pop("loss", {}))
        return cls(model=model, loss=loss, **body)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(), "loss": self.loss.to_dict(),
            "epochs": self.epochs, "batch_size": self.batch_size,
            "lr_other": self.lr_other, "lr_visual": self.lr_visual,
            "lr_decay": self.lr_decay, "seed": self.seed,
            "selection_metric": self.selection_metric,
        }


@dataclass
class EpochLog:
    epoch: int
    ce: float
    wcl: float
    mixed: float
    val_bleu4: float
    lr_other: float
    lr_visual: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "ce": self.ce, "wcl": self.wcl,
                "mixed": self.mixed, "val_bleu4": self.val_bleu4,
                "lr_other": self.lr_other, "lr_visual": self.lr_visual}


@dataclass
class TrainLog:
    epochs: list[EpochLog]
    best_epoch: int
    best_checkpoint: str

    def to_dict(self) -> dict:
        return {"epochs": [e.to_dict() for e in self.epochs],
                "best_epoch": self.best_epoch,
                "best_checkpoint": self.best_checkpoint}


def forward_losses(model: ReportGenerator, batch: Batch,
                   loss_cfg: LossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """One forward pass; returns (mixed, ce, wcl) loss tensors.

    The contrastive branch is skipped entirely at lambda = 0 (and for the
    ce_only variant), so its logged component is exactly zero there.
    """
    memory = model.encode_image(batch.features)
    decoder_in, targets, target_mask = shifted_targets(batch.target_ids)
    logits, hidden = model.teacher_forced_logits(memory, decoder_in)
    ce = ce_loss(logits, targets, target_mask)
    if loss_cfg.variant == "ce_only" or loss_cfg.lam == 0.0:
        wcl = Tensor(0.0)
    else:
        patch_mask = np.ones(memory.shape[:2], dtype=bool)
        z_x = model.pool_and_project(memory, patch_mask, "x")
        z_y = model.pool_and_project(hidden, decoder_in != PAD_ID, "y")
        latents = similarity_matrix(z_x, z_y, loss_cfg.tau, labels=batch.cluster_labels)
        wcl = variant_loss(latents, loss_cfg)
    return mixture_loss(ce, wcl, loss_cfg.lam), ce, wcl


def make_optimizers(cfg: RunConfig) -> dict[str, AdamState]:
    """One Adam state per parameter group; lr_visual = 0 means frozen."""
    states = {"other": AdamState(lr=cfg.lr_other)}
    if cfg.lr_visual > 0:
        states["visual"] = AdamState(lr=cfg.lr_visual)
    return states


def train_step(model: ReportGenerator, batch: Batch, loss_cfg: LossConfig,
               optimizers: dict[str, AdamState]) -> tuple[float, float, float]:
    """Forward, backward, and one Adam update per parameter group."""
    mixed, ce, wcl = forward_losses(model, batch, loss_cfg)
    backward(mixed)
    groups = model.param_groups()
    for group_name, state in optimizers.items():
        params = groups[group_name]
        grads = {name: (t.grad if t.grad is not None else np.zeros(t.shape))
                 for name, t in params.items()}
        adam_step(params, grads, state)
    zero_grads(model.params.values())
    return mixed.item(), ce.item(), wcl.item()


def validation_bleu4(model: ReportGenerator, dataset: Dataset, vocab: Vocabulary,
                     max_len: int, split: str = "val",
                     decode_batch: int = 64) -> float:
    """Greedy-decode the split and score corpus BLEU-4 against references."""
    records = dataset.split_records(split)
    model.set_training(False)
    hyps, refs = [], []
    for start in range(0, len(records), decode_batch):
        chunk = records[start:start + decode_batch]
        features = np.stack([r.features for r in chunk])
        for record, result in zip(chunk, greedy_decode_batch(model, features, max_len)):
            seq = result.seq
            hyps.append([vocab.token_of(i) for i in seq.ids[1: seq.length - 1]])
            refs.append(tokenize(record.report))
    return bleu(hyps, refs, 4)


def train(cfg: RunConfig, dataset: Dataset, cluster_labels: dict[str, int] | None,
          vocab: Vocabulary, out_dir: str) -> TrainLog:
    """Full training run; checkpoints the best-BLEU-4 epoch under ``out_dir``."""
    if len(vocab) != cfg.model.vocab_size:
        raise ConfigError(
            f"model vocab_size {cfg.model.vocab_size} != vocabulary size {len(vocab)}")
    contrastive = cfg.loss.variant != "ce_only" and cfg.loss.lam > 0.0
    if contrastive and cluster_labels is None:
        raise ContractError("contrastive training needs cluster labels for the train split")

    os.makedirs(out_dir, exist_ok=True)
    encoded = dataset.encode_reports(vocab, cfg.model.max_len)
    model = ReportGenerator(cfg.model, seed=cfg.seed)
    optimizers = make_optimizers(cfg)
    checkpoint_path = os.path.join(out_dir, "best.ckpt")

    logs: list[EpochLog] = []
    best_epoch = -1
    best_bleu = -1.0
    for epoch in range(cfg.epochs):
        model.set_training(True)
        sums = np.zeros(3)
        steps = 0
        batches = make_batches(
            dataset, "train", cfg.batch_size, cfg.seed, epoch, encoded,
            cluster_labels=cluster_labels if contrastive else None,
            contrastive=contrastive)
        for batch_index, batch in enumerate(batches):
            try:
                mixed, ce, wcl = train_step(model, batch, cfg.loss, optimizers)
            except (ContractError, FloatingPointError) as exc:
                raise TrainingDiverged(epoch, batch_index, str(exc)) from exc
            sums += (mixed, ce, wcl)
            steps += 1

        lr_other = optimizers["other"].lr
        lr_visual = optimizers["visual"].lr if "visual" in optimizers else 0.0
        for state in optimizers.values():
            decay_lr(state, cfg.lr_decay)

        val = validation_bleu4(model, dataset, vocab, cfg.model.max_len)
        logs.append(EpochLog(
            epoch=epoch, mixed=sums[0] / steps, ce=sums[1] / steps,
            wcl=sums[2] / steps, val_bleu4=val,
            lr_other=lr_other, lr_visual=lr_visual))
        if val > best_bleu:
            best_bleu = val
            best_epoch = epoch
            model.save(checkpoint_path)

    return TrainLog(epochs=logs, best_epoch=best_epoch, best_checkpoint="best.ckpt")


def save_train_log(path: str, log: TrainLog) -> None:
    atomic_write_text(path, canonical_json(log.to_dict()) + "\n")


# -- grid search ---------------------------------------------------------------


@dataclass
class GridCell:
    lam: float
    tau: float
    val_bleu4: float
    best_epoch: int


def _run_cell(payload) -> GridCell:
    cfg_body, lam, tau, cell_seed, dataset, cluster_labels, vocab_tokens, vocab_min_freq, \
        cell_dir = payload
    vocab = Vocabulary(vocab_tokens, vocab_min_freq)
    cfg = RunConfig.from_dict(cfg_body)
    cfg = replace(cfg, loss=replace(cfg.loss, lam=lam, tau=tau), seed=cell_seed)
    log = train(cfg, dataset, cluster_labels, vocab, cell_dir)
    return GridCell(lam=lam, tau=tau,
                    val_bleu4=log.epochs[log.best_epoch].val_bleu4,
                    best_epoch=log.best_epoch)


def grid_search(base: RunConfig, lambdas: list[float], taus: list[float],
                dataset: Dataset, cluster_labels: dict[str, int] | None,
                vocab: Vocabulary, out_dir: str,
                jobs: int = 1) -> tuple[tuple[float, float], list[GridCell]]:
    """Train one run per (lambda, tau) cell with derived seeds and pick the
    highest validation BLEU-4; ties prefer smaller lambda, then smaller tau."""
    if not lambdas or not taus:
        raise ConfigError("grid search needs non-empty lambda and tau grids")
    os.makedirs(out_dir, exist_ok=True)
    specials = 4
    payloads = []
    for index, (lam, tau) in enumerate(itertools.product(lambdas, taus)):
        payloads.append((
            base.to_dict(), lam, tau, base.seed + index, dataset, cluster_labels,
            vocab.id_to_token[specials:], vocab.min_freq,
            os.path.join(out_dir, f"cell_{index:02d}"),
        ))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, payloads))
    else:
        cells = [_run_cell(p) for p in payloads]

    best = max(cells, key=lambda c: (c.val_bleu4, -c.lam, -c.tau))
    return (best.lam, best.tau), cells


def grid_table_csv(cells: list[GridCell]) -> str:
    lines = ["lambda,tau,val_bleu4,best_epoch"]
    for cell in cells:
        lines.append(",".join([
            format_float(cell.lam), format_float(cell.tau),
            format_float(cell.val_bleu4), str(cell.best_epoch)]))
    return "\n".join(lines) + "\n"
