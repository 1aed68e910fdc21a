import numpy as np
import pytest

from wclgen.datakit import SynthSpec, generate_synthetic, make_batches
from wclgen.errors import ConfigError
from wclgen.model import ModelConfig, ReportGenerator
from wclgen.objective import LossConfig
from wclgen.text import build_vocab, tokenize
from wclgen.trainer import (
    RunConfig,
    forward_losses,
    grid_search,
    grid_table_csv,
    make_optimizers,
    train,
    train_step,
)


def small_world(n_train=12, n_val=6, seed=5):
    spec = SynthSpec(seed=seed, n_train=n_train, n_val=n_val, n_test=4,
                     n_findings=6, patch_count=3, feature_dim=8, noise_sigma=0.02)
    dataset = generate_synthetic(spec)
    vocab = build_vocab(
        [tokenize(r.report) for r in dataset.split_records("train")], min_freq=1)
    labels = {r.record_id: i % 3 for i, r in enumerate(dataset.split_records("train"))}
    return dataset, vocab, labels


def small_config(vocab, **overrides) -> RunConfig:
    base = dict(
        model=ModelConfig(vocab_size=len(vocab), max_len=24, feature_dim=8,
                          d_model=16, heads=2, layers=1, d_proj=8, dropout=0.0),
        loss=LossConfig(lam=0.2, alpha=2.0, tau=1.0, variant="wcl"),
        epochs=2, batch_size=6, lr_other=1e-3, lr_visual=5e-4, seed=3)
    base.update(overrides)
    return RunConfig(**base)


def first_batch(dataset, vocab, cfg, labels):
    encoded = dataset.encode_reports(vocab, cfg.model.max_len)
    return next(make_batches(dataset, "train", cfg.batch_size, cfg.seed, 0, encoded,
                             cluster_labels=labels))


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig(model=ModelConfig(vocab_size=8, max_len=8, feature_dim=4))
        assert (cfg.epochs, cfg.batch_size) == (30, 128)
        assert (cfg.lr_other, cfg.lr_visual, cfg.lr_decay) == (1e-4, 5e-5, 0.8)

    def test_validation(self):
        model = ModelConfig(vocab_size=8, max_len=8, feature_dim=4)
        with pytest.raises(ConfigError):
            RunConfig(model=model, epochs=0)
        with pytest.raises(ConfigError):
            RunConfig(model=model, lr_other=0.0)
        with pytest.raises(ConfigError):
            RunConfig(model=model, lr_decay=1.5)

    def test_dict_roundtrip(self):
        cfg = RunConfig(model=ModelConfig(vocab_size=8, max_len=8, feature_dim=4))
        assert RunConfig.from_dict(cfg.to_dict()) == cfg


class TestTrainStep:
    def test_small_lr_step_decreases_batch_loss(self):
        dataset, vocab, labels = small_world()
        cfg = small_config(vocab, lr_other=1e-6, lr_visual=1e-6)
        model = ReportGenerator(cfg.model, seed=cfg.seed)
        batch = first_batch(dataset, vocab, cfg, labels)
        before = forward_losses(model, batch, cfg.loss)[0].item()
        train_step(model, batch, cfg.loss, make_optimizers(cfg))
        after = forward_losses(model, batch, cfg.loss)[0].item()
        assert after < before

    def test_zero_visual_lr_freezes_projection_exactly(self):
        dataset, vocab, labels = small_world()
        cfg = small_config(vocab, lr_visual=0.0)
        model = ReportGenerator(cfg.model, seed=cfg.seed)
        frozen_before = {n: model.params[n].data.copy()
                         for n in model.param_groups()["visual"]}
        other_before = model.params["out.w"].data.copy()
        optimizers = make_optimizers(cfg)
        encoded = dataset.encode_reports(vocab, cfg.model.max_len)
        for batch in make_batches(dataset, "train", cfg.batch_size, cfg.seed, 0,
                                  encoded, cluster_labels=labels):
            train_step(model, batch, cfg.loss, optimizers)
        for name, values in frozen_before.items():
            np.testing.assert_array_equal(model.params[name].data, values)
        assert not np.array_equal(model.params["out.w"].data, other_before)

    def test_lambda_zero_logs_zero_wcl(self):
        dataset, vocab, labels = small_world()
        cfg = small_config(vocab, loss=LossConfig(lam=0.0, alpha=2.0, variant="wcl"))
        model = ReportGenerator(cfg.model, seed=cfg.seed)
        batch = first_batch(dataset, vocab, cfg, labels)
        _, _, wcl = train_step(model, batch, cfg.loss, make_optimizers(cfg))
        assert wcl == 0.0


class TestTrain:
    def test_log_shape_and_best_epoch_scan(self, tmp_path):
        dataset, vocab, labels = small_world()
        cfg = small_config(vocab, epochs=3)
        log = train(cfg, dataset, labels, vocab, str(tmp_path / "run"))
        assert len(log.epochs) == 3
        scores = [e.val_bleu4 for e in log.epochs]
        assert log.best_epoch == scores.index(max(scores))
        assert (tmp_path / "run" / log.best_checkpoint).exists()
        assert [e.epoch for e in log.epochs] == [0, 1, 2]

    def test_lr_decay_logged_per_epoch(self, tmp_path):
        dataset, vocab, labels = small_world()
        cfg = small_config(vocab, epochs=3)
        log = train(cfg, dataset, labels, vocab, str(tmp_path / "run"))
        lrs = [e.lr_other for e in log.epochs]
        assert lrs[1] == pytest.approx(lrs[0] * 0.8)
        assert lrs[2] == pytest.approx(lrs[0] * 0.64)

    def test_fixed_seed_reproduces_train_log(self, tmp_path):
        dataset, vocab, labels = small_world()
        cfg = small_config(vocab, epochs=2)
        log1 = train(cfg, dataset, labels, vocab, str(tmp_path / "a"))
        log2 = train(cfg, dataset, labels, vocab, str(tmp_path / "b"))
        assert log1.to_dict() == log2.to_dict()
        a = (tmp_path / "a" / "best.ckpt").read_bytes()
        b = (tmp_path / "b" / "best.ckpt").read_bytes()
        assert a == b

    def test_ce_only_needs_no_cluster_labels(self, tmp_path):
        dataset, vocab, _ = small_world()
        cfg = small_config(vocab, epochs=1,
                           loss=LossConfig(lam=0.0, variant="ce_only"))
        log = train(cfg, dataset, None, vocab, str(tmp_path / "run"))
        assert all(e.wcl == 0.0 for e in log.epochs)


class TestGridSearch:
    def test_cell_count_and_selection(self, tmp_path):
        dataset, vocab, labels = small_world(n_train=8, n_val=4)
        cfg = small_config(vocab, epochs=1, batch_size=4)
        (best_lam, best_tau), cells = grid_search(
            cfg, [0.1, 0.2], [0.5, 1.0], dataset, labels, vocab, str(tmp_path / "grid"))
        assert len(cells) == 4
        best_score = max(c.val_bleu4 for c in cells)
        winners = [(c.lam, c.tau) for c in cells if c.val_bleu4 == best_score]
        assert (best_lam, best_tau) == min(winners)

    def test_single_cell_grid(self, tmp_path):
        dataset, vocab, labels = small_world(n_train=8, n_val=4)
        cfg = small_config(vocab, epochs=1, batch_size=4)
        (best_lam, best_tau), cells = grid_search(
            cfg, [0.3], [2.0], dataset, labels, vocab, str(tmp_path / "grid"))
        assert (best_lam, best_tau) == (0.3, 2.0)
        assert len(cells) == 1

    def test_empty_grid_rejected(self, tmp_path):
        dataset, vocab, labels = small_world(n_train=8, n_val=4)
        cfg = small_config(vocab)
        with pytest.raises(ConfigError):
            grid_search(cfg, [], [1.0], dataset, labels, vocab, str(tmp_path / "g"))

    def test_csv_table_layout(self):
        from wclgen.trainer import GridCell
        cells = [GridCell(lam=0.1, tau=1.0, val_bleu4=0.25, best_epoch=2)]
        table = grid_table_csv(cells)
        lines = table.strip().split("\n")
        assert lines[0] == "lambda,tau,val_bleu4,best_epoch"
        lam, tau, score, epoch = lines[1].split(",")
        assert float(lam) == 0.1 and float(tau) == 1.0
        assert float(score) == 0.25 and epoch == "2"
