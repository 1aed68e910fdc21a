import math

import numpy as np
import pytest
from scipy.special import logsumexp

from wclgen.autodiff import Tensor, grad_check
from wclgen.errors import ConfigError, ContractError
from wclgen.model import BatchLatents, similarity_matrix
from wclgen.objective import (
    LossConfig,
    ce_loss,
    mixture_loss,
    shifted_targets,
    variant_loss,
    wcl_loss,
)
from wclgen.text import BOS_ID, EOS_ID, PAD_ID


def latents_from_sims(sims: np.ndarray, labels) -> BatchLatents:
    """Hand-built similarity matrix for closed-form loss checks."""
    s = Tensor(np.asarray(sims, dtype=np.float64))
    return BatchLatents(z_x=s, z_y=s, sims=s, labels=np.asarray(labels), tau=1.0)


def ntxent_oracle(sims: np.ndarray) -> float:
    """One-directional NT-Xent via scipy's logsumexp, independent of the
    tensor implementation."""
    n = sims.shape[0]
    losses = [logsumexp(sims[i]) - sims[i, i] for i in range(n)]
    return float(np.mean(losses))


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.lam, cfg.alpha, cfg.tau, cfg.variant) == (0.2, 2.0, 1.0, "wcl")

    def test_variant_constraints(self):
        with pytest.raises(ConfigError):
            LossConfig(variant="vanilla", alpha=2.0)
        with pytest.raises(ConfigError):
            LossConfig(variant="excluding", alpha=1.0)
        with pytest.raises(ConfigError):
            LossConfig(variant="ce_only", lam=0.2)
        LossConfig(variant="vanilla", alpha=1.0)
        LossConfig(variant="excluding", alpha=0.0)
        LossConfig(variant="ce_only", lam=0.0)

    def test_json_key_spelling(self):
        cfg = LossConfig.from_dict({"lambda": 0.3, "alpha": 2.0, "tau": 1.0, "variant": "wcl"})
        assert cfg.lam == 0.3
        assert cfg.to_dict()["lambda"] == 0.3


class TestCeLoss:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((2, 3, 16)))
        targets = np.ones((2, 3), dtype=np.int64)
        loss = ce_loss(logits, targets, np.ones((2, 3), dtype=bool))
        assert loss.item() == pytest.approx(math.log(16), abs=1e-12)

    def test_margin_limit(self):
        targets = np.zeros((1, 1), dtype=np.int64)
        mask = np.ones((1, 1), dtype=bool)
        previous = None
        for margin in (5.0, 20.0, 80.0):
            logits = np.zeros((1, 1, 4))
            logits[0, 0, 0] = margin
            loss = ce_loss(Tensor(logits), targets, mask).item()
            if previous is not None:
                assert loss < previous
            previous = loss
        assert previous < 1e-8

    def test_two_way_closed_form(self):
        gap = math.log(3.0)
        logits = Tensor(np.array([[[gap, 0.0]]]))
        loss = ce_loss(logits, np.array([[0]]), np.ones((1, 1), dtype=bool))
        assert loss.item() == pytest.approx(math.log(1 + 1 / 3), abs=1e-12)

    def test_pad_positions_contribute_nothing(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 4, 8))
        targets = rng.integers(0, 8, size=(2, 4))
        mask = np.array([[True, True, False, False], [True, False, False, False]])
        full = ce_loss(Tensor(logits), targets, mask).item()
        # recompute over unmasked entries only
        expected = []
        for i, j in zip(*np.nonzero(mask)):
            row = logits[i, j]
            expected.append(logsumexp(row) - row[targets[i, j]])
        assert full == pytest.approx(float(np.mean(expected)), abs=1e-12)

    def test_all_pad_rejected(self):
        with pytest.raises(ContractError):
            ce_loss(Tensor(np.zeros((1, 2, 4))), np.zeros((1, 2), dtype=np.int64),
                    np.zeros((1, 2), dtype=bool))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
        targets = rng.integers(0, 5, size=(2, 3))
        mask = np.ones((2, 3), dtype=bool)
        err = grad_check(lambda t: ce_loss(t, targets, mask), logits)
        assert err < 1e-6


class TestShiftedTargets:
    def test_layout(self):
        ids = np.array([[BOS_ID, 5, 6, EOS_ID, PAD_ID]])
        dec_in, targets, mask = shifted_targets(ids)
        np.testing.assert_array_equal(dec_in, [[BOS_ID, 5, 6, EOS_ID]])
        np.testing.assert_array_equal(targets, [[5, 6, EOS_ID, PAD_ID]])
        np.testing.assert_array_equal(mask, [[True, True, True, False]])


class TestWclLoss:
    def test_single_sample_is_zero(self):
        bl = latents_from_sims([[0.73]], [0])
        assert wcl_loss(bl, alpha=2.0).item() == 0.0

    def test_closed_form_different_labels(self):
        bl = latents_from_sims([[1.0, 0.0], [0.0, 1.0]], [0, 1])
        expected = math.log(1 + math.exp(-1))
        assert expected == pytest.approx(0.31326, abs=5e-6)
        assert wcl_loss(bl, alpha=2.0).item() == pytest.approx(expected, abs=1e-9)

    def test_closed_form_same_labels_alpha_two(self):
        bl = latents_from_sims([[1.0, 0.0], [0.0, 1.0]], [0, 0])
        expected = math.log(1 + 2 * math.exp(-1))
        assert expected == pytest.approx(0.55144, abs=5e-6)
        assert wcl_loss(bl, alpha=2.0).item() == pytest.approx(expected, abs=1e-9)

    def test_nonnegative_with_equality_iff_no_negatives(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            n = int(rng.integers(1, 7))
            sims = rng.normal(scale=3.0, size=(n, n))
            labels = rng.integers(0, 3, size=n)
            loss = wcl_loss(latents_from_sims(sims, labels), alpha=float(rng.random() * 3))
            assert loss.item() >= 0.0
        all_same = latents_from_sims(rng.normal(size=(4, 4)), [1, 1, 1, 1])
        assert wcl_loss(all_same, alpha=0.0).item() == 0.0
        with_negatives = latents_from_sims(rng.normal(size=(3, 3)), [0, 1, 2])
        assert wcl_loss(with_negatives, alpha=1.0).item() > 0.0

    def test_strictly_increasing_in_alpha(self):
        rng = np.random.default_rng(3)
        sims = rng.normal(size=(4, 4))
        labels = [0, 0, 1, 1]  # same-cluster negatives exist
        values = [wcl_loss(latents_from_sims(sims, labels), alpha=a).item()
                  for a in (0.0, 1.0, 2.0, 5.0)]
        assert values == sorted(values)
        assert len(set(values)) == 4

    def test_decreasing_in_positive_similarity(self):
        base = np.array([[0.2, 0.6], [0.1, 0.4]])
        labels = [0, 1]
        previous = None
        for bump in (0.0, 0.5, 1.0, 2.0):
            sims = base.copy()
            sims[0, 0] += bump
            sims[1, 1] += bump
            loss = wcl_loss(latents_from_sims(sims, labels), alpha=2.0).item()
            if previous is not None:
                assert loss < previous
            previous = loss

    def test_alpha_one_matches_ntxent_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            n = int(rng.integers(2, 8))
            sims = rng.normal(scale=2.0, size=(n, n))
            labels = rng.integers(0, 4, size=n)
            ours = wcl_loss(latents_from_sims(sims, labels), alpha=1.0).item()
            assert ours == pytest.approx(ntxent_oracle(sims), abs=1e-10)

    def test_large_magnitude_sims_stable(self):
        # tau = 0.1 pushes |s| up to 10; must not overflow
        sims = np.array([[10.0, -10.0], [-10.0, 10.0]])
        loss = wcl_loss(latents_from_sims(sims, [0, 1]), alpha=2.0).item()
        assert 0.0 <= loss < 1e-8

    def test_gradient_wrt_latents(self):
        rng = np.random.default_rng(5)
        labels = np.array([0, 1, 0])
        z_y = Tensor(rng.normal(size=(3, 4)))

        def build(z):
            return wcl_loss(similarity_matrix(z, z_y, tau=1.0, labels=labels), alpha=2.0)

        z_x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        assert grad_check(build, z_x) < 1e-4

        def build_y(z):
            return wcl_loss(similarity_matrix(
                Tensor(z_x.data), z, tau=1.0, labels=labels), alpha=2.0)

        z_y2 = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        assert grad_check(build_y, z_y2) < 1e-4

    def test_permutation_invariance(self):
        rng = np.random.default_rng(6)
        sims = rng.normal(size=(5, 5))
        labels = np.array([0, 1, 0, 2, 1])
        base = wcl_loss(latents_from_sims(sims, labels), alpha=2.0).item()
        perm = rng.permutation(5)
        permuted = wcl_loss(latents_from_sims(sims[np.ix_(perm, perm)], labels[perm]),
                            alpha=2.0).item()
        assert permuted == pytest.approx(base, abs=1e-12)

    def test_missing_labels_rejected(self):
        bl = BatchLatents(z_x=Tensor([[1.0]]), z_y=Tensor([[1.0]]),
                          sims=Tensor([[1.0]]), labels=None, tau=1.0)
        with pytest.raises(ContractError):
            wcl_loss(bl, alpha=1.0)


class TestMixtureLoss:
    def test_endpoints(self):
        assert mixture_loss(2.0, 0.5, 0.0) == 2.0
        assert mixture_loss(2.0, 0.5, 1.0) == 0.5

    def test_paper_default_weighting(self):
        assert mixture_loss(2.0, 0.5, 0.2) == pytest.approx(1.7)

    def test_tensor_inputs(self):
        out = mixture_loss(Tensor(2.0), Tensor(0.5), 0.2)
        assert out.item() == pytest.approx(1.7)

    def test_lambda_range(self):
        with pytest.raises(ContractError):
            mixture_loss(1.0, 1.0, 1.5)


class TestVariantLoss:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.sims = rng.normal(size=(4, 4))
        self.labels = np.array([0, 0, 1, 2])

    def bl(self):
        return latents_from_sims(self.sims, self.labels)

    def test_vanilla_equals_alpha_one(self):
        cfg = LossConfig(variant="vanilla", alpha=1.0)
        assert variant_loss(self.bl(), cfg).item() == wcl_loss(self.bl(), 1.0).item()

    def test_excluding_zero_on_single_cluster_batch(self):
        bl = latents_from_sims(self.sims, [3, 3, 3, 3])
        cfg = LossConfig(variant="excluding", alpha=0.0)
        assert variant_loss(bl, cfg).item() == 0.0

    def test_wcl_alpha_one_equals_vanilla_bitwise(self):
        a = variant_loss(self.bl(), LossConfig(variant="wcl", alpha=1.0)).item()
        b = variant_loss(self.bl(), LossConfig(variant="vanilla", alpha=1.0)).item()
        assert a == b

    def test_ce_only_returns_zero(self):
        cfg = LossConfig(variant="ce_only", lam=0.0)
        assert variant_loss(self.bl(), cfg).item() == 0.0

    def test_bidirectional_averages_both_directions(self):
        cfg = LossConfig(variant="wcl", alpha=2.0, bidirectional=True)
        forward = wcl_loss(self.bl(), 2.0).item()
        flipped = wcl_loss(latents_from_sims(self.sims.T, self.labels), 2.0).item()
        assert variant_loss(self.bl(), cfg).item() == pytest.approx(
            (forward + flipped) / 2, abs=1e-12)
