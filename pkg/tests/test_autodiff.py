import math

import numpy as np
import pytest

from wclgen.autodiff import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    decay_lr,
    grad_check,
    load_checkpoint,
    log_softmax,
    masked_mean_pool,
    matmul,
    save_checkpoint,
    softmax,
    take_rows,
)
from wclgen.errors import ContractError, EmptyPoolError, ShapeMismatchError


class TestTensorInvariants:
    def test_rejects_nan(self):
        with pytest.raises(ContractError):
            Tensor([1.0, float("nan")])

    def test_rejects_inf(self):
        with pytest.raises(ContractError):
            Tensor([[float("inf")]])

    def test_rejects_zero_dim(self):
        with pytest.raises(ShapeMismatchError):
            Tensor(np.zeros((2, 0)))

    def test_scalar_item(self):
        assert Tensor(3.5).item() == 3.5


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(a, Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_hand_arithmetic(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal((a @ b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_zero_case(self):
        out = matmul(Tensor([[0.0, 0.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[0.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_batched_gradient(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        assert grad_check(lambda t: (t @ b).sum(), a) < 1e-7
        assert grad_check(lambda t: (a @ t).sum(), b) < 1e-7


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_closed_form(self):
        out = softmax(Tensor([math.log(2.0), 0.0]))
        np.testing.assert_allclose(out.data, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)

    def test_no_overflow(self):
        out = softmax(Tensor([1000.0, 0.0]))
        assert out.data[0] == pytest.approx(1.0)
        assert out.data[1] == pytest.approx(0.0, abs=1e-300)

    def test_slices_sum_to_one(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(scale=5.0, size=(4, 7)))
        sums = softmax(x, axis=-1).data.sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 5))
        a = softmax(Tensor(x), axis=1).data
        b = softmax(Tensor(x + 123.456), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_invalid_axis(self):
        with pytest.raises(ShapeMismatchError):
            softmax(Tensor([1.0, 2.0]), axis=3)

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 6))
        np.testing.assert_allclose(
            log_softmax(Tensor(x)).data, np.log(softmax(Tensor(x)).data), atol=1e-12)


class TestMaskedMeanPool:
    def test_single_active_row(self):
        out = masked_mean_pool(Tensor([[2.0, 4.0], [0.0, 0.0]]), [True, False])
        np.testing.assert_array_equal(out.data, [2.0, 4.0])

    def test_direct_mean(self):
        out = masked_mean_pool(Tensor([[1.0, 1.0], [3.0, 3.0]]), [True, True])
        np.testing.assert_array_equal(out.data, [2.0, 2.0])

    def test_zero_rows(self):
        out = masked_mean_pool(Tensor(np.zeros((3, 4))), [True] * 3)
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_empty_mask_raises(self):
        with pytest.raises(EmptyPoolError):
            masked_mean_pool(Tensor(np.ones((2, 3))), [False, False])

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(4)
        h = rng.normal(size=(3, 5, 2))
        mask = rng.random((3, 5)) < 0.7
        mask[:, 0] = True
        batched = masked_mean_pool(Tensor(h), mask).data
        for i in range(3):
            single = masked_mean_pool(Tensor(h[i]), mask[i]).data
            np.testing.assert_allclose(batched[i], single, atol=1e-15)


class TestBackward:
    def test_linear_case(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_analytic_derivative(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_constant_loss_leaves_grads_empty(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(Tensor(5.0))
        assert x.grad is None

    def test_non_scalar_root_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_shared_subexpression_accumulates(self):
        # y = x + x must produce the same gradient as 2*x on a duplicated input
        x = Tensor([1.5, -2.0], requires_grad=True)
        backward((x + x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

        a = Tensor([1.5, -2.0], requires_grad=True)
        b = Tensor([1.5, -2.0], requires_grad=True)
        backward((a + b).sum())
        np.testing.assert_array_equal(x.grad, a.grad + b.grad)


class TestGradCheck:
    def test_quadratic(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        assert grad_check(lambda t: (t * t).sum(), x) < 1e-7

    def test_constant(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        assert grad_check(lambda t: Tensor(7.0), x) == 0.0

    @pytest.mark.parametrize("op", [
        lambda t: t.exp().sum(),
        lambda t: (t * t + 1.0).log().sum(),
        lambda t: (t * t + 0.5).sqrt().sum(),
        lambda t: t.relu().sum(),
        lambda t: softmax(t, axis=-1).sum(axis=0).log().sum(),
        lambda t: log_softmax(t, axis=-1).mean(),
        lambda t: masked_mean_pool(t, [True, False, True]).sum(),
        lambda t: (t / (t * t + 2.0)).sum(),
        lambda t: t.transpose((1, 0)).reshape((6,)).mean(),
    ])
    def test_randomized_ops(self, op):
        rng = np.random.default_rng(6)
        # offset away from relu kink so finite differences stay clean
        x = Tensor(rng.normal(size=(3, 2)) + 0.05, requires_grad=True)
        assert grad_check(op, x) < 1e-4

    def test_take_rows_accumulates_repeats(self):
        w = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        backward((take_rows(w, [0, 0, 2]) * 1.0).sum())
        np.testing.assert_array_equal(w.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


class TestAdam:
    def test_first_step_closed_form(self):
        p = {"w": Tensor([0.0], requires_grad=True)}
        state = AdamState(lr=1e-3)
        adam_step(p, {"w": np.array([1.0])}, state)
        delta = abs(p["w"].data[0] + 1e-3)
        assert delta < 1e-9 * 1e-3
        assert state.step == 1

    def test_zero_gradient_is_a_noop(self):
        p = {"w": Tensor([1.0, -2.0], requires_grad=True)}
        state = AdamState(lr=0.1)
        adam_step(p, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_deterministic_trajectories(self):
        def run():
            rng = np.random.default_rng(7)
            p = {"w": Tensor(rng.normal(size=4), requires_grad=True)}
            state = AdamState(lr=1e-2)
            for _ in range(25):
                adam_step(p, {"w": rng.normal(size=4)}, state)
            return p["w"].data.copy()

        np.testing.assert_array_equal(run(), run())

    def test_shape_mismatch(self):
        p = {"w": Tensor([1.0, 2.0], requires_grad=True)}
        with pytest.raises(ShapeMismatchError):
            adam_step(p, {"w": np.zeros(3)}, AdamState(lr=0.1))

    def test_decay(self):
        state = AdamState(lr=1e-4)
        decay_lr(state, 0.8)
        assert state.lr == pytest.approx(8e-5)
        decay_lr(state, 1.0)
        assert state.lr == pytest.approx(8e-5)
        decay_lr(state, 0.8)
        decay_lr(state, 0.8)
        assert state.lr == pytest.approx(5.12e-5)

    def test_decay_out_of_range(self):
        with pytest.raises(ContractError):
            decay_lr(AdamState(lr=1.0), 0.0)
        with pytest.raises(ContractError):
            decay_lr(AdamState(lr=1.0), 1.5)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(8)
        tensors = {
            "enc.w": Tensor(rng.normal(size=(3, 4))),
            "enc.b": Tensor(rng.normal(size=4)),
            "scalar": Tensor(rng.normal()),
        }
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, tensors)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(tensors)
        for name, t in tensors.items():
            np.testing.assert_array_equal(loaded[name], t.data)

    def test_header_carries_format_version(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, {"w": Tensor([1.0])})
        with open(path, "rb") as fh:
            header = fh.readline().decode()
        assert "wclgen-ckpt-1" in header

    def test_bad_format_rejected(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        with open(path, "wb") as fh:
            fh.write(b'{"format":"other","tensors":[]}\n')
        with pytest.raises(ContractError):
            load_checkpoint(path)

    def test_identical_saves_are_byte_identical(self, tmp_path):
        tensors = {"a": Tensor([[0.1, 0.2]]), "b": Tensor([3.0])}
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(p1, tensors)
        save_checkpoint(p2, tensors)
        assert open(p1, "rb").read() == open(p2, "rb").read()
