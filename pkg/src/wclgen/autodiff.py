"""Dense f64 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major float64 numpy array. Every differentiable
operation records a ``TapeNode`` on its output; ``backward`` walks the tape
in reverse topological order and accumulates gradients on every tensor that
requires them. The tape is dynamic: it is rebuilt by each forward pass and
shares nothing across training contexts.

Also here: the Adam optimizer, finite-difference gradient checking, and the
binary checkpoint container used by the model layer.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, EmptyPoolError, ShapeMismatchError
from .ioutil import canonical_json, atomic_write_bytes

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class TapeNode:
    """One recorded operation: tag, input tensors, and the backward rule.

    ``saved`` caches whatever forward values the backward rule needs. The
    rule maps the output gradient to one gradient array per input (None for
    inputs that do not require grad).
    """

    __slots__ = ("op_kind", "inputs", "saved", "backward_rule")

    def __init__(self, op_kind: str, inputs: tuple, saved: dict,
                 backward_rule: Callable[[np.ndarray, dict], list]):
        self.op_kind = op_kind
        self.inputs = inputs
        self.saved = saved
        self.backward_rule = backward_rule


class Tensor:
    """Dense n-dimensional f64 array, optionally tracked by the tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0 or any(d <= 0 for d in arr.shape):
            raise ShapeMismatchError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor values must be finite (no NaN/Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- graph plumbing ------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return _elementwise("add", self, _as_tensor(other),
                            lambda a, b: a + b,
                            lambda g, s: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _elementwise("sub", self, _as_tensor(other),
                            lambda a, b: a - b,
                            lambda g, s: (g, -g))

    def __rsub__(self, other):
        return _as_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = _as_tensor(other)
        return _elementwise("mul", self, other,
                            lambda a, b: a * b,
                            lambda g, s: (g * s["b"], g * s["a"]),
                            save={"a": self.data, "b": other.data})

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        return _elementwise("div", self, other,
                            lambda a, b: a / b,
                            lambda g, s: (g / s["b"], -g * s["a"] / (s["b"] * s["b"])),
                            save={"a": self.data, "b": other.data})

    def __rtruediv__(self, other):
        return _as_tensor(other).__truediv__(self)

    def __neg__(self):
        return _unary("neg", self, lambda a: -a, lambda g, s: -g)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def exp(self) -> "Tensor":
        out = _unary("exp", self, np.exp, lambda g, s: g * s["out"])
        if out.node is not None:
            out.node.saved["out"] = out.data
        return out

    def log(self) -> "Tensor":
        if np.any(self.data <= 0):
            raise ContractError("log requires strictly positive inputs")
        return _unary("log", self, np.log, lambda g, s: g / s["x"], save={"x": self.data})

    def sqrt(self) -> "Tensor":
        if np.any(self.data < 0):
            raise ContractError("sqrt requires nonnegative inputs")
        out = _unary("sqrt", self, np.sqrt, lambda g, s: g / (2.0 * s["out"]))
        if out.node is not None:
            out.node.saved["out"] = out.data
        return out

    def relu(self) -> "Tensor":
        return _unary("relu", self, lambda a: np.maximum(a, 0.0),
                      lambda g, s: g * (s["x"] > 0.0), save={"x": self.data})

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        def backward_rule(g, s):
            if s["axis"] is None:
                return [np.broadcast_to(g, s["shape"]).copy()]
            gg = g
            if not s["keepdims"]:
                gg = np.expand_dims(g, s["axis"])
            return [np.broadcast_to(gg, s["shape"]).copy()]

        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        return _make_op("sum", (self,), out_data, backward_rule,
                        saved={"axis": axis, "keepdims": keepdims, "shape": self.shape})

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, shape) -> "Tensor":
        out_data = self.data.reshape(shape)
        return _make_op("reshape", (self,), out_data,
                        lambda g, s: [g.reshape(s["shape"])],
                        saved={"shape": self.shape})

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)
        return _make_op("transpose", (self,), out_data,
                        lambda g, s: [g.transpose(s["inv"])],
                        saved={"inv": inverse})


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _make_op(op_kind: str, inputs: tuple, out_data: np.ndarray,
             backward_rule, saved: dict | None = None) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op_kind, inputs, saved or {}, backward_rule)
    return out


def _unary(op_kind, x: Tensor, fwd, bwd, save: dict | None = None) -> Tensor:
    return _make_op(op_kind, (x,), fwd(x.data), lambda g, s: [bwd(g, s)], saved=save)


def _elementwise(op_kind, a: Tensor, b: Tensor, fwd, bwd, save: dict | None = None) -> Tensor:
    def backward_rule(g, s):
        ga, gb = bwd(g, s)
        return [_unbroadcast(ga, s["a_shape"]), _unbroadcast(gb, s["b_shape"])]

    saved = dict(save or {})
    saved["a_shape"] = a.shape
    saved["b_shape"] = b.shape
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatchError(f"{op_kind}: shapes {a.shape} and {b.shape}: {exc}") from exc
    return _make_op(op_kind, (a, b), out_data, backward_rule, saved=saved)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- core operations ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with batch broadcasting over leading dimensions.

    Backward: dA = dC @ B^T, dB = A^T @ dC (transpose of the last two axes),
    reduced over broadcast batch dimensions.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def backward_rule(g, s):
        ga = _unbroadcast(g @ s["b"].swapaxes(-1, -2), s["a_shape"])
        gb = _unbroadcast(s["a"].swapaxes(-1, -2) @ g, s["b_shape"])
        return [ga, gb]

    return _make_op("matmul", (a, b), a.data @ b.data, backward_rule,
                    saved={"a": a.data, "b": b.data, "a_shape": a.shape, "b_shape": b.shape})


def take_rows(weight: Tensor, indices) -> Tensor:
    """Row gather (embedding lookup): out[..., :] = weight[indices[...], :].

    Backward scatter-adds into the weight gradient, so repeated indices
    accumulate correctly.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise ContractError(f"row index out of range for weight with {weight.shape[0]} rows")

    def backward_rule(g, s):
        gw = np.zeros(s["w_shape"], dtype=np.float64)
        np.add.at(gw, s["idx"], g)
        return [gw]

    return _make_op("take_rows", (weight,), weight.data[idx], backward_rule,
                    saved={"idx": idx, "w_shape": weight.shape})


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack equally-shaped tensors along a new leading axis."""
    parts = [_as_tensor(p) for p in parts]
    base = parts[0].shape
    if any(p.shape != base for p in parts):
        raise ShapeMismatchError("concat_rows requires identical shapes")

    def backward_rule(g, s):
        return [g[i] for i in range(s["n"])]

    return _make_op("stack", tuple(parts), np.stack([p.data for p in parts]),
                    backward_rule, saved={"n": len(parts)})


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted before exponentiation)."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeMismatchError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    expd = shifted.exp()
    return expd / expd.sum(axis=axis % x.ndim, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeMismatchError(f"log_softmax axis {axis} invalid for shape {x.shape}")
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    return shifted - shifted.exp().sum(axis=axis % x.ndim, keepdims=True).log()


def masked_mean_pool(h: Tensor, mask) -> Tensor:
    """Mean over the rows of ``h`` where ``mask`` is true.

    ``h`` is (T, d) or batched (N, T, d) with a matching (T,) or (N, T)
    boolean mask; padded positions contribute nothing.
    """
    h = _as_tensor(h)
    m = np.asarray(mask, dtype=bool)
    if h.ndim not in (2, 3):
        raise ShapeMismatchError(f"masked_mean_pool expects (T,d) or (N,T,d), got {h.shape}")
    if m.shape != h.shape[:-1]:
        raise ShapeMismatchError(f"mask shape {m.shape} does not match rows {h.shape[:-1]}")
    counts = m.sum(axis=-1)
    if np.any(counts == 0):
        raise EmptyPoolError("mask selects no positions")
    weights = m.astype(np.float64) / counts[..., None]
    return (h * Tensor(weights[..., None])).sum(axis=h.ndim - 2)


# -- backward pass -------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the recorded tape.

    Populates ``grad`` on every tensor with ``requires_grad``; gradients of
    shared subexpressions are summed. Raises if the root is not scalar.
    """
    if loss.shape != ():
        raise ContractError(f"backward root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # reverse topological order over the tape
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    loss.grad = np.ones((), dtype=np.float64)
    for tensor in reversed(order):
        node = tensor.node
        if node is None or tensor.grad is None:
            continue
        grads = node.backward_rule(tensor.grad, node.saved)
        for parent, g in zip(node.inputs, grads):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g

    for tensor in order:
        if tensor.node is None and tensor.grad is not None:
            if not np.all(np.isfinite(tensor.grad)):
                raise ContractError("non-finite gradient produced by backward")


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- gradient checking ----------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map ``x`` to a scalar Tensor. The analytic gradient comes from
    one backward pass; each coordinate is then perturbed by ±h in place and
    the relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
    """
    x.zero_grad()
    out = f(x)
    if out.shape != ():
        raise ContractError("grad_check target must return a scalar")
    backward(out)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = f(x).item()
            flat[i] = original - h
            f_minus = f(x).item()
            flat[i] = original
            numeric[i] = (f_plus - f_minus) / (2.0 * h)
    numeric = numeric.reshape(x.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# -- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moment estimates for one parameter group."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-12
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ContractError("betas must lie in (0, 1)")


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for name, p in params.items():
        if name not in grads:
            raise ContractError(f"missing gradient for parameter '{name}'")
        if np.shape(grads[name]) != p.shape:
            raise ShapeMismatchError(
                f"gradient shape {np.shape(grads[name])} != parameter shape {p.shape} for '{name}'")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def decay_lr(state: AdamState, factor: float) -> AdamState:
    """Multiply the learning rate by ``factor`` (0 < factor <= 1)."""
    if not (0.0 < factor <= 1.0):
        raise ContractError(f"decay factor must be in (0, 1], got {factor}")
    state.lr *= factor
    return state


# -- checkpoint container --------------------------------------------------

CHECKPOINT_FORMAT = "wclgen-ckpt-1"


def save_checkpoint(path: str, tensors: dict[str, Tensor | np.ndarray]) -> None:
    """Write a checkpoint: one-line JSON header, newline, then raw payloads.

    Payloads are little-endian f64 in header order (names sorted).
    """
    names = sorted(tensors)
    entries = []
    blobs = []
    for name in names:
        arr = tensors[name].data if isinstance(tensors[name], Tensor) else np.asarray(tensors[name])
        arr = arr.astype("<f8")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f64"})
        blobs.append(arr.tobytes(order="C"))
    header = canonical_json({"format": CHECKPOINT_FORMAT, "tensors": entries})
    atomic_write_bytes(path, header.encode("utf-8") + b"\n" + b"".join(blobs))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"unsupported checkpoint format: {header.get('format')!r}")
        out: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ContractError(f"checkpoint payload truncated at tensor '{entry['name']}'")
            out[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return out
