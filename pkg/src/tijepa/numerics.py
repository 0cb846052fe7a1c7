"""Dense tensors with tape-based reverse-mode differentiation.

Forward arithmetic runs in float32. Every op also accepts float64 so the
finite-difference checker can rebuild its graphs in 64-bit, where a central
difference at h=1e-4 is trustworthy.

Ops record onto a single module-level tape (define-by-run) whenever an input
requires grad; ``backward`` replays the tape in reverse and clears it, so one
tape serves one training step. The tape must stay on one thread.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def _check_finite(arr: np.ndarray, what: str) -> None:
    # min/max propagate NaN and expose Inf without allocating a bool array
    if arr.size and not (math.isfinite(float(arr.max())) and math.isfinite(float(arr.min()))):
        raise NumericalError(f"non-finite values in {what}")


class Tensor:
    """A dense float array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _result(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        _check_finite(arr, "op output")
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._result(self.data.copy(), False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps the output gradient to one gradient (or None) per input
    backward: Callable[[np.ndarray], tuple]


class ComputationTape:
    """Ordered record of differentiable ops; reverse replay is backprop."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()


_TAPE = ComputationTape()
_GRAD_ENABLED = True


def active_tape() -> ComputationTape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _record(op: str, inputs: Sequence[Tensor], arr: np.ndarray, backward) -> Tensor:
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor._result(arr, needs)
    if needs:
        _TAPE.entries.append(TapeEntry(op, tuple(inputs), out, backward))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Replays the active tape once in reverse, zero-fills leaves that took part
    in recorded ops but lie off the loss path, then clears the tape.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = _TAPE
    if loss.requires_grad:
        _accumulate(loss, np.ones_like(loss.data))
        for entry in reversed(tape.entries):
            gout = entry.output.grad
            if gout is None:
                continue
            grads = entry.backward(gout)
            for t, gi in zip(entry.inputs, grads):
                if gi is not None and t.requires_grad:
                    _accumulate(t, gi)
    produced = {id(e.output) for e in tape.entries}
    for entry in tape.entries:
        for t in entry.inputs:
            if t.requires_grad and id(t) not in produced and t.grad is None:
                t.grad = np.zeros_like(t.data)
    tape.clear()


def zero_grads(tensors) -> None:
    values = tensors.values() if isinstance(tensors, dict) else tensors
    for t in values:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Same-shape add, or bias-add of a 1-D ``b`` over the leading axis of 2-D ``a``."""
    if a.shape == b.shape:
        def back(g):
            return g, g
    elif a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        def back(g):
            return g, g.sum(axis=0)
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _record("add", (a, b), a.data + b.data, back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return g, -g

    return _record("sub", (a, b), a.data - b.data, back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return g * b.data, g * a.data

    return _record("mul", (a, b), a.data * b.data, back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not math.isfinite(c):
        raise NumericalError("scale: non-finite coefficient")

    def back(g):
        return (g * c,)

    return _record("scale", (a,), a.data * np.asarray(c, dtype=a.dtype), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        return (-g,)

    return _record("neg", (a,), -a.data, back)


def abs_val(a: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient 0 at exactly 0."""

    def back(g):
        return (g * np.sign(a.data),)

    return _record("abs", (a,), np.abs(a.data), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", (a, b), a.data @ b.data, back)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")

    def back(g):
        return (g.T.copy(),)

    return _record("transpose", (a,), a.data.T.copy(), back)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def back(g):
        return (g.reshape(a.shape),)

    return _record("reshape", (a,), a.data.reshape(shape).copy(), back)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; duplicate indices accumulate gradient."""
    if a.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record("gather_rows", (a,), a.data[idx].copy(), back)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"slice_cols expects a 2-D tensor, got {a.shape}")
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: bad range [{start}, {stop}) for width {a.shape[1]}")

    def back(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return _record("slice_cols", (a,), a.data[:, start:stop].copy(), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows: empty input")
    width = parts[0].shape[-1]
    for p in parts:
        if p.ndim != 2 or p.shape[1] != width:
            raise ShapeError("concat_rows: all parts must be 2-D with equal width")
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, bounds, axis=0))

    return _record("concat_rows", tuple(parts), np.concatenate([p.data for p in parts], axis=0), back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols: empty input")
    rows = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != rows:
            raise ShapeError("concat_cols: all parts must be 2-D with equal row count")
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, bounds, axis=1))

    return _record("concat_cols", tuple(parts), np.concatenate([p.data for p in parts], axis=1), back)


def sum_all(a: Tensor) -> Tensor:
    def back(g):
        return (np.full_like(a.data, g),)

    return _record("sum", (a,), a.data.sum(), back)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the leading axis of a 2-D tensor."""
    if a.ndim != 2:
        raise ShapeError(f"mean_rows expects a 2-D tensor, got {a.shape}")
    n = a.shape[0]

    def back(g):
        return (np.tile(g / n, (n, 1)),)

    return _record("mean_rows", (a,), a.data.mean(axis=0), back)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis if axis >= 0 else a.ndim + axis
    if not (0 <= ax < a.ndim):
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", (a,), y, back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ShapeError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = (x.data - mu) * inv
    y = xh * gain.data + bias.data

    def back(g):
        dxh = g * gain.data
        dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
        axes = tuple(range(x.ndim - 1))
        dgain = (g * xh).sum(axis=axes) if axes else g * xh
        dbias = g.sum(axis=axes) if axes else g.copy()
        return dx, dgain, dbias

    return _record("layer_norm", (x, gain, bias), y, back)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    x_sq = x * x
    t = np.tanh(_GELU_C * (x + _GELU_K * x_sq * x))
    y = 0.5 * x * (1.0 + t)

    def back(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * x_sq)
        dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (g * dydx,)

    return _record("gelu", (a,), y, back)


def cross_entropy_logits(logits: Tensor, label: int) -> Tensor:
    """Negative log softmax probability of ``label``, via log-sum-exp."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-D logits, got {logits.shape}")
    k = logits.shape[0]
    if not 0 <= label < k:
        raise ShapeError(f"cross_entropy: label {label} out of range [0, {k})")
    z = logits.data
    m = z.max()
    shifted = z - m
    lse = m + np.log(np.exp(shifted).sum())
    loss = np.asarray(lse - z[label], dtype=z.dtype)

    def back(g):
        p = np.exp(shifted)
        p = p / p.sum()
        p[label] -= 1.0
        return (g * p,)

    return _record("cross_entropy", (logits,), loss, back)


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionParams:
    """Learned Q/K/V/output projections of one attention layer."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, requires_grad: bool = True,
               dtype=DEFAULT_DTYPE, std: float = 0.02) -> "AttentionParams":
        def w():
            return Tensor(rng.normal(0.0, std, (dim, dim)), requires_grad, dtype=dtype)

        def b():
            return Tensor(np.zeros(dim), requires_grad, dtype=dtype)

        return cls(w(), b(), w(), b(), w(), b(), w(), b())

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.wq": self.wq, f"{prefix}.bq": self.bq,
            f"{prefix}.wk": self.wk, f"{prefix}.bk": self.bk,
            f"{prefix}.wv": self.wv, f"{prefix}.bv": self.bv,
            f"{prefix}.wo": self.wo, f"{prefix}.bo": self.bo,
        }


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def attention(q_src: Tensor, kv_src: Tensor, params: AttentionParams, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention.

    Self-attention when ``q_src is kv_src``, cross-attention otherwise; the
    output keeps ``q_src``'s sequence length.
    """
    if q_src.ndim != 2 or kv_src.ndim != 2:
        raise ShapeError("attention expects 2-D token matrices")
    d = q_src.shape[1]
    if kv_src.shape[1] != d:
        raise ShapeError(f"attention: query width {d} != key/value width {kv_src.shape[1]}")
    if d % heads != 0:
        raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
    dh = d // heads
    q = linear(q_src, params.wq, params.bq)
    k = linear(kv_src, params.wk, params.bk)
    v = linear(kv_src, params.wv, params.bv)
    outs = []
    inv_sqrt = 1.0 / math.sqrt(dh)
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)
        scores = scale(matmul(qh, transpose(kh)), inv_sqrt)
        weights = softmax(scores, axis=-1)
        outs.append(matmul(weights, vh))
    merged = outs[0] if heads == 1 else concat_cols(outs)
    return linear(merged, params.wo, params.bo)


# ---------------------------------------------------------------------------
# gradient verification

FD_STEP = 1e-4
FD_TOLERANCE = 1e-4
# below this magnitude, compare absolutely instead of relatively
_FD_FLOOR = 1e-3


def check_gradients(build: Callable[[], Tensor], params: Sequence[Tensor],
                    h: float = FD_STEP, max_coords: int | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` must reconstruct the scalar loss from ``params``, which must all
    hold float64 data. ``max_coords`` caps the checked coordinates per tensor
    (evenly spaced) for larger composites.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("check_gradients requires float64 parameters")
    zero_grads(params)
    loss = build()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            n = flat.size
            if max_coords is not None and n > max_coords:
                coords = np.linspace(0, n - 1, max_coords).astype(np.int64)
            else:
                coords = np.arange(n)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(build().data)
                flat[i] = orig - h
                f_minus = float(build().data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                denom = max(abs(gflat[i]), abs(numeric), _FD_FLOOR)
                worst = max(worst, abs(gflat[i] - numeric) / denom)
    zero_grads(params)
    return worst


def _rand64(rng: np.random.Generator, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True, dtype=np.float64)


def _const64(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.uniform(-1.0, 1.0, shape), dtype=np.float64)


def gradient_suite(seed: int = 0) -> list[tuple[str, float]]:
    """Finite-difference checks for every primitive op; returns (name, max rel err)."""
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, float]] = []

    a, b = _rand64(rng, (3, 4)), _rand64(rng, (4, 2))
    r = _const64(rng, (3, 2))
    checks.append(("matmul", check_gradients(lambda: sum_all(mul(matmul(a, b), r)), [a, b])))

    x, bias = _rand64(rng, (3, 4)), _rand64(rng, (4,))
    r = _const64(rng, (3, 4))
    checks.append(("add_bias", check_gradients(lambda: sum_all(mul(add(x, bias), r)), [x, bias])))

    u, v = _rand64(rng, (2, 3)), _rand64(rng, (2, 3))
    r = _const64(rng, (2, 3))
    checks.append(("elementwise", check_gradients(
        lambda: sum_all(mul(scale(sub(mul(u, v), neg(u)), 0.7), r)), [u, v])))

    x = _rand64(rng, (3, 5), -2.0, 2.0)
    r = _const64(rng, (3, 5))
    checks.append(("softmax", check_gradients(lambda: sum_all(mul(softmax(x, axis=-1), r)), [x])))

    x, g_, b_ = _rand64(rng, (4, 6)), _rand64(rng, (6,), 0.5, 1.5), _rand64(rng, (6,))
    r = _const64(rng, (4, 6))
    checks.append(("layer_norm", check_gradients(
        lambda: sum_all(mul(layer_norm(x, g_, b_), r)), [x, g_, b_])))

    x = _rand64(rng, (3, 4), -2.0, 2.0)
    r = _const64(rng, (3, 4))
    checks.append(("gelu", check_gradients(lambda: sum_all(mul(gelu(x), r)), [x])))

    signs = np.sign(rng.uniform(-1, 1, (3, 4)))
    x = Tensor(rng.uniform(0.5, 1.5, (3, 4)) * signs, requires_grad=True, dtype=np.float64)
    r = _const64(rng, (3, 4))
    checks.append(("abs", check_gradients(lambda: sum_all(mul(abs_val(x), r)), [x])))

    x = _rand64(rng, (5, 3))
    r = _const64(rng, (4, 3))
    idx = [0, 2, 2, 4]
    checks.append(("gather_rows", check_gradients(
        lambda: sum_all(mul(gather_rows(x, idx), r)), [x])))

    x = _rand64(rng, (3, 8))
    r = _const64(rng, (3, 8))
    checks.append(("slice_concat_cols", check_gradients(
        lambda: sum_all(mul(concat_cols([slice_cols(x, 3, 8), slice_cols(x, 0, 3)]), r)), [x])))

    p1, p2 = _rand64(rng, (2, 4)), _rand64(rng, (3, 4))
    r = _const64(rng, (5, 4))
    checks.append(("concat_rows", check_gradients(
        lambda: sum_all(mul(concat_rows([p1, p2]), r)), [p1, p2])))

    x = _rand64(rng, (4, 5))
    r = _const64(rng, (5,))
    checks.append(("mean_rows", check_gradients(lambda: sum_all(mul(mean_rows(x), r)), [x])))

    x = _rand64(rng, (3, 4))
    r = _const64(rng, (2, 6))
    checks.append(("reshape_transpose", check_gradients(
        lambda: sum_all(mul(reshape(transpose(x), (2, 6)), r)), [x])))

    z = _rand64(rng, (5,), -2.0, 2.0)
    checks.append(("cross_entropy", check_gradients(lambda: cross_entropy_logits(z, 2), [z])))

    ap = AttentionParams.create(8, rng, dtype=np.float64)
    x = _rand64(rng, (3, 8))
    r = _const64(rng, (3, 8))
    sp = [x] + [getattr(ap, f) for f in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
    checks.append(("attention_self", check_gradients(
        lambda: sum_all(mul(attention(x, x, ap, 2), r)), sp)))

    ap = AttentionParams.create(8, rng, dtype=np.float64)
    q, kv = _rand64(rng, (3, 8)), _rand64(rng, (5, 8))
    r = _const64(rng, (3, 8))
    cp = [q, kv] + [getattr(ap, f) for f in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
    checks.append(("attention_cross", check_gradients(
        lambda: sum_all(mul(attention(q, kv, ap, 2), r)), cp)))

    return checks
