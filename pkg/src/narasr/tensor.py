"""Dense tensors with reverse-mode automatic differentiation on a NumPy backend.

Every operation needed by the recognizer lives here: matmul, softmax,
layer norm, GLU, strided 2D convolution, embedding lookup, dropout and a
label-smoothed NLL loss, plus a finite-difference gradient checker.
Forward ops record lineage closures; ``Tensor.backward`` replays them in
reverse topological order. Any NaN produced in a forward or backward
computation raises :class:`NumericFault` immediately.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericFault

_FLOAT_DTYPES = (np.float32, np.float64)

# per-thread so concurrent inference cannot race a shared flag
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable lineage recording inside the block (inference / timing)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _check_finite(arr: np.ndarray, where: str) -> None:
    if np.isnan(arr).any():
        raise NumericFault(f"NaN produced in {where}")


class Tensor:
    """A dense real array with optional gradient and recorded lineage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Optional[Callable] = None
        self.op = "leaf"

    # -- basic introspection -------------------------------------------------

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
        if self.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- autograd ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable
        requires-grad tensor. Repeated calls keep accumulating."""
        if self.size != 1:
            raise ContractError(f"backward requires a scalar, got shape {self.shape}")
        order = _topo_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        def send(parent: "Tensor", contribution: np.ndarray) -> None:
            if not parent.requires_grad:
                return
            _check_finite(contribution, f"backward of {parent.op}")
            key = id(parent)
            held = pending.get(key)
            pending[key] = contribution if held is None else held + contribution

        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward_fn is not None:
                node._backward_fn(g, send)

    def zero_grad(self) -> None:
        self.grad = None


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of NumPy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_array(x, like: Tensor) -> np.ndarray:
    return np.asarray(x, dtype=like.data.dtype) if not isinstance(x, np.ndarray) else x


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; `b` may be a Tensor or a constant array/scalar."""
    if isinstance(b, Tensor):
        out_data = a.data + b.data

        def bw(g, send):
            send(a, _unbroadcast(g, a.shape))
            send(b, _unbroadcast(g, b.shape))

        return _make(out_data, (a, b), bw, "add")
    const = _as_array(b, a)

    def bw_const(g, send):
        send(a, _unbroadcast(g, a.shape))

    return _make(a.data + const, (a,), bw_const, "add")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        def bw(g, send):
            send(a, _unbroadcast(g, a.shape))
            send(b, _unbroadcast(-g, b.shape))

        return _make(a.data - b.data, (a, b), bw, "sub")
    const = _as_array(b, a)

    def bw_const(g, send):
        send(a, _unbroadcast(g, a.shape))

    return _make(a.data - const, (a,), bw_const, "sub")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; `b` may be a Tensor or a constant array/scalar."""
    if isinstance(b, Tensor):
        def bw(g, send):
            send(a, _unbroadcast(g * b.data, a.shape))
            send(b, _unbroadcast(g * a.data, b.shape))

        return _make(a.data * b.data, (a, b), bw, "mul")
    const = _as_array(b, a)

    def bw_const(g, send):
        send(a, _unbroadcast(g * const, a.shape))

    return _make(a.data * const, (a,), bw_const, "mul")


def neg(a: Tensor) -> Tensor:
    def bw(g, send):
        send(a, -g)

    return _make(-a.data, (a,), bw, "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Leading dimensions broadcast as in ``np.matmul``."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    out_data = np.matmul(a.data, b.data)

    def bw(g, send):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        send(a, _unbroadcast(ga, a.shape))
        send(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), bw, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def bw(g, send):
        send(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g, send):
        send(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), bw, "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(tensors)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g, send):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            send(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in parts], axis=axis), parts, bw, "concat")


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, send):
        if axis is None:
            send(a, np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            send(a, np.broadcast_to(gg, a.shape).astype(a.data.dtype, copy=True))

    return _make(np.asarray(out_data), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g, send):
        send(a, g * mask)

    return _make(np.where(mask, a.data, 0), (a,), bw, "relu")


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_data(a.data)

    def bw(g, send):
        send(a, g * s * (1.0 - s))

    return _make(s, (a,), bw, "sigmoid")


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# neural-network ops
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-shifted softmax along `axis`; each slice sums to 1."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g, send):
        inner = (g * y).sum(axis=axis, keepdims=True)
        send(x, y * (g - inner))

    return _make(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bw(g, send):
        gxhat = g * gain.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        send(x, inv * (gxhat - m1 - xhat * m2))
        reduce_axes = tuple(range(g.ndim - 1))
        send(gain, (g * xhat).sum(axis=reduce_axes))
        send(bias, g.sum(axis=reduce_axes))

    return _make(out_data, (x, gain, bias), bw, "layer_norm")


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half * sigmoid(second half)."""
    d2 = x.shape[-1]
    if d2 % 2 != 0:
        raise DimensionError(f"glu needs an even last dimension, got {d2}")
    d = d2 // 2
    a = x.data[..., :d]
    s = _sigmoid_data(x.data[..., d:])
    out_data = a * s

    def bw(g, send):
        ga = g * s
        gb = g * a * s * (1.0 - s)
        send(x, np.concatenate([ga, gb], axis=-1))

    return _make(out_data, (x,), bw, "glu")


def conv2d(x: Tensor, filters: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Strided 2D cross-correlation.

    `x` is [C_in, H, W] or [B, C_in, H, W]; `filters` is [C_out, C_in, k, k].
    "same" pads with zeros on the bottom/right so H' = ceil(H/stride); the
    one-sided padding keeps a prefix of frames independent of trailing pad.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or filters.ndim != 4:
        raise DimensionError(
            f"conv2d expects [B,C,H,W] and [O,C,k,k], got {x.shape} and {filters.shape}"
        )
    batch, cin, height, width = xd.shape
    cout, f_cin, k, k2 = filters.shape
    if k != k2 or f_cin != cin:
        raise DimensionError(
            f"conv2d filters {filters.shape} incompatible with input {x.shape}"
        )
    if height == 0 or width == 0:
        raise DimensionError(f"conv2d input has a zero-sized dimension: {x.shape}")
    if padding == "same":
        h_out = -(-height // stride)
        w_out = -(-width // stride)
        pad_h = max((h_out - 1) * stride + k - height, 0)
        pad_w = max((w_out - 1) * stride + k - width, 0)
    elif padding == "valid":
        if k > height or k > width:
            raise DimensionError(
                f"conv2d kernel {k} exceeds input {height}x{width} without padding"
            )
        h_out = (height - k) // stride + 1
        w_out = (width - k) // stride + 1
        pad_h = pad_w = 0
    else:
        raise DimensionError(f"unknown padding mode {padding!r}")

    xp = np.pad(xd, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
    out_data = np.zeros((batch, cout, h_out, w_out), dtype=xd.dtype)
    for dy in range(k):
        for dx in range(k):
            sub = xp[:, :, dy : dy + stride * h_out : stride, dx : dx + stride * w_out : stride]
            out_data += np.einsum("bchw,oc->bohw", sub, filters.data[:, :, dy, dx])

    def bw(g, send):
        gb = g[None] if g.ndim == 3 else g
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(filters.data)
        for dy in range(k):
            for dx in range(k):
                sub = xp[:, :, dy : dy + stride * h_out : stride, dx : dx + stride * w_out : stride]
                gw[:, :, dy, dx] = np.einsum("bohw,bchw->oc", gb, sub)
                gxp[:, :, dy : dy + stride * h_out : stride, dx : dx + stride * w_out : stride] += (
                    np.einsum("bohw,oc->bchw", gb, filters.data[:, :, dy, dx])
                )
        gx = gxp[:, :, :height, :width]
        send(x, gx[0] if squeeze else gx)
        send(filters, gw)

    return _make(out_data[0] if squeeze else out_data, (x, filters), bw, "conv2d")


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of `table`; the gradient scatter-adds back into the rows."""
    idx = np.asarray(indices, dtype=np.int64)
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = int(idx.reshape(-1)[np.argmax((idx < 0) | (idx >= vocab))])
        raise IndexError(f"embedding index {bad} out of range for table of {vocab} rows")
    out_data = table.data[idx]

    def bw(g, send):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        send(table, gt)

    return _make(out_data, (table,), bw, "embedding_lookup")


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    scale = 1.0 / (1.0 - rate)

    def bw(g, send):
        send(x, g * keep * scale)

    return _make(x.data * keep * scale, (x,), bw, "dropout")


def label_smoothed_nll(
    logits: Tensor,
    targets,
    smoothing: float,
    weights: Optional[np.ndarray] = None,
) -> Tensor:
    """Cross-entropy against a label-smoothed target distribution.

    The smoothed distribution puts (1 - smoothing) on the target id and
    smoothing / (V - 1) on every other id. For [L, V] logits the result is
    the (weight-)mean over positions; for [B, L, V] each sequence is
    averaged over its positions and the batch is summed, so accumulated
    micro-batches match one large batch exactly.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ContractError(f"smoothing must be in [0, 1), got {smoothing}")
    tgt = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if smoothing > 0.0 and vocab < 2:
        raise ContractError("label smoothing needs a vocabulary of at least 2")
    if logits.shape[:-1] != tgt.shape:
        raise DimensionError(
            f"targets shape {tgt.shape} does not match logits {logits.shape}"
        )
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        bad = int(tgt.reshape(-1)[np.argmax((tgt < 0) | (tgt >= vocab))])
        raise IndexError(f"target id {bad} out of range for vocabulary of {vocab}")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp_target = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    logp_sum = logp.sum(axis=-1)
    off = smoothing / (vocab - 1) if smoothing > 0.0 else 0.0
    ce = -((1.0 - smoothing) * logp_target + off * (logp_sum - logp_target))

    if weights is None:
        w = np.ones_like(ce)
    else:
        w = np.asarray(weights, dtype=logits.data.dtype)
        if w.shape != ce.shape:
            raise DimensionError(f"weights shape {w.shape} does not match positions {ce.shape}")
    denom = w.sum(axis=-1, keepdims=True)
    if np.any(denom == 0):
        raise ContractError("loss weights sum to zero for at least one sequence")
    coeff = w / denom
    loss = float((ce * coeff).sum())

    def bw(g, send):
        p = np.exp(logp)
        q = np.full_like(p, off)
        np.put_along_axis(q, tgt[..., None], 1.0 - smoothing, axis=-1)
        send(logits, float(g) * coeff[..., None] * (p - q))

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw, "label_smoothed_nll")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    worst_index: int


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    op_name: str = "",
) -> GradCheckReport:
    """Compare backward() against central differences, elementwise.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ContractError("finite_difference_check needs a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            bumped = probe.data.copy().reshape(-1)
            bumped[i] = flat[i] + h
            hi = f(Tensor(bumped.reshape(x.shape))).item()
            bumped[i] = flat[i] - h
            lo = f(Tensor(bumped.reshape(x.shape))).item()
            numeric.reshape(-1)[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    return GradCheckReport(op_name=op_name, max_rel_error=float(rel.reshape(-1)[worst]), worst_index=worst)


# ---------------------------------------------------------------------------
# constructors / initializers
# ---------------------------------------------------------------------------


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def xavier_uniform(shape, rng: np.random.Generator, dtype=np.float64, requires_grad: bool = True) -> Tensor:
    fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
    fan_out = shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


def normal_init(shape, rng: np.random.Generator, std: float = 0.02, dtype=np.float64, requires_grad: bool = True) -> Tensor:
    data = (rng.standard_normal(shape) * std).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


# Method-style sugar so model code reads naturally.
Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(self, other)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.reshape = reshape
Tensor.transpose = transpose
Tensor.sum = tensor_sum
Tensor.mean = mean
