"""Dense float64 tensors with a define-by-run reverse-mode tape.

Only the operations the pruning networks need are provided. Every op reads
its inputs' ``data`` without mutating it and, when a :class:`Tape` is active
and any input requires a gradient, appends a record holding a backward rule.
``Tape.backward`` walks those records in exact reverse order and *adds* into
leaf ``.grad`` buffers, so repeated backward passes accumulate.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar used by the budget code
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor / tensor is not supported")

    def sum(self) -> "Tensor":
        return tsum(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded on it. Tapes nest, the innermost one is active.
    """

    _stack: list = []

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def current(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _record(out: Tensor, inputs: Sequence[Tensor], rule) -> Tensor:
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.records.append(_Record(tuple(inputs), out, rule))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Backpropagate ``loss`` through ``tape``, accumulating into leaf grads."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_leaf:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                _accumulate(inp, gi)
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64).reshape(t.shape)
    else:
        t.grad += g.reshape(t.shape)


@contextlib.contextmanager
def no_tape():
    """Run ops without recording (inference)."""
    saved = Tape._stack
    Tape._stack = []
    try:
        yield
    finally:
        Tape._stack = saved


# ---------------------------------------------------------------------------
# elementwise / reduction helpers


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def stack_scalars(items: Sequence[Tensor]) -> Tensor:
    """Gather scalar tensors into a 1-d tensor."""
    out = Tensor([t.item() for t in items])
    return _record(out, tuple(items), lambda g: tuple(g[i] for i in range(len(items))))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record(out, (x,), lambda g: (g * mask,))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def rule(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _record(out, (x,), rule)


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply channel ``c`` of an [N,C,...] tensor by ``s[c]``."""
    if s.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != s.shape[0]:
        raise ShapeError(f"channel_scale: input {x.shape} vs scales {s.shape}")
    bshape = (1, -1) + (1,) * (x.data.ndim - 2)
    sb = s.data.reshape(bshape)
    out = Tensor(x.data * sb)
    red = (0,) + tuple(range(2, x.data.ndim))

    def rule(g):
        return g * sb, (g * x.data).sum(axis=red)

    return _record(out, (x, s), rule)


def repeat(a: Tensor, reps: int) -> Tensor:
    """Repeat each element of a 1-d tensor ``reps`` times (np.repeat)."""
    out = Tensor(np.repeat(a.data, reps))
    return _record(out, (a,), lambda g: (g.reshape(-1, reps).sum(axis=1),))


def take(a: Tensor, indices: Sequence[Optional[np.ndarray]]) -> Tensor:
    """Select ``indices[i]`` along axis ``i`` (``None`` keeps the axis whole).

    The result is a copy; gradients scatter back into the selected entries of
    ``a`` only, so sub-network passes accumulate into the shared full weights.
    """
    idx = []
    for axis in range(a.data.ndim):
        sel = indices[axis] if axis < len(indices) else None
        idx.append(np.arange(a.shape[axis]) if sel is None else np.asarray(sel))
    mesh = np.ix_(*idx)
    out = Tensor(a.data[mesh])

    def rule(g):
        full = np.zeros_like(a.data)
        full[mesh] = g
        return (full,)

    return _record(out, (a,), rule)


# ---------------------------------------------------------------------------
# layers


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-d cross-correlation, NCHW input, OIHW weight."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"conv2d: channels in={cin} out={cout} not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"conv2d: weight expects {cin_g} input channels per group, input gives {cin // groups}"
        )
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    cog = cout // groups
    # im2col, grouped: cols[g, n*ho*wo, cin_g*kh*kw]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = (
        win.reshape(n, groups, cin_g, ho, wo, kh, kw)
        .transpose(1, 0, 3, 4, 2, 5, 6)
        .reshape(groups, n * ho * wo, cin_g * kh * kw)
    )
    wmat = w.data.reshape(groups, cog, cin_g * kh * kw)
    y = np.matmul(cols, wmat.transpose(0, 2, 1))  # [g, nhw, cog]
    y = y.reshape(groups, n, ho, wo, cog).transpose(1, 0, 4, 2, 3).reshape(n, cout, ho, wo)
    out = Tensor(y)

    def rule(g):
        gt = g.reshape(n, groups, cog, ho * wo).transpose(1, 2, 0, 3).reshape(groups, cog, n * ho * wo)
        gw = np.matmul(gt, cols).reshape(w.shape)
        if not x.requires_grad:
            return None, gw
        wk = w.data.reshape(groups, cog, cin_g, kh, kw).transpose(0, 3, 4, 2, 1).reshape(groups, -1, cog)
        gc = np.matmul(wk, gt).reshape(groups, kh, kw, cin_g, n, ho, wo)
        hp, wp = xp.shape[2:]
        gxp = np.zeros((groups, cin_g, n, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[..., i : i + stride * ho : stride, j : j + stride * wo : stride] += gc[:, i, j]
        gx = gxp.reshape(cin, n, hp, wp)[:, :, padding : padding + h, padding : padding + wd]
        return gx.transpose(1, 0, 2, 3), gw

    return _record(out, (x, w), rule)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode batch statistics are used and, if ``update_stats``, the
    running buffers are updated in place by exponential moving average
    (unbiased variance). They may be views into larger shared buffers.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: input has {c} channels, gamma {gamma.shape}, beta {beta.shape}")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batch_norm: running stats do not match {c} channels")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        if m < 2:
            raise ShapeError("batch_norm in training mode needs N*H*W >= 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var * m / (m - 1)
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    b = (1, -1, 1, 1)
    xhat = (x.data - mean.reshape(b)) * inv.reshape(b)
    out = Tensor(xhat * gamma.data.reshape(b) + beta.data.reshape(b))

    def rule(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(b)
        if training:
            dx = (
                inv.reshape(b)
                / m
                * (m * dxhat - dxhat.sum(axis=axes).reshape(b) - xhat * (dxhat * xhat).sum(axis=axes).reshape(b))
            )
        else:
            dx = dxhat * inv.reshape(b)
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), rule)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` with ``x`` [N,F], ``w`` [O,F], ``b`` [O]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = Tensor(x.data @ w.data.T + b.data)
    return _record(out, (x, w, b), lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0)))


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if n == 0:
        raise ShapeError("cross_entropy on empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: labels must lie in [0, {k})")
    lsm = log_softmax_np(logits.data)
    rows = np.arange(n)
    out = Tensor(-lsm[rows, labels].mean())

    def rule(g):
        d = np.exp(lsm)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _record(out, (logits,), rule)
