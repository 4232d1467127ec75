"""Dense-tensor library with reverse-mode automatic differentiation.

Values are float32 by default (float64 supported for high-precision
checks). Gradients are recorded on an explicit Tape: operations executed
while a Tape is active append (inputs, output, backward-rule) records in
execution order, so one reverse sweep of the tape propagates gradients to
every leaf that requires them. With no active tape, ops run forward-only.

Tapes are tracked per thread; independent tapes on separate threads share
no mutable state.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor", "Tape", "backward", "as_tensor", "zero_grads",
    "add", "sub", "mul", "neg", "broadcast_to", "reshape", "transpose", "slice_axis",
    "reduce_sum", "reduce_mean", "log", "clip", "sqrt_sum_squares",
    "dense", "einsum2", "conv2d", "conv2d_transpose",
    "leaky_relu", "sigmoid", "softmax", "batch_norm", "squash",
    "cross_entropy_logits", "l2_distance",
    "AdamState", "adam_step", "Adam",
]


class Tensor:
    """N-dimensional value array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (
                np.float32, np.float64) else np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # small operator sugar; heavy lifting stays in the module functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# --------------------------------------------------------------------------
# Tape

_LOCAL = threading.local()


def _tape_stack() -> list:
    if not hasattr(_LOCAL, "stack"):
        _LOCAL.stack = []
    return _LOCAL.stack


@dataclass
class _TapeEntry:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of operations; reverse traversal computes gradients."""

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False


def _active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(op: str, inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None:
        tape.entries.append(_TapeEntry(op, inputs, out, backward))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss.

    The tape's execution order is topological by construction, so a single
    reverse sweep suffices. Gradients accumulate (call zero_grads between
    optimization steps).
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        loss.accumulate_grad(grads[id(loss)])
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        in_grads = entry.backward(g)
        for t, gi in zip(entry.inputs, in_grads):
            if gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.requires_grad:
                t.accumulate_grad(gi)


# --------------------------------------------------------------------------
# Elementwise and structural ops

def _coerce_pair(op, a, b):
    """Return (tensor_inputs, a_arr_or_scalar, b_arr_or_scalar)."""
    a_is_t = isinstance(a, Tensor)
    b_is_t = isinstance(b, Tensor)
    if a_is_t and b_is_t:
        if a.shape != b.shape:
            raise ShapeError(op, a.shape, b.shape)
        return (a, b), a.data, b.data
    if a_is_t:
        return (a,), a.data, float(b)
    if b_is_t:
        return (b,), float(a), b.data
    raise TypeError(f"{op}: at least one operand must be a Tensor")


def add(a, b) -> Tensor:
    inputs, ad, bd = _coerce_pair("add", a, b)
    out = ad + bd
    if len(inputs) == 2:
        bwd = lambda g: (g, g)
    else:
        bwd = lambda g: (g,)
    return _emit("add", inputs, np.asarray(out), bwd)


def sub(a, b) -> Tensor:
    inputs, ad, bd = _coerce_pair("sub", a, b)
    out = ad - bd
    if len(inputs) == 2:
        bwd = lambda g: (g, -g)
    elif isinstance(a, Tensor):
        bwd = lambda g: (g,)
    else:  # scalar - tensor
        bwd = lambda g: (-g,)
    return _emit("sub", inputs, np.asarray(out), bwd)


def mul(a, b) -> Tensor:
    inputs, ad, bd = _coerce_pair("mul", a, b)
    out = ad * bd
    if len(inputs) == 2:
        bwd = lambda g: (g * bd, g * ad)
    elif isinstance(a, Tensor):
        bwd = lambda g: (g * bd,)
    else:
        bwd = lambda g: (g * ad,)
    return _emit("mul", inputs, np.asarray(out), bwd)


def neg(x: Tensor) -> Tensor:
    return _emit("neg", (x,), -x.data, lambda g: (-g,))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Numpy-style broadcast; gradient sums over the expanded axes."""
    shape = tuple(shape)
    xshape = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise ShapeError("broadcast_to", xshape, shape) from e
    lead = len(shape) - len(xshape)

    def bwd(g):
        g2 = g
        for _ in range(lead):
            g2 = g2.sum(axis=0)
        for ax, xs in enumerate(xshape):
            if xs == 1 and shape[lead + ax] != 1:
                g2 = g2.sum(axis=ax, keepdims=True)
        return (g2,)

    return _emit("broadcast_to", (x,), np.ascontiguousarray(out), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size and -1 not in shape:
        raise ShapeError("reshape", x.shape, shape, "element counts differ")
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape),
                 lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
                 lambda g: (g.transpose(inv),))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[idx] = g
        return (dx,)

    return _emit("slice_axis", (x,), np.ascontiguousarray(x.data[idx]), bwd)


def _restore_reduced(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(in_shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)
    return _emit("sum", (x,), np.asarray(out),
                 lambda g: (_restore_reduced(g, in_shape, axis, keepdims).astype(x.dtype, copy=False),))


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = x.shape
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(out.size, 1)

    def bwd(g):
        return (_restore_reduced(g, in_shape, axis, keepdims).astype(x.dtype, copy=False) / count,)

    return _emit("mean", (x,), np.asarray(out), bwd)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log: non-positive input")
    return _emit("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return _emit("clip", (x,), np.clip(x.data, lo, hi),
                 lambda g: (g * mask,))


def sqrt_sum_squares(x: Tensor) -> Tensor:
    """Scalar Euclidean norm of the whole tensor."""
    d = float(np.sqrt(np.sum(x.data.astype(np.float64) ** 2)))
    out = np.asarray(d, dtype=x.dtype)

    def bwd(g):
        if d == 0.0:
            return (np.zeros_like(x.data),)
        return ((g * x.data / d).astype(x.dtype, copy=False),)

    return _emit("sqrt_sum_squares", (x,), out, bwd)


# --------------------------------------------------------------------------
# Linear algebra

def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully connected layer: y = x @ w + b, x is (batch, in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("dense", x.shape, w.shape)
    if b.data.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError("dense", w.shape, b.shape, "bias must match output width")
    out = x.data @ w.data + b.data

    def bwd(g):
        return (g @ w.data.T, x.data.T @ g, g.sum(axis=0))

    return _emit("dense", (x, w, b), out, bwd)


def einsum2(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum contraction.

    Restricted to specs where each operand's indices all appear in the
    other operand or the output (no internal traces), so the gradient of
    either operand is the einsum of the output gradient with the other
    operand under the swapped spec.
    """
    try:
        lhs, out_spec = spec.split("->")
        a_spec, b_spec = lhs.split(",")
    except ValueError as e:
        raise ValueError(f"einsum2: malformed spec {spec!r}") from e
    if (len(set(a_spec)) != len(a_spec) or len(set(b_spec)) != len(b_spec)
            or not set(a_spec) <= set(b_spec) | set(out_spec)
            or not set(b_spec) <= set(a_spec) | set(out_spec)):
        raise ValueError(f"einsum2: unsupported spec {spec!r} (internal trace)")
    out = np.einsum(spec, a.data, b.data, optimize=True)

    def bwd(g):
        ga = np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, b.data, optimize=True)
        gb = np.einsum(f"{a_spec},{out_spec}->{b_spec}", a.data, g, optimize=True)
        return (ga, gb)

    return _emit("einsum2", (a, b), out, bwd)


# --------------------------------------------------------------------------
# Convolutions ('same' coverage; stride 2 halves spatial dims, ceil semantics)

def _same_pads(size: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


def _conv_geometry(h, w, kh, kw, s):
    ho, pt, pb = _same_pads(h, kh, s)
    wo, pl, pr = _same_pads(w, kw, s)
    return ho, wo, (pt, pb), (pl, pr)


def _im2col(x: np.ndarray, kh: int, kw: int, s: int, pads):
    (pt, pb), (pl, pr) = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return cols, (ho, wo, xp.shape[2], xp.shape[3])


def _col2im(dcols, b, c, hp, wp, kh, kw, s, ho, wo, pads):
    dxp = np.zeros((b, c, hp, wp), dtype=dcols.dtype)
    dc = dcols.reshape(b, ho, wo, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dc[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    (pt, pb), (pl, pr) = pads
    return dxp[:, :, pt:hp - pb, pl:wp - pr]


def _conv_fwd(x, w, s):
    b, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho, wo, ph, pw = _conv_geometry(h, wd, kh, kw, s)
    cols, (_, _, hp, wp) = _im2col(x, kh, kw, s, (ph, pw))
    y = (cols @ w.reshape(co, -1).T).reshape(b, ho, wo, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y)


def _conv_gw(g, x, w_shape, s):
    co, ci, kh, kw = w_shape
    b, c, h, wd = x.shape
    ho, wo, ph, pw = _conv_geometry(h, wd, kh, kw, s)
    cols, _ = _im2col(x, kh, kw, s, (ph, pw))
    g_mat = g.transpose(0, 2, 3, 1).reshape(-1, co)
    return (g_mat.T @ cols).reshape(w_shape)


def _conv_gx(g, w, x_shape, s):
    b, c, h, wd = x_shape
    co, ci, kh, kw = w.shape
    ho, wo, ph, pw = _conv_geometry(h, wd, kh, kw, s)
    g_mat = g.transpose(0, 2, 3, 1).reshape(-1, co)
    dcols = g_mat @ w.reshape(co, -1)
    hp = h + ph[0] + ph[1]
    wp = wd + pw[0] + pw[1]
    return _col2im(dcols, b, c, hp, wp, kh, kw, s, ho, wo, (ph, pw))


def _check_stride(op, s):
    if s not in (1, 2):
        raise ValueError(f"{op}: stride must be 1 or 2, got {s}")


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """2-D convolution, NCHW layout, weight (out_ch, in_ch, kh, kw)."""
    _check_stride("conv2d", stride)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b.shape != (w.shape[0],):
        raise ShapeError("conv2d", w.shape, b.shape, "bias must match output channels")
    y = _conv_fwd(x.data, w.data, stride) + b.data[None, :, None, None]
    x_shape, w_shape = x.shape, w.shape

    def bwd(g):
        return (_conv_gx(g, w.data, x_shape, stride),
                _conv_gw(g, x.data, w_shape, stride),
                g.sum(axis=(0, 2, 3)))

    return _emit("conv2d", (x, w, b), y, bwd)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor, stride: int = 2) -> Tensor:
    """Transposed convolution, weight (in_ch, out_ch, kh, kw).

    Spatial dims are multiplied by the stride (adjoint of the 'same'
    stride-s convolution).
    """
    _check_stride("conv2d_transpose", stride)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError("conv2d_transpose", x.shape, w.shape)
    if b.shape != (w.shape[1],):
        raise ShapeError("conv2d_transpose", w.shape, b.shape,
                         "bias must match output channels")
    bsz, ci, h, wd = x.shape
    co = w.shape[1]
    out_shape = (bsz, co, h * stride, wd * stride)
    y = _conv_gx(x.data, w.data, out_shape, stride) + b.data[None, :, None, None]

    def bwd(g):
        return (_conv_fwd(g, w.data, stride),
                _conv_gw(x.data, g, w.shape, stride),
                g.sum(axis=(0, 2, 3)))

    return _emit("conv2d_transpose", (x, w, b), y, bwd)


# --------------------------------------------------------------------------
# Nonlinearities and normalization

def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    mask = x.data > 0
    scale = np.where(mask, 1.0, alpha).astype(x.dtype)
    return _emit("leaky_relu", (x,), x.data * scale, lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _emit("softmax", (x,), y, bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool = False, momentum: float = 0.1,
               eps: float = 1e-5, update_running: bool = False) -> Tensor:
    """Per-channel normalization over axis 1 (population statistics).

    In training mode the batch statistics normalize; running statistics
    are updated only when update_running is set. In evaluation mode the
    stored running statistics are frozen constants.
    """
    nd = x.data.ndim
    if nd not in (2, 4):
        raise ShapeError("batch_norm", x.shape, gamma.shape, "expects 2-D or 4-D input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm", x.shape, gamma.shape)
    axes = (0,) if nd == 2 else (0, 2, 3)
    bshape = (1, c) if nd == 2 else (1, c, 1, 1)

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    m = x.size // c

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dx = (dxhat - dxhat.mean(axis=axes, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            dx *= inv_std.reshape(bshape)
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return (dx.astype(x.dtype, copy=False), dgamma, dbeta)

    return _emit("batch_norm", (x, gamma, beta), y, bwd)


def squash(x: Tensor) -> Tensor:
    """Norm-bounding capsule nonlinearity over the last axis.

    v = s * |s| / (1 + |s|^2); output norm is |s|^2/(1+|s|^2) < 1 and the
    zero vector maps to itself (the limit value).
    """
    sq = np.sum(x.data ** 2, axis=-1, keepdims=True)
    n = np.sqrt(sq)
    scale = n / (1.0 + sq)
    y = x.data * scale

    def bwd(g):
        # d(v)/d(s) = c(n) I + c'(n)/n * s s^T with c(n) = n/(1+n^2)
        nsafe = np.where(n > 0, n, 1.0)
        proj = np.sum(x.data * g, axis=-1, keepdims=True)
        coef = (1.0 - sq) / ((1.0 + sq) ** 2 * nsafe)
        return ((scale * g + coef * proj * x.data).astype(x.dtype, copy=False),)

    return _emit("squash", (x,), y, bwd)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError("cross_entropy_logits", logits.shape, labels.shape)
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"cross_entropy_logits: label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    logp = z - np.log(e.sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def bwd(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _emit("cross_entropy_logits", (logits,), np.asarray(loss, dtype=logits.dtype), bwd)


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Scalar Euclidean distance between two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError("l2_distance", a.shape, b.shape)
    diff = a.data - b.data
    d = float(np.sqrt(np.sum(diff.astype(np.float64) ** 2)))
    out = np.asarray(d, dtype=a.dtype)

    def bwd(g):
        if d == 0.0:
            z = np.zeros_like(a.data)
            return (z, z.copy())
        da = (g * diff / d).astype(a.dtype, copy=False)
        return (da, -da)

    return _emit("l2_distance", (a, b), out, bwd)


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    """First/second moment buffers for one parameter."""
    m: np.ndarray
    v: np.ndarray


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float, t: int, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam update, in place on param. t is 1-based."""
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    if state.m.shape != param.shape:
        raise ShapeError("adam_step", param.shape, state.m.shape)
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    mhat = state.m / (1.0 - beta1 ** t)
    vhat = state.v / (1.0 - beta2 ** t)
    param -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype, copy=False)
    return param


class Adam:
    """Adam over a named parameter dict; state is checkpointable."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"Adam: lr must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state = {name: AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
                      for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.state[name], self.lr, self.t,
                      self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.state.items():
            out[f"adam.m.{name}"] = st.m
            out[f"adam.v.{name}"] = st.v
        out["adam.t"] = np.asarray([float(self.t)], dtype=np.float32)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(round(float(arrays["adam.t"][0])))
        for name, st in self.state.items():
            st.m[...] = arrays[f"adam.m.{name}"]
            st.v[...] = arrays[f"adam.v.{name}"]
