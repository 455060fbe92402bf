"""Small dense tensor engine with reverse-mode differentiation.

Only the kernels the change-detection network needs are provided. Arrays are
laid out N, C, H, W (row-major). There is no general broadcasting: binary ops
take operands of identical shape, or a Python scalar.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "conv2d",
    "batch_norm",
    "BatchNormState",
    "relu",
    "sigmoid",
    "softmax",
    "log",
    "sqrt",
    "clip",
    "global_avg_pool",
    "fully_connected",
    "channel_scale",
    "mix_kernels",
    "concat",
    "tsum",
    "tmean",
    "reshape",
]

_GRAD_ENABLED = True
# the flat path wins on wide inputs; tiny maps are faster through im2col
_FLAT_MIN_CHANNELS = 8
_FLAT_MIN_PIXELS = 100


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff.

    Parameters
    ----------
    data : array_like
        Values. Copied into a contiguous array of ``dtype``.
    requires_grad : bool
        Leaf tensors with ``requires_grad=True`` accumulate ``.grad`` on
        :func:`backward`.
    dtype : numpy dtype, optional
        Defaults to the dtype of ``data`` when it is floating point, otherwise
        float64.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64
        # ascontiguousarray promotes 0-d input to 1-d; restore the shape
        self.data = np.ascontiguousarray(arr, dtype=dtype).reshape(arr.shape)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return _add(_neg(self), other)

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return _mul(self, 1.0 / other)

    def __getitem__(self, key):
        return _getitem(self, key)


def _make(out: np.ndarray, parents: Iterable[Tensor], grad_fn) -> Tensor:
    parents = tuple(parents)
    t = Tensor(out, dtype=out.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = grad_fn
    return t



def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Calling it twice without clearing grads adds the gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad=True")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# elementwise ----------------------------------------------------------------

def _add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        if np.ndim(b) != 0:
            raise TypeError("only scalars or Tensors can be added to a Tensor")
        return _make(a.data + a.dtype.type(b), (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def _neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def _mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim != 0 and c.shape != a.shape:
            raise ValueError(f"mul: constant of shape {c.shape} does not match {a.shape}")
        return _make(a.data * c, (a,), lambda g: (g * c,))
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def _getitem(a: Tensor, key) -> Tensor:
    parts = key if isinstance(key, tuple) else (key,)
    if not all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis for k in parts):
        raise IndexError("only basic (slice/integer) indexing is supported")
    out = np.asarray(a.data[key])

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), grad_fn)


def log(x: Tensor) -> Tensor:
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,))


def sqrt(x: Tensor) -> Tensor:
    """Square root. The gradient at exactly 0 is taken as 0 (subgradient)."""
    s = np.sqrt(x.data)

    def grad_fn(g):
        safe = np.where(s > 0, s, 1)
        return (np.where(s > 0, g / (2 * safe), 0).astype(x.dtype),)

    return _make(s, (x,), grad_fn)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return _make(np.clip(d, lo, hi), (x,), lambda g: (g * inside,))


# reductions and shape -------------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis)

    def grad_fn(g):
        if axis is None:
            return (np.full(shape, g, dtype=x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), grad_fn)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


# network kernels ------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over an N, C, H, W input.

    ``weight`` has shape (C_out, C_in // groups, kh, kw); padding is
    symmetric zero padding. Output spatial size is
    ``(H + 2 * pad - kh) // stride + 1``.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D (N,C,H,W), got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-D, got shape {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups:
        raise ValueError(f"conv2d: C_in={c} is not divisible by groups={groups}")
    if o % groups:
        raise ValueError(f"conv2d: C_out={o} is not divisible by groups={groups}")
    if cg * groups != c:
        raise ValueError(f"conv2d: kernel C_in dimension {cg} != C_in/groups = {c // groups}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias C_out dimension {bias.shape} != ({o},)")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ValueError(f"conv2d: kernel H/W {kh}x{kw} larger than padded input "
                         f"{h + 2 * pad}x{w + 2 * pad}")
    if stride == 1 and cg >= _FLAT_MIN_CHANNELS and h * w >= _FLAT_MIN_PIXELS:
        out, grad_fn = _conv_flat(x, weight, pad, groups)
    else:
        out, grad_fn = _conv_im2col(x, weight, stride, pad, groups)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def full_grad(g):
        gx, gw = grad_fn(g)
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, full_grad)


def _conv_flat(x: Tensor, weight: Tensor, pad: int, groups: int):
    # Stride-1 convolution on the flattened padded batch, laid out as
    # (group, channel, sample * Hp * Wp). Kernel tap (i, j) is then a single
    # contiguous slice at offset i * Wp + j, so each tap is one matmul with
    # no im2col copy. Columns that fall outside the valid output are dropped.
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    og = o // groups
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = hp - kh + 1, wp - kw + 1
    span = n * hp * wp
    tail = (kh - 1) * wp + kw - 1
    xp = np.zeros((groups, cg, span + tail), dtype=x.dtype)
    xp[..., :span].reshape(groups, cg, n, hp, wp)[..., pad:pad + h, pad:pad + w] = (
        x.data.reshape(n, groups, cg, h, w).transpose(1, 2, 0, 3, 4))
    wt = np.ascontiguousarray(weight.data.reshape(groups, og, cg, kh, kw).transpose(3, 4, 0, 1, 2))
    acc = np.zeros((groups, og, span), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            acc += np.matmul(wt[i, j], xp[..., off:off + span])
    out = np.ascontiguousarray(
        acc.reshape(groups, og, n, hp, wp)[..., :ho, :wo].transpose(2, 0, 1, 3, 4)).reshape(n, o, ho, wo)

    def grad_fn(g):
        gp = np.zeros((groups, og, n, hp, wp), dtype=x.dtype)
        gp[..., :ho, :wo] = g.reshape(n, groups, og, ho, wo).transpose(1, 2, 0, 3, 4)
        gp = gp.reshape(groups, og, span)
        gw = gx = None
        if weight.requires_grad:
            gwt = np.empty_like(wt)
            for i in range(kh):
                for j in range(kw):
                    off = i * wp + j
                    gwt[i, j] = np.matmul(gp, xp[..., off:off + span].swapaxes(-1, -2))
            gw = gwt.transpose(2, 3, 4, 0, 1).reshape(weight.shape)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            wtt = np.ascontiguousarray(wt.swapaxes(-1, -2))
            for i in range(kh):
                for j in range(kw):
                    off = i * wp + j
                    dxp[..., off:off + span] += np.matmul(wtt[i, j], gp)
            gx = (dxp[..., :span].reshape(groups, cg, n, hp, wp)[..., pad:pad + h, pad:pad + w]
                  .transpose(2, 0, 1, 3, 4).reshape(n, c, h, w))
        return gx, gw

    return out, grad_fn


def _conv_im2col(x: Tensor, weight: Tensor, stride: int, pad: int, groups: int):
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    og = o // groups
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    kk = cg * kh * kw
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, groups, kk, ho * wo)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = (win.reshape(n, groups, cg, ho, wo, kh, kw)
                .transpose(0, 1, 2, 5, 6, 3, 4)
                .reshape(n, groups, kk, ho * wo))
    cols = np.ascontiguousarray(cols)
    wk = weight.data.reshape(groups, og, kk)
    out = np.matmul(wk, cols).reshape(n, o, ho, wo)

    def grad_fn(g):
        gg = g.reshape(n, groups, og, ho * wo)
        gw = gx = None
        if weight.requires_grad:
            gw = np.matmul(gg, cols.swapaxes(-1, -2)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            dcols = np.matmul(wk.swapaxes(-1, -2), gg).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return gx, gw

    return out, grad_fn


class BatchNormState:
    """Running mean/variance buffers for one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization of an N, C, H, W tensor.

    In training mode the batch statistics are used and the running buffers
    become ``momentum * running + (1 - momentum) * batch``. Eval mode uses
    the running buffers and is not differentiated through the statistics.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: gamma/beta must have shape ({c},)")
    m = n * h * w
    shape = (1, c, 1, 1)
    if training:
        if m < 2:
            raise ValueError(f"batch_norm: N*H*W = {m} < 2 in training mode (variance undefined)")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean[...] = momentum * state.running_mean + (1 - momentum) * mean
        state.running_var[...] = momentum * state.running_var + (1 - momentum) * var * (m / (m - 1))
    else:
        mean, var = state.running_mean, state.running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shape).astype(x.dtype)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def grad_fn(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (inv.reshape(shape) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
            )
        else:
            gx = dxhat * inv.reshape(shape)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H, W: (N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    scale = x.dtype.type(1.0 / (h * w))
    return _make(out, (x,), lambda g: (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map x @ weight.T + bias with weight of shape (D_out, D)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"fully_connected: bias {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn)


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each (n, c) feature map of ``x`` by the scalar ``s[n, c]``."""
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise ValueError(f"channel_scale: scales {s.shape} do not match maps {x.shape}")
    sd = s.data[:, :, None, None]
    return _make(x.data * sd, (x, s), lambda g: (g * sd, (g * x.data).sum(axis=(2, 3))))


def mix_kernels(alpha: Tensor, experts: Tensor) -> Tensor:
    """Per-sample linear mixture sum_i alpha[n, i] * experts[i] -> (N, *expert_shape)."""
    if alpha.ndim != 2 or alpha.shape[1] != experts.shape[0]:
        raise ValueError(f"mix_kernels: alpha {alpha.shape} vs experts {experts.shape}")
    k = experts.shape[0]
    flat = experts.data.reshape(k, -1)
    out = (alpha.data @ flat).reshape((alpha.shape[0],) + experts.shape[1:])

    def grad_fn(g):
        gf = g.reshape(alpha.shape[0], -1)
        return gf @ flat.T, (alpha.data.T @ gf).reshape(experts.shape)

    return _make(out, (alpha, experts), grad_fn)
