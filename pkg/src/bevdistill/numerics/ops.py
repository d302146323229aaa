"""Differentiable operators over :class:`Tensor`.

Spatial operators take ``[C, H, W]`` or batched ``[N, C, H, W]`` inputs; the
batch axis is treated as independent samples everywhere (batchnorm included).
Binary elementwise ops broadcast numpy-style so scalars and per-channel
parameters can be combined with feature maps.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, Tensor, as_tensor, make_node

ArrayLike = Union[Tensor, np.ndarray, float, int]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bw)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bw)


def power(x: ArrayLike, p: float) -> Tensor:
    x = as_tensor(x)
    p = float(p)
    out = np.power(x.data, p)

    def bw(g):
        if p == 0.0:
            return (np.zeros_like(x.data),)
        if p == 1.0:
            return (g,)
        return (g * p * np.power(x.data, p - 1.0),)

    return make_node(out, (x,), bw)


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def log(x: ArrayLike, floor: Optional[float] = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clamped from below first."""
    x = as_tensor(x)
    if floor is None:
        out = np.log(x.data)
        return make_node(out, (x,), lambda g: (g / x.data,))
    arg = np.maximum(x.data, floor)
    out = np.log(arg)
    live = x.data >= floor
    return make_node(out, (x,), lambda g: (np.where(live, g / arg, 0.0),))


def abs(x: ArrayLike) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = np.abs(x.data)
    return make_node(out, (x,), lambda g: (g * np.sign(x.data),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x: ArrayLike) -> Tensor:
    """log(sigmoid(x)) computed without cancellation."""
    x = as_tensor(x)
    v = x.data
    out = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))
    s = _sigmoid(v)
    return make_node(out, (x,), lambda g: (g * (1.0 - s),))


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    live = x.data > 0
    out = np.where(live, x.data, 0.0)
    return make_node(out, (x,), lambda g: (g * live,))


def clamp_min(x: ArrayLike, lo: float) -> Tensor:
    x = as_tensor(x)
    live = x.data >= lo
    out = np.where(live, x.data, lo)
    return make_node(out, (x,), lambda g: (g * live,))


def smooth_l1(x: ArrayLike, delta: float = 1.0) -> Tensor:
    """Elementwise Huber-style penalty: 0.5 x^2 / delta inside |x| < delta, |x| - delta/2 outside."""
    x = as_tensor(x)
    v = x.data
    inner = np.abs(v) < delta
    out = np.where(inner, 0.5 * v * v / delta, np.abs(v) - 0.5 * delta)
    return make_node(out, (x,), lambda g: (g * np.where(inner, v / delta, np.sign(v)),))


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def sum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(out, (x,), bw)


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max(x: ArrayLike, axis: int) -> Tensor:  # noqa: A001
    """Max along one axis; the gradient goes to the first maximising entry."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return make_node(out, (x,), bw)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: ArrayLike, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return make_node(out, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: ArrayLike, key) -> Tensor:
    """Basic (slice/int) indexing; advanced indexing is not supported."""
    x = as_tensor(x)
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return make_node(np.array(out), (x,), bw)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes (same leading shape)."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bw)


def channel_norm(x: ArrayLike) -> Tensor:
    """L2 norm of the channel vector at every spatial cell: ``[.., C, H, W] -> [.., H, W]``.

    The subgradient at a zero vector is taken as zero.
    """
    x = as_tensor(x)
    out = np.sqrt(np.sum(x.data * x.data, axis=-3))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (x.data * np.expand_dims(scale, -3),)

    return make_node(out, (x,), bw)


# ---------------------------------------------------------------------------
# spatial
# ---------------------------------------------------------------------------

def _as4d(t: Tensor) -> Tuple[Tensor, bool]:
    if t.ndim == 3:
        return reshape(t, (1,) + t.shape), True
    if t.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [N,C,H,W], got shape {t.shape}")
    return t, False


def _strip(t: Tensor, squeezed: bool) -> Tensor:
    return reshape(t, t.shape[1:]) if squeezed else t


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Hp, Wp) -> (N, C*k*k, ho*wo)
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # win: (N, C, ho, wo, k, k)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


class _FlatShift:
    """Stride-1 convolution as k*k shifted matmuls over a flattened padded image.

    Every sample is zero-padded and laid out row-major in one ``[C, L]`` buffer,
    so the input window of tap ``(di, dj)`` is the contiguous column range
    starting at ``di*Wp + dj``. Output columns that straddle a row or sample
    boundary are garbage and get cropped; their gradient is zero.
    """

    def __init__(self, n, c, h, w, k, padding):
        self.n, self.c, self.h, self.w, self.k, self.p = n, c, h, w, k, padding
        self.hp, self.wp = h + 2 * padding, w + 2 * padding
        self.ho, self.wo = self.hp - k + 1, self.wp - k + 1
        self.L = n * self.hp * self.wp
        self.ext = (k - 1) * self.wp + (k - 1)
        self.offsets = [(di, dj, di * self.wp + dj) for di in range(k) for dj in range(k)]

    def _grid(self, buf, rows):
        return buf[:, :self.L].reshape(rows, self.n, self.hp, self.wp)

    def pack(self, x):
        X = np.zeros((self.c, self.L + self.ext))
        p = self.p
        self._grid(X, self.c)[:, :, p:p + self.h, p:p + self.w] = x.transpose(1, 0, 2, 3)
        return X

    def forward(self, X, taps):
        c_out = taps.shape[2]
        out = np.zeros((c_out, self.L))
        tmp = np.empty_like(out)
        for di, dj, off in self.offsets:
            np.matmul(taps[di, dj], X[:, off:off + self.L], out=tmp)
            out += tmp
        y = out.reshape(c_out, self.n, self.hp, self.wp)[:, :, :self.ho, :self.wo]
        return np.ascontiguousarray(y.transpose(1, 0, 2, 3))

    def pack_grad(self, g):
        c_out = g.shape[1]
        G = np.zeros((c_out, self.L))
        G.reshape(c_out, self.n, self.hp, self.wp)[:, :, :self.ho, :self.wo] = g.transpose(1, 0, 2, 3)
        return G

    def grad_kernel(self, G, X):
        c_out = G.shape[0]
        gk = np.empty((c_out, self.c, self.k, self.k))
        for di, dj, off in self.offsets:
            gk[:, :, di, dj] = G @ X[:, off:off + self.L].T
        return gk

    def grad_input(self, G, taps):
        gX = np.zeros((self.c, self.L + self.ext))
        for di, dj, off in self.offsets:
            gX[:, off:off + self.L] += taps[di, dj].T @ G
        p = self.p
        gx = self._grid(gX, self.c)[:, :, p:p + self.h, p:p + self.w]
        return np.ascontiguousarray(gx.transpose(1, 0, 2, 3))


def conv2d(
    x: ArrayLike,
    kernel: ArrayLike,
    bias: Optional[ArrayLike] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2D cross-correlation with zero padding."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"kernel must be [C_out, C_in, k, k], got {kernel.shape}")
    c_out, c_in, k, _ = kernel.shape
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    x4, squeezed = _as4d(x)
    n, c, h, w = x4.shape
    if c != c_in:
        raise ValueError(
            f"conv2d channel mismatch: input has {c} channels, kernel expects {c_in} "
            f"(input shape {x.shape}, kernel shape {kernel.shape})"
        )
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty for input {x.shape} and kernel {kernel.shape}")
    if bias is not None:
        bias = as_tensor(bias)
    parents = (x4, kernel) if bias is None else (x4, kernel, bias)
    if stride == 1:
        plan = _FlatShift(n, c, h, w, k, padding)
        X = plan.pack(x4.data)
        taps = np.ascontiguousarray(kernel.data.transpose(2, 3, 0, 1))
        out = plan.forward(X, taps)
        if bias is not None:
            out += bias.data.reshape(1, c_out, 1, 1)

        def bw(g):
            G = plan.pack_grad(g)
            gx = plan.grad_input(G, taps) if x4.requires_grad else None
            gk = plan.grad_kernel(G, X) if kernel.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
            return [gx, gk] if bias is None else [gx, gk, gb]

        return _strip(make_node(out, parents, bw), squeezed)

    xp = np.pad(x4.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x4.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = kernel.data.reshape(c_out, -1)
    out = wmat @ cols
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1)
    out = out.reshape(n, c_out, ho, wo)

    def bw_strided(g):
        g2 = g.reshape(n, c_out, ho * wo)
        gk = None
        if kernel.requires_grad:
            gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gx = None
        if x4.requires_grad:
            gcols = (wmat.T @ g2).reshape(n, c, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride] += gcols[:, :, di, dj]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2)) if bias.requires_grad else None)
        return grads

    return _strip(make_node(out, parents, bw_strided), squeezed)


def batchnorm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalisation over spatial cells, then affine.

    ``gamma`` and ``beta`` are ``[C]`` vectors.
    """
    if eps <= 0:
        raise ValueError("batchnorm eps must be positive")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    x4, squeezed = _as4d(x)
    n, c, h, w = x4.shape
    m = h * w
    mu = x4.data.mean(axis=(2, 3), keepdims=True)
    xc = x4.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm = gamma.data.reshape(1, c, 1, 1)
    out = gm * xhat + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x4.requires_grad:
            gh = g * gm
            gx = (inv / m) * (m * gh - gh.sum(axis=(2, 3), keepdims=True)
                              - xhat * (gh * xhat).sum(axis=(2, 3), keepdims=True))
        return gx, ggamma, gbeta

    return _strip(make_node(out, (x4, gamma, beta), bw), squeezed)


def concat_channels(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Stack along the channel axis (third from last), ``a`` first."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"concat_channels shape mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[-3]
    out = np.concatenate([a.data, b.data], axis=-3)
    return make_node(out, (a, b), lambda g: (g[..., :ca, :, :], g[..., ca:, :, :]))


def avgpool2x(x: ArrayLike) -> Tensor:
    """Mean over non-overlapping 2x2 blocks."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2x needs even spatial size, got {h}x{w}")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))

    def bw(g):
        g4 = np.broadcast_to(g[..., :, None, :, None] * 0.25, lead + (h // 2, 2, w // 2, 2))
        return (g4.reshape(x.shape).copy(),)

    return make_node(out, (x,), bw)
