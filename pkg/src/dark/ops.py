"""Differentiable primitives over (N, C, H, W) tensors.

Every function takes and returns :class:`~dark.tensor.Tensor` and registers a
backward rule on the active tape. Kernels are numpy; convolution goes through
an im2col matmul, with direct paths for 1x1 and depthwise cases.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from dark.tensor import Tensor, record

__all__ = [
    "ConvSpec",
    "conv2d",
    "softmax_axis",
    "global_avg_pool",
    "resample_bilinear",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "channel_mean",
    "concat_channels",
    "slice_channels",
    "reduce_mean",
    "reduce_sum",
    "sum_spatial",
    "relu",
    "abs_",
    "square",
    "sqrt",
    "log10",
    "clamp_min",
    "elementwise",
]


# ---------------------------------------------------------------- convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"ConvSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec.padding must be >= 0, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(
                f"input {h}x{w} too small for kernel {self.kernel_h}x{self.kernel_w} with padding {self.padding}"
            )
        return ho, wo


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out


def _conv_dense(xp, w, s, ho, wo):
    """groups == 1 forward. Returns (out, backward(g) -> (dxp, dw))."""
    n = xp.shape[0]
    o, c, kh, kw = w.shape
    if kh == kw == 1 and s == 1:
        x3 = xp.reshape(n, c, -1)
        w2 = w.reshape(o, c)
        out = np.matmul(w2, x3).reshape(n, o, ho, wo)

        def grads(g):
            g3 = g.reshape(n, o, -1)
            dw = np.tensordot(g3, x3, axes=([0, 2], [0, 2])).reshape(w.shape)
            dx = np.matmul(w2.T, g3).reshape(xp.shape)
            return dx, dw

        return out, grads

    w2 = w.reshape(o, -1)
    cols = _im2col(xp, kh, kw, s, ho, wo)
    out = (w2 @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    del cols

    def grads(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        cols = _im2col(xp, kh, kw, s, ho, wo)
        dw = (g2 @ cols.T).reshape(w.shape)
        del cols
        dx = _col2im(w2.T @ g2, xp.shape, kh, kw, s, ho, wo)
        return dx, dw

    return np.ascontiguousarray(out), grads


def _conv_depthwise(xp, w, s, ho, wo):
    """groups == C_in == C_out: each channel filtered by its own kernel."""
    c, _, kh, kw = w.shape
    out = np.zeros((xp.shape[0], c, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += w[None, :, 0, i, j, None, None] * xp[:, :, i : i + s * ho : s, j : j + s * wo : s]

    def grads(g):
        dx = np.zeros_like(xp)
        dw = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                win = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
                dw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, win)
                dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += w[None, :, 0, i, j, None, None] * g
        return dx, dw

    return out, grads


def _conv_grouped(xp, w, s, ho, wo, groups):
    cin = xp.shape[1] // groups
    cout = w.shape[0] // groups
    outs, fns = [], []
    for gi in range(groups):
        o, fn = _conv_dense(xp[:, gi * cin : (gi + 1) * cin], w[gi * cout : (gi + 1) * cout], s, ho, wo)
        outs.append(o)
        fns.append(fn)
    out = np.concatenate(outs, axis=1)

    def grads(g):
        dx = np.empty_like(xp)
        dw = np.empty_like(w)
        for gi, fn in enumerate(fns):
            dxi, dwi = fn(np.ascontiguousarray(g[:, gi * cout : (gi + 1) * cout]))
            dx[:, gi * cin : (gi + 1) * cin] = dxi
            dw[gi * cout : (gi + 1) * cout] = dwi
        return dx, dw

    return out, grads


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Zero-padded 2-D cross-correlation, optionally grouped."""
    n, c, h, w_ = x.shape
    if c != spec.in_channels:
        raise ValueError(f"conv2d: input has {c} channels, spec expects in_channels={spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ValueError(f"conv2d: weight shape {weight.shape} != expected {spec.weight_shape}")
    if spec.has_bias:
        if bias is None or bias.shape != (1, spec.out_channels, 1, 1):
            got = None if bias is None else bias.shape
            raise ValueError(f"conv2d: bias shape {got} != expected (1, {spec.out_channels}, 1, 1)")
    elif bias is not None:
        raise ValueError("conv2d: bias given but spec.has_bias is False")

    ho, wo = spec.output_hw(h, w_)
    p, s = spec.padding, spec.stride
    xp = _pad(x.data, p)
    wd = weight.data
    if spec.groups == 1:
        out, fn = _conv_dense(xp, wd, s, ho, wo)
    elif spec.groups == c == spec.out_channels:
        out, fn = _conv_depthwise(xp, wd, s, ho, wo)
    else:
        out, fn = _conv_grouped(xp, wd, s, ho, wo, spec.groups)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        dxp, dw = fn(g)
        dx = dxp[:, :, p : p + h, p : p + w_] if p else dxp
        db = g.sum(axis=(0, 2, 3), keepdims=True) if bias is not None else None
        return np.ascontiguousarray(dx), dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", inputs, out, backward)


# -------------------------------------------------------------------- softmax

SoftmaxAxis = Literal["spatial", "channel", "scale"]


def softmax_axis(x: Tensor, axis: SoftmaxAxis, num_scales: int | None = None) -> Tensor:
    """Max-stabilised softmax.

    ``spatial`` normalises over the flattened H*W positions of each (n, c);
    ``channel`` over C; ``scale`` treats the channel axis as ``num_scales``
    stacked groups of equal width and normalises across the groups.
    """
    n, c, h, w = x.shape
    if axis == "spatial":
        view, ax = x.data.reshape(n, c, h * w), 2
    elif axis == "channel":
        view, ax = x.data, 1
    elif axis == "scale":
        if not num_scales or c % num_scales:
            raise ValueError(f"softmax over scales: {c} channels not divisible by num_scales={num_scales}")
        view, ax = x.data.reshape(n, num_scales, c // num_scales, h, w), 1
    else:
        raise ValueError(f"unknown softmax axis {axis!r}")
    if view.shape[ax] < 1 or view.size == 0:
        raise ValueError(f"softmax over an empty {axis} axis")

    e = np.exp(view - view.max(axis=ax, keepdims=True))
    y = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        gv = g.reshape(y.shape)
        dx = y * (gv - (gv * y).sum(axis=ax, keepdims=True))
        return (dx.reshape(x.shape),)

    return record("softmax", (x,), y.reshape(x.shape), backward)


# ------------------------------------------------------------------- pooling


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError(f"global_avg_pool needs non-empty spatial extents, got {h}x{w}")
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)

    return record("global_avg_pool", (x,), out, backward)


def sum_spatial(x: Tensor) -> Tensor:
    out = x.data.sum(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum_spatial", (x,), out, backward)


# ----------------------------------------------------------------- resampling


@functools.lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int, dtype_str: str) -> np.ndarray:
    """Row i holds the linear weights that produce output sample i.

    Half-pixel centres: source coordinate (i + 0.5) * n_in / n_out - 0.5,
    clamped to the valid range, so every row sums to one.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale_ = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale_ - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m = m.astype(dtype_str)
    m.setflags(write=False)
    return m


def resample_bilinear(x: Tensor, target_h: int, target_w: int) -> Tensor:
    if target_h < 1 or target_w < 1:
        raise ValueError(f"resample target must be at least 1x1, got {target_h}x{target_w}")
    n, c, h, w = x.shape
    if (h, w) == (target_h, target_w):
        return x
    ah = _interp_matrix(h, target_h, x.dtype.str)
    aw = _interp_matrix(w, target_w, x.dtype.str)
    out = np.matmul(ah, np.matmul(x.data, aw.T))

    def backward(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return record("resample_bilinear", (x,), out, backward)


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return record("sub", (a, b), a.data - b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", (a, b), a.data * b.data, backward)


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.dtype.type(factor)
    return record("scale", (x,), x.data * f, lambda g: (g * f,))


def add_scalar(x: Tensor, value: float) -> Tensor:
    v = x.dtype.type(value)
    return record("add_scalar", (x,), x.data + v, lambda g: (g,))


def channel_mean(x: Tensor) -> Tensor:
    """Per-pixel mean over channels, shape (N, 1, H, W)."""
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / c, x.shape).astype(x.dtype),)

    return record("channel_mean", (x,), out, backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return record("concat_channels", tuple(tensors), out, backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ValueError(f"slice_channels: [{start}, {stop}) out of range for {c} channels")

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return record("slice_channels", (x,), x.data[:, start:stop], backward)


def reduce_mean(x: Tensor) -> Tensor:
    """Mean of every element, as a (1, 1, 1, 1) tensor."""
    out = np.asarray(x.data.mean(dtype=x.dtype), dtype=x.dtype).reshape(1, 1, 1, 1)
    n = x.size

    def backward(g):
        return (np.full(x.shape, g.reshape(()) / n, dtype=x.dtype),)

    return record("reduce_mean", (x,), out, backward)


def reduce_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=x.dtype), dtype=x.dtype).reshape(1, 1, 1, 1)

    def backward(g):
        return (np.full(x.shape, g.reshape(()), dtype=x.dtype),)

    return record("reduce_sum", (x,), out, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return record("abs", (x,), np.abs(x.data), lambda g: (g * sign,))


def square(x: Tensor) -> Tensor:
    return record("square", (x,), x.data * x.data, lambda g: (2 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return record("sqrt", (x,), y, lambda g: (g / (2 * y),))


def log10(x: Tensor) -> Tensor:
    inv = x.dtype.type(1.0 / np.log(10.0))
    return record("log10", (x,), np.log10(x.data), lambda g: (g * inv / x.data,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.data >= floor
    out = np.maximum(x.data, x.dtype.type(floor))
    return record("clamp_min", (x,), out, lambda g: (g * keep,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "channel_mean": channel_mean,
    "concat_channels": lambda *ts: concat_channels(ts),
    "reduce_mean": reduce_mean,
}


def elementwise(op: str, *operands):
    """Dispatch by name, e.g. ``elementwise("scale", x, 0.5)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; choose from {sorted(_ELEMENTWISE)}") from None
    return fn(*operands)
