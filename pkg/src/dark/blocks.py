"""Learned building blocks: illumination estimator, SCB, SRCB, SKFF, MMRB."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from dark import ops
from dark.ops import ConvSpec
from dark.tensor import Tensor, default_dtype

__all__ = ["Module", "Conv2d", "IlluminationEstimator", "SCB", "SRCB", "SKFF", "MMRB"]


class Module:
    """Parameter container. Names follow attribute assignment order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + attr, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{attr}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    """Convolution layer with He-normal weights and zero bias."""

    def __init__(self, in_ch, out_ch, kernel_size=1, *, stride=1, padding=None, groups=1,
                 bias=True, rng: np.random.Generator | None = None):
        if padding is None:
            padding = kernel_size // 2
        self.spec = ConvSpec(in_ch, out_ch, kernel_size, kernel_size, stride, padding, groups, bias)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = (in_ch // groups) * kernel_size * kernel_size
        w = rng.standard_normal(self.spec.weight_shape) * np.sqrt(2.0 / fan_in)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.spec)

    def __repr__(self) -> str:
        s = self.spec
        return f"Conv2d({s.in_channels}->{s.out_channels}, k={s.kernel_h}, groups={s.groups})"


class IlluminationEstimator(Module):
    """Predicts a 3-channel light-up map from RGB plus its per-pixel mean."""

    def __init__(self, n_fea_middle: int = 40, n_fea_in: int = 3, n_fea_out: int = 3, rng=None):
        self.n_fea_in = n_fea_in
        self.conv1 = Conv2d(n_fea_in + 1, n_fea_middle, 1, rng=rng)
        self.depth_conv = Conv2d(n_fea_middle, n_fea_middle, 5, padding=2, groups=n_fea_middle, rng=rng)
        self.conv2 = Conv2d(n_fea_middle, n_fea_out, 1, rng=rng)

    def forward(self, img: Tensor) -> tuple[Tensor, Tensor]:
        if img.shape[1] != self.n_fea_in:
            raise ValueError(f"illumination estimator expects {self.n_fea_in} channels, got {img.shape[1]}")
        x = ops.concat_channels([img, ops.channel_mean(img)])
        illu_fea = self.depth_conv(self.conv1(x))
        illu_map = self.conv2(illu_fea)
        return illu_fea, illu_map


class SCB(Module):
    """Simplified context block: softmax spatial pooling, broadcast-added back."""

    def __init__(self, channels: int, rng=None):
        self.channels = channels
        self.mask_conv = Conv2d(channels, 1, 1, rng=rng)

    def context_weights(self, x: Tensor) -> Tensor:
        return ops.softmax_axis(self.mask_conv(x), "spatial")

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"SCB expects {self.channels} channels, got {x.shape[1]}")
        weights = self.context_weights(x)
        context = ops.sum_spatial(ops.mul(x, weights))
        return ops.add(x, context)


class SRCB(Module):
    """3x3 conv -> SCB, wrapped in a residual connection."""

    def __init__(self, channels: int, rng=None):
        self.channels = channels
        self.body_conv = Conv2d(channels, channels, 3, rng=rng)
        self.scb = SCB(channels, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"SRCB expects {self.channels} channels, got {x.shape[1]}")
        return ops.add(x, self.scb(self.body_conv(x)))


class SKFF(Module):
    """Selective kernel fusion of same-shape streams via channel attention."""

    def __init__(self, channels: int, num_streams: int = 2, reduction: int = 8, rng=None):
        if num_streams < 2:
            raise ValueError(f"SKFF needs at least 2 streams, got {num_streams}")
        self.channels = channels
        self.num_streams = num_streams
        d = max(channels // reduction, 4)
        self.reduce_conv = Conv2d(channels, d, 1, rng=rng)
        self.expand_convs = [Conv2d(d, channels, 1, rng=rng) for _ in range(num_streams)]

    def attention(self, streams: Sequence[Tensor]) -> list[Tensor]:
        self._check(streams)
        feats_u = streams[0]
        for s in streams[1:]:
            feats_u = ops.add(feats_u, s)
        z = ops.relu(self.reduce_conv(ops.global_avg_pool(feats_u)))
        logits = ops.concat_channels([conv(z) for conv in self.expand_convs])
        att = ops.softmax_axis(logits, "scale", num_scales=self.num_streams)
        c = self.channels
        return [ops.slice_channels(att, i * c, (i + 1) * c) for i in range(self.num_streams)]

    def forward(self, streams: Sequence[Tensor]) -> Tensor:
        att = self.attention(streams)
        out = ops.mul(att[0], streams[0])
        for a, s in zip(att[1:], streams[1:]):
            out = ops.add(out, ops.mul(a, s))
        return out

    def _check(self, streams):
        if len(streams) != self.num_streams:
            raise ValueError(f"SKFF configured for {self.num_streams} streams, got {len(streams)}")
        ref = streams[0].shape
        if ref[1] != self.channels:
            raise ValueError(f"SKFF expects {self.channels} channels, got {ref[1]}")
        for s in streams[1:]:
            if s.shape != ref:
                raise ValueError(f"SKFF streams must share a shape: {ref} vs {s.shape}")


def half_extent(n: int) -> int:
    return (n + 1) // 2


class MMRB(Module):
    """Full- and half-resolution SRCB streams fused by SKFF, plus a residual."""

    def __init__(self, channels: int, chan_factor: float = 1.5, n_srcb: int = 2, rng=None):
        self.channels = channels
        low_ch = int(round(channels * chan_factor))
        self.stream0 = [SRCB(channels, rng=rng) for _ in range(n_srcb)]
        self.down_proj = Conv2d(channels, low_ch, 1, rng=rng)
        self.stream1 = [SRCB(low_ch, rng=rng) for _ in range(n_srcb)]
        self.up_proj = Conv2d(low_ch, channels, 1, rng=rng)
        self.skff = SKFF(channels, 2, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if h < 2 or w < 2:
            raise ValueError(f"MMRB needs spatial extents >= 2, got {h}x{w}")
        s0 = x
        for blk in self.stream0:
            s0 = blk(s0)
        s1 = self.down_proj(ops.resample_bilinear(x, half_extent(h), half_extent(w)))
        for blk in self.stream1:
            s1 = blk(s1)
        s1 = self.up_proj(ops.resample_bilinear(s1, h, w))
        return ops.add(x, self.skff([s0, s1]))


def zero_parameters(module: Module) -> None:
    for p in module.parameters():
        p.data[...] = 0


def cast_parameters(module: Module, dtype=None) -> None:
    dtype = np.dtype(dtype) if dtype is not None else default_dtype()
    for p in module.parameters():
        p.data = p.data.astype(dtype)
