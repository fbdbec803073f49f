"""Pixel losses with optional element-wise weights, and the PSNR loss."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Literal

import numpy as np

from dark import ops
from dark.metrics import PSNR_CEILING_DB
from dark.tensor import Tensor

__all__ = ["LossSpec", "pixel_loss", "psnr_loss", "weighted_loss", "to_luminance", "PSNR_CEILING_DB"]

# 10 * log10(MSE_FLOOR) == -PSNR_CEILING_DB for unit dynamic range
_MSE_FLOOR = 10.0 ** (-PSNR_CEILING_DB / 10.0)

LossKind = Literal["l1", "mse", "charbonnier", "psnr"]
Reduction = Literal["mean", "sum", "none"]


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = "charbonnier"
    loss_weight: float = 1.0
    reduction: Reduction = "mean"
    charbonnier_eps: float = 1e-3
    psnr_to_luminance: bool = False

    def __post_init__(self):
        if self.kind not in ("l1", "mse", "charbonnier", "psnr"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.reduction not in ("mean", "sum", "none"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.charbonnier_eps <= 0:
            raise ValueError(f"charbonnier_eps must be > 0, got {self.charbonnier_eps}")
        if self.loss_weight < 0:
            raise ValueError(f"loss_weight must be >= 0, got {self.loss_weight}")


def _reduce(x: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return ops.reduce_mean(x)
    if reduction == "sum":
        return ops.reduce_sum(x)
    return x


def weighted_loss(fn):
    """Turn an element-wise loss ``fn(pred, target, **kw)`` into one that
    accepts ``weight=`` and ``reduction=``.

    The weight multiplies per-element losses before reduction.
    """

    @functools.wraps(fn)
    def wrapper(pred: Tensor, target: Tensor, weight: Tensor | None = None, reduction: str = "mean", **kwargs):
        if pred.shape != target.shape:
            raise ValueError(f"{fn.__name__}: pred shape {pred.shape} != target shape {target.shape}")
        loss = fn(pred, target, **kwargs)
        if weight is not None:
            loss = ops.mul(loss, weight)
        return _reduce(loss, reduction)

    return wrapper


@weighted_loss
def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    return ops.abs_(ops.sub(pred, target))


@weighted_loss
def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    return ops.square(ops.sub(pred, target))


@weighted_loss
def charbonnier_loss(pred: Tensor, target: Tensor, eps: float = 1e-3) -> Tensor:
    if eps <= 0:
        raise ValueError(f"charbonnier eps must be > 0, got {eps}")
    return ops.sqrt(ops.add_scalar(ops.square(ops.sub(pred, target)), eps * eps))


_LUMA = np.array([65.481, 128.553, 24.966]) / 255.0


def to_luminance(x: Tensor) -> Tensor:
    """Studio-range Y from [0, 1] RGB, still in [0, 1] units."""
    out = ops.scale(ops.slice_channels(x, 0, 1), _LUMA[0])
    out = ops.add(out, ops.scale(ops.slice_channels(x, 1, 2), _LUMA[1]))
    out = ops.add(out, ops.scale(ops.slice_channels(x, 2, 3), _LUMA[2]))
    return ops.add_scalar(out, 16.0 / 255.0)


def psnr_loss(pred: Tensor, target: Tensor, to_luminance_: bool = False) -> Tensor:
    """Negative PSNR for unit-range images; floors MSE so identical inputs give -100."""
    if pred.shape != target.shape:
        raise ValueError(f"psnr_loss: pred shape {pred.shape} != target shape {target.shape}")
    if to_luminance_:
        pred, target = to_luminance(pred), to_luminance(target)
    mse = ops.reduce_mean(ops.square(ops.sub(pred, target)))
    return ops.scale(ops.log10(ops.clamp_min(mse, _MSE_FLOOR)), 10.0)


def pixel_loss(spec: LossSpec, pred: Tensor, target: Tensor, weight: Tensor | None = None) -> Tensor:
    if spec.kind == "psnr":
        loss = psnr_loss(pred, target, spec.psnr_to_luminance)
    elif spec.kind == "l1":
        loss = l1_loss(pred, target, weight=weight, reduction=spec.reduction)
    elif spec.kind == "mse":
        loss = mse_loss(pred, target, weight=weight, reduction=spec.reduction)
    else:
        loss = charbonnier_loss(pred, target, weight=weight, reduction=spec.reduction, eps=spec.charbonnier_eps)
    if spec.loss_weight != 1.0:
        loss = ops.scale(loss, spec.loss_weight)
    return loss
