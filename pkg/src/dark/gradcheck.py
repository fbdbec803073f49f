"""Central finite-difference checks of the tape's gradients (64-bit mode)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from dark import ops
from dark.blocks import MMRB, SCB, SKFF, SRCB, IlluminationEstimator
from dark.losses import LossSpec, pixel_loss, psnr_loss
from dark.model import ModelConfig, build_model
from dark.tensor import Tape, Tensor, high_precision

__all__ = ["GradCheckResult", "check_gradients", "relative_error", "run_suite", "STEP", "TOLERANCE"]

STEP = 1e-4
TOLERANCE = 1e-3


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """||a - n|| / max(||a||, ||n||, floor)."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], *, step: float = STEP,
                    max_entries: int | None = 24, rng: np.random.Generator | None = None) -> float:
    """Worst relative error over ``params`` of tape gradients vs central differences.

    ``fn`` must rebuild the scalar from the current contents of ``params``.
    At most ``max_entries`` randomly chosen elements per tensor are perturbed.
    Gradient norms below 1e-6 * max(1, |f|) count as zero: central differences
    carry round-off near 2e-16 * |f| / step, and some parameters (a bias feeding
    a softmax) have an exactly zero gradient.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors (use high_precision())")
        p.grad = None
    with Tape() as tape:
        out = fn()
    grads = tape.backward(out)
    floor = 1e-6 * max(1.0, abs(out.item()))

    worst = 0.0
    for p in params:
        analytic_full = grads.get(p, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            numeric[k] = (f_plus - f_minus) / (2 * step)
        worst = max(worst, relative_error(analytic_full.reshape(-1)[idx], numeric, floor))
    return worst


def _projected(out: Tensor, proj: Tensor) -> Tensor:
    # random projection so no gradient direction cancels by symmetry
    return ops.reduce_sum(ops.mul(out, proj))


def _case(name, build, rng) -> GradCheckResult:
    fn, params = build(rng)
    err = check_gradients(fn, params, rng=rng)
    return GradCheckResult(name, err, len(params))


def _rand(rng, *shape, requires_grad=True, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=requires_grad)


def _op_cases():
    def conv_case(k, stride, groups, cin=4, cout=4):
        def build(rng):
            spec = ops.ConvSpec(cin, cout, k, k, stride, k // 2, groups)
            x = _rand(rng, 2, cin, 7, 6)
            w = _rand(rng, *spec.weight_shape)
            b = _rand(rng, 1, cout, 1, 1)
            y0 = ops.conv2d(x.detach(), w.detach(), b.detach(), spec)
            proj = _rand(rng, *y0.shape, requires_grad=False)
            return (lambda: _projected(ops.conv2d(x, w, b, spec), proj)), [x, w, b]

        return build

    def unary(fn, shape=(2, 3, 4, 5), low=-1.0, high=1.0):
        def build(rng):
            x = _rand(rng, *shape, low=low, high=high)
            proj = _rand(rng, *fn(x.detach()).shape, requires_grad=False)
            return (lambda: _projected(fn(x), proj)), [x]

        return build

    def binary(fn, sa=(2, 3, 4, 5), sb=(2, 3, 4, 5)):
        def build(rng):
            a, b = _rand(rng, *sa), _rand(rng, *sb)
            proj = _rand(rng, *fn(a.detach(), b.detach()).shape, requires_grad=False)
            return (lambda: _projected(fn(a, b), proj)), [a, b]

        return build

    def concat(rng):
        a, b = _rand(rng, 2, 3, 4, 5), _rand(rng, 2, 1, 4, 5)
        proj = _rand(rng, 2, 4, 4, 5, requires_grad=False)
        return (lambda: _projected(ops.concat_channels([a, b]), proj)), [a, b]

    return [
        ("conv2d 1x1", conv_case(1, 1, 1)),
        ("conv2d 3x3", conv_case(3, 1, 1)),
        ("conv2d 3x3 stride 2", conv_case(3, 2, 1)),
        ("conv2d 5x5 depthwise", conv_case(5, 1, 4)),
        ("conv2d grouped", conv_case(3, 1, 2)),
        ("softmax spatial", unary(lambda x: ops.softmax_axis(x, "spatial"))),
        ("softmax channel", unary(lambda x: ops.softmax_axis(x, "channel"))),
        ("softmax scale", unary(lambda x: ops.softmax_axis(x, "scale", num_scales=2), shape=(2, 4, 3, 3))),
        ("global_avg_pool", unary(ops.global_avg_pool)),
        ("sum_spatial", unary(ops.sum_spatial)),
        ("resample down", unary(lambda x: ops.resample_bilinear(x, 3, 2), shape=(1, 2, 7, 5))),
        ("resample up", unary(lambda x: ops.resample_bilinear(x, 7, 9), shape=(1, 2, 4, 5))),
        ("add", binary(ops.add)),
        ("add broadcast", binary(ops.add, sb=(2, 3, 1, 1))),
        ("sub", binary(ops.sub)),
        ("mul", binary(ops.mul)),
        ("mul broadcast", binary(ops.mul, sb=(2, 1, 4, 5))),
        ("scale", unary(lambda x: ops.scale(x, -2.5))),
        ("add_scalar", unary(lambda x: ops.add_scalar(x, 0.7))),
        ("channel_mean", unary(ops.channel_mean)),
        ("concat_channels", concat),
        ("slice_channels", unary(lambda x: ops.slice_channels(x, 1, 3))),
        ("reduce_mean", unary(ops.reduce_mean)),
        ("reduce_sum", unary(ops.reduce_sum)),
        ("relu", unary(ops.relu)),
        ("abs", unary(ops.abs_)),
        ("square", unary(ops.square)),
        ("sqrt", unary(ops.sqrt, low=0.5, high=2.0)),
        ("log10", unary(ops.log10, low=0.5, high=2.0)),
        ("clamp_min", unary(lambda x: ops.clamp_min(x, 0.1))),
    ]


def _block_cases():
    def block(make, shape=(1, 4, 8, 8), multi=False):
        def build(rng):
            mod = make(rng)
            if multi:
                xs = [_rand(rng, *shape), _rand(rng, *shape)]
                y0 = mod([x.detach() for x in xs])
                proj = _rand(rng, *y0.shape, requires_grad=False)
                return (lambda: _projected(mod(xs), proj)), xs + mod.parameters()
            x = _rand(rng, *shape)
            y0 = mod(x.detach())
            if isinstance(y0, tuple):
                p0 = _rand(rng, *y0[0].shape, requires_grad=False)
                p1 = _rand(rng, *y0[1].shape, requires_grad=False)

                def fn():
                    a, b = mod(x)
                    return ops.add(_projected(a, p0), _projected(b, p1))

                return fn, [x] + mod.parameters()
            proj = _rand(rng, *y0.shape, requires_grad=False)
            return (lambda: _projected(mod(x), proj)), [x] + mod.parameters()

        return build

    return [
        ("IlluminationEstimator", block(lambda r: IlluminationEstimator(8, rng=r), shape=(1, 3, 8, 8))),
        ("SCB", block(lambda r: SCB(4, rng=r))),
        ("SRCB", block(lambda r: SRCB(4, rng=r))),
        ("SKFF", block(lambda r: SKFF(4, 2, rng=r), multi=True)),
        ("MMRB", block(lambda r: MMRB(4, 1.5, 2, rng=r))),
    ]


def _loss_cases():
    def loss(spec: LossSpec, weighted=False):
        def build(rng):
            pred = _rand(rng, 1, 3, 6, 6, low=0.0, high=1.0)
            target = Tensor(rng.uniform(0, 1, size=(1, 3, 6, 6)))
            weight = Tensor(rng.uniform(0, 2, size=(1, 3, 6, 6))) if weighted else None
            return (lambda: pixel_loss(spec, pred, target, weight)), [pred]

        return build

    def psnr(lum):
        def build(rng):
            pred = _rand(rng, 1, 3, 6, 6, low=0.0, high=1.0)
            target = Tensor(rng.uniform(0, 1, size=(1, 3, 6, 6)))
            return (lambda: psnr_loss(pred, target, lum)), [pred]

        return build

    return [
        ("L1 loss", loss(LossSpec("l1"))),
        ("MSE loss", loss(LossSpec("mse"))),
        ("Charbonnier loss", loss(LossSpec("charbonnier"))),
        ("Charbonnier loss weighted", loss(LossSpec("charbonnier", loss_weight=0.5), weighted=True)),
        ("PSNR loss", psnr(False)),
        ("PSNR loss luminance", psnr(True)),
    ]


def _model_case(rng):
    model = build_model(ModelConfig(), seed=int(rng.integers(1 << 31)))
    x = Tensor(rng.uniform(0, 1, size=(1, 3, 8, 8)), requires_grad=True)
    target = Tensor(rng.uniform(0, 1, size=(1, 3, 8, 8)))
    spec = LossSpec("mse")
    return (lambda: pixel_loss(spec, model(x), target)), [x] + model.parameters()


def run_suite(seed: int = 0, include_model: bool = True) -> list[GradCheckResult]:
    """Every primitive, block and loss, plus the full model on a 1x3x8x8 input."""
    results = []
    with high_precision():
        cases = _op_cases() + _block_cases() + _loss_cases()
        if include_model:
            cases.append(("DarkNet full model", _model_case))
        for i, (name, build) in enumerate(cases):
            rng = np.random.default_rng([seed, i])
            results.append(_case(name, build, rng))
    return results
