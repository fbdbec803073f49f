"""Optimiser, schedules, the training loop and dataset evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from dark.data import PairedDataset, mixup, quantize, sample_batch
from dark.losses import LossSpec, pixel_loss
from dark.metrics import MetricReport, psnr_metric, ssim_metric
from dark.model import DarkNet, ModelConfig, build_model, forward_enhance
from dark.serialization import assign_weights, read_checkpoint, save_checkpoint, save_weights
from dark.tensor import Tape, Tensor

__all__ = [
    "Schedule",
    "StagePlan",
    "TrainOptions",
    "TrainState",
    "TrainResult",
    "TrainingDiverged",
    "adam_step",
    "lr_at",
    "stage_at",
    "run_training",
    "evaluate",
    "evaluate_identity",
    "iteration_rng",
]

log = logging.getLogger(__name__)

ADAM_EPS = 1e-8


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 2e-4
    min_lr: float = 1e-6
    fixed_until: int = 46_000
    total_iters: int = 100_000
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if not 0 <= self.fixed_until < self.total_iters:
            raise ValueError(f"need 0 <= fixed_until < total_iters, got {self.fixed_until}, {self.total_iters}")
        if not 0 < self.min_lr < self.base_lr:
            raise ValueError(f"need 0 < min_lr < base_lr, got {self.min_lr}, {self.base_lr}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")


@dataclass(frozen=True)
class StagePlan:
    """(start_iteration, batch_size, patch_size) triples, in order."""

    stages: tuple[tuple[int, int, int], ...] = ((0, 8, 128), (46_000, 4, 192), (70_000, 2, 256), (87_000, 1, 384))

    def __post_init__(self):
        st = tuple(tuple(int(v) for v in s) for s in self.stages)
        object.__setattr__(self, "stages", st)
        if not st or st[0][0] != 0:
            raise ValueError("the first stage must start at iteration 0")
        for (s0, b0, p0), (s1, b1, p1) in zip(st, st[1:]):
            if s1 <= s0:
                raise ValueError(f"stage starts must increase: {s0} then {s1}")
            if b1 > b0:
                raise ValueError(f"batch sizes must not increase: {b0} then {b1}")
            if p1 < p0:
                raise ValueError(f"patch sizes must not decrease: {p0} then {p1}")
        for s, b, p in st:
            if b < 1 or p < 1:
                raise ValueError(f"stage ({s}, {b}, {p}) needs positive batch and patch sizes")


@dataclass(frozen=True)
class TrainOptions:
    mixup_beta: float = 1.2
    use_mixup: bool = True
    flips: bool = True
    checkpoint_every: int = 5_000
    eval_every: int = 5_000
    log_every: int = 100


@dataclass
class TrainState:
    iteration: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    stage: int = 0

    @classmethod
    def fresh(cls, model, seed: int = 0) -> "TrainState":
        m = {n: np.zeros_like(p.data) for n, p in model.named_parameters()}
        v = {n: np.zeros_like(p.data) for n, p in model.named_parameters()}
        return cls(0, m, v, seed, 0)

    def rng_state(self) -> dict:
        return {"scheme": "per-iteration", "bit_generator": "PCG64", "seed": self.seed}


class TrainingDiverged(RuntimeError):
    pass


def lr_at(schedule: Schedule, iteration: int) -> float:
    """Constant until ``fixed_until``, then cosine down to ``min_lr``."""
    s = schedule
    if iteration < s.fixed_until:
        return s.base_lr
    if iteration >= s.total_iters:
        return s.min_lr
    phase = (iteration - s.fixed_until) / (s.total_iters - s.fixed_until)
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + math.cos(math.pi * phase))


def stage_at(plan: StagePlan, iteration: int) -> tuple[int, int]:
    """(batch_size, patch_size) of the last stage starting at or before ``iteration``."""
    return plan.stages[stage_index(plan, iteration)][1:]


def stage_index(plan: StagePlan, iteration: int) -> int:
    idx = 0
    for i, (start, _, _) in enumerate(plan.stages):
        if start <= iteration:
            idx = i
    return idx


def adam_step(params, grads: dict[str, np.ndarray], state: TrainState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = ADAM_EPS) -> None:
    """In-place Adam update of ``params`` (iterable of (name, Tensor)).

    Every gradient is checked before anything is modified, so a NaN leaves
    parameters and moments untouched.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    params = list(params)
    for name, p in params:
        g = grads.get(name)
        if g is None:
            raise KeyError(f"no gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name!r}; step aborted")

    t = state.iteration + 1
    for name, p in params:
        dt = p.data.dtype.type
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        m_hat = m / dt(1 - beta1**t)
        v_hat = v / dt(1 - beta2**t)
        p.data -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
    state.iteration = t


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Sampling stream for one iteration, fixed by (seed, iteration) alone."""
    return np.random.default_rng([seed, iteration])


@dataclass
class TrainResult:
    model: DarkNet
    state: TrainState
    checkpoints: list[Path]
    history: list[tuple[int, float, float]]


def _checkpoint_name(iteration: int) -> str:
    return f"checkpoint_{iteration:07d}.ckpt"


def run_training(
    config: ModelConfig,
    dataset: PairedDataset,
    schedule: Schedule = Schedule(),
    plan: StagePlan = StagePlan(),
    seed: int = 0,
    *,
    loss: LossSpec = LossSpec(),
    options: TrainOptions = TrainOptions(),
    out_dir=None,
    resume=None,
    val_dataset: PairedDataset | None = None,
    stop_at: int | None = None,
    on_step: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Train from scratch (or from ``resume``) up to ``stop_at`` iterations.

    ``stop_at`` defaults to ``schedule.total_iters``. Checkpoints and the CSV
    log go to ``out_dir`` when it is given.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    stop = schedule.total_iters if stop_at is None else stop_at
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    model = build_model(config, seed=seed)
    state = TrainState.fresh(model, seed)
    if resume is not None:
        ck = read_checkpoint(resume)
        assign_weights(model, ck.weights)
        names = [n for n, _ in model.named_parameters()]
        state = TrainState(ck.iteration, {n: ck.moments[n + ".m"].copy() for n in names},
                           {n: ck.moments[n + ".v"].copy() for n in names}, int(ck.rng_state["seed"]), ck.stage)
        log.info("resumed from %s at iteration %d", resume, state.iteration)

    params = list(model.named_parameters())
    checkpoints: list[Path] = []
    history: list[tuple[int, float, float]] = []
    log_fh = None
    if out is not None:
        log_path = out / "train_log.csv"
        fresh_log = resume is None or not log_path.exists()
        log_fh = open(log_path, "w" if fresh_log else "a")
        if fresh_log:
            log_fh.write("iteration,lr,loss,val_psnr,val_ssim\n")

    def write_checkpoint(it: int) -> None:
        if out is None:
            return
        path = out / _checkpoint_name(it)
        save_checkpoint(path, model, it, state.stage, state.rng_state(), state.m, state.v)
        checkpoints.append(path)

    t0 = time.perf_counter()
    try:
        while state.iteration < stop:
            it = state.iteration
            state.stage = stage_index(plan, it)
            batch_size, patch = stage_at(plan, it)
            rng = iteration_rng(state.seed, it)
            batch = sample_batch(dataset, patch, batch_size, rng, flips=options.flips)
            if options.use_mixup and batch_size >= 2:
                batch = mixup(batch, options.mixup_beta, rng)

            for _, p in params:
                p.grad = None
            with Tape() as tape:
                pred = model(batch.low)
                loss_t = pixel_loss(loss, pred, batch.gt)
            loss_val = loss_t.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(f"non-finite loss {loss_val} at iteration {it}; last checkpoint kept")
            grads = tape.backward(loss_t)
            named_grads = {n: grads.get(p, np.zeros_like(p.data)) for n, p in params}
            lr = lr_at(schedule, it)
            adam_step(params, named_grads, state, lr, schedule.beta1, schedule.beta2)
            history.append((it, lr, loss_val))
            if on_step is not None:
                on_step(it, lr, loss_val)

            done = state.iteration
            val = ""
            if val_dataset is not None and options.eval_every and done % options.eval_every == 0:
                rep = evaluate(model, val_dataset)
                val = f"{rep.mean_psnr:.4f},{rep.mean_ssim:.6f}"
                log.info("iter %d  val PSNR %.3f dB  SSIM %.4f", done, rep.mean_psnr, rep.mean_ssim)
            if log_fh is not None:
                log_fh.write(f"{it},{lr:.6e},{loss_val:.6e},{val or ','}\n")
            if options.log_every and done % options.log_every == 0:
                log.info("iter %d  lr %.3e  loss %.5f  (%.1fs)", done, lr, loss_val, time.perf_counter() - t0)
            if options.checkpoint_every and done % options.checkpoint_every == 0 and done != stop:
                write_checkpoint(done)
        write_checkpoint(state.iteration)
        if out is not None:
            save_weights(model, out / "weights_final.bin")
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model, state, checkpoints, history)


def _pair_arrays(dataset: PairedDataset, i: int):
    low, gt = dataset.load_u8(i)
    low_t = Tensor(low.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(255.0))
    return low_t, gt


def evaluate(model: DarkNet, dataset: PairedDataset,
             restore: Callable[[Tensor], Tensor] | None = None) -> MetricReport:
    """Full-resolution PSNR/SSIM of restored outputs, quantised to 8 bits first."""
    report = MetricReport()
    for i in range(len(dataset)):
        low_t, gt = _pair_arrays(dataset, i)
        out = restore(low_t) if restore is not None else forward_enhance(model, low_t)
        pred = quantize(out.data[0].transpose(1, 2, 0))
        if pred.shape != gt.shape:
            raise ValueError(f"{dataset.name(i)}: restored {pred.shape} vs ground truth {gt.shape}")
        report.add(dataset.name(i), psnr_metric(pred, gt), ssim_metric(pred, gt))
    return report


def evaluate_identity(dataset: PairedDataset) -> MetricReport:
    """Baseline: the raw low-light input scored against ground truth."""
    return evaluate(None, dataset, restore=lambda x: x)
