"""The assembled enhancement network."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from dark import ops
from dark.blocks import MMRB, Conv2d, IlluminationEstimator, Module
from dark.tensor import Tensor

__all__ = ["ModelConfig", "DarkNet", "build_model", "forward_enhance", "count_parameters", "layer_table"]


@dataclass(frozen=True)
class ModelConfig:
    n_feat: int = 32
    chan_factor: float = 1.5
    n_mmrb: int = 2
    n_srcb_per_stream: int = 2
    n_fea_middle: int = 40
    in_channels: int = 3
    out_channels: int = 3

    def validate(self) -> None:
        bad = [
            name
            for name in ("n_feat", "n_mmrb", "n_srcb_per_stream", "n_fea_middle")
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1
        ]
        if not isinstance(self.chan_factor, (int, float)) or self.chan_factor < 1:
            bad.append("chan_factor")
        if self.in_channels != 3:
            bad.append("in_channels")
        if self.out_channels != 3:
            bad.append("out_channels")
        if bad:
            raise ValueError(f"invalid ModelConfig field(s): {', '.join(bad)} ({asdict(self)})")


class DarkNet(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        c = config.n_feat
        self.estimator = IlluminationEstimator(config.n_fea_middle, rng=rng)
        self.input_conv = Conv2d(config.in_channels, c, 3, rng=rng)
        self.body = [MMRB(c, config.chan_factor, config.n_srcb_per_stream, rng=rng) for _ in range(config.n_mmrb)]
        self.tail_conv = Conv2d(c, c, 3, rng=rng)
        self.output_conv = Conv2d(c, config.out_channels, 3, rng=rng)

    def forward(self, image: Tensor) -> Tensor:
        """Raw (unclamped) restoration, as fed to training losses."""
        if image.shape[1] != 3:
            raise ValueError(f"expected a 3-channel image, got {image.shape[1]} channels")
        # illu_fea is intentionally unused; only the light-up map drives the output.
        _, illu_map = self.estimator(image)
        lit = ops.mul(image, illu_map)
        x = self.input_conv(lit)
        for block in self.body:
            x = block(x)
        x = self.tail_conv(x)
        return ops.add(lit, self.output_conv(x))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}


def build_model(config: ModelConfig | None = None, seed: int = 0) -> DarkNet:
    """Instantiate with deterministic initialisation from ``seed``."""
    return DarkNet(config or ModelConfig(), np.random.default_rng(seed))


def forward_enhance(model: DarkNet, image: Tensor, clamp: bool = True) -> Tensor:
    """Inference entry point: output clipped to [0, 1] unless ``clamp`` is off."""
    out = model(image)
    if clamp:
        return Tensor._wrap(np.clip(out.data, 0.0, 1.0), False)
    return out


def count_parameters(model: Module) -> int:
    return sum(p.size for p in model.parameters())


def layer_table(model: DarkNet) -> list[tuple[str, tuple[int, ...], int]]:
    return [(name, p.shape, p.size) for name, p in model.named_parameters()]
