"""LoL-style paired data synthesised from scikit-image's bundled photographs.

Used for tests and demos when the real LoL release is not on disk. The
degradation darkens with a gain and gamma, adds Gaussian read noise and
re-quantises to 8 bits, which mimics the look of LoL's low-light captures.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from dark.data import PairedDataset, write_u8_atomic

__all__ = ["darken", "reference_images", "synthetic_pairs", "write_lol_layout"]

_SOURCES = ("coffee", "chelsea", "astronaut", "rocket", "immunohistochemistry", "hubble_deep_field")


def darken(gt: np.ndarray, rng: np.random.Generator, gain: float = 0.12, gamma: float = 1.3,
           noise: float = 0.004) -> np.ndarray:
    x = gt.astype(np.float64) / 255.0
    low = gain * x**gamma + rng.normal(0.0, noise, size=x.shape)
    return np.floor(np.clip(low, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _fit(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Centre crop (after tiling if needed) to exactly h x w."""
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    img = img[:, :, :3]
    reps = (-(-h // img.shape[0]), -(-w // img.shape[1]), 1)
    img = np.tile(img, reps)
    top = (img.shape[0] - h) // 2
    left = (img.shape[1] - w) // 2
    return np.ascontiguousarray(img[top : top + h, left : left + w]).astype(np.uint8)


def reference_images(n: int, height: int = 400, width: int = 600) -> list[np.ndarray]:
    from skimage import data as skdata

    out = []
    for i in range(n):
        src = getattr(skdata, _SOURCES[i % len(_SOURCES)])()
        img = _fit(src, height, width)
        if i >= len(_SOURCES):
            img = img[::-1] if (i // len(_SOURCES)) % 2 else img[:, ::-1]
        out.append(np.ascontiguousarray(img))
    return out


def synthetic_pairs(n: int = 1, height: int = 400, width: int = 600, seed: int = 0) -> PairedDataset:
    rng = np.random.default_rng(seed)
    gts = reference_images(n, height, width)
    lows = [darken(g, rng) for g in gts]
    return PairedDataset.from_arrays(lows, gts, [f"{i + 1}.png" for i in range(n)])


def write_lol_layout(root, n_train: int = 4, n_test: int = 2, height: int = 400, width: int = 600,
                     seed: int = 0) -> Path:
    """Write ``<root>/{train,test}/{low,high}/*.png``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    gts = reference_images(n_train + n_test, height, width)
    for split, items in (("train", gts[:n_train]), ("test", gts[n_train:])):
        for sub in ("low", "high"):
            (root / split / sub).mkdir(parents=True, exist_ok=True)
        for i, gt in enumerate(items, start=1):
            write_u8_atomic(darken(gt, rng), root / split / "low" / f"{i}.png")
            write_u8_atomic(gt, root / split / "high" / f"{i}.png")
    return root
