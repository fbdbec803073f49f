"""Paired low/normal-light data: loading, patch sampling, augmentation, image IO."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from dark.tensor import Tensor

__all__ = [
    "PairedDataset",
    "Batch",
    "load_dataset",
    "sample_batch",
    "mixup",
    "decode_image",
    "encode_image",
    "quantize",
    "emit_histogram",
    "histogram_csv",
    "SPLIT_ALIASES",
]

IMAGE_SUFFIXES = (".png",)
# Directory names used by the public LoL release, tried after the plain split name.
SPLIT_ALIASES = {"train": ("train", "our485"), "test": ("test", "eval15")}


class DatasetError(ValueError):
    pass


# ------------------------------------------------------------------- image IO


def read_image_u8(path) -> np.ndarray:
    """HxWx3 uint8 array from an 8-bit RGB file."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode != "RGB":
                raise DatasetError(f"{path}: unsupported image mode {mode!r}, expected 8-bit RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read image ({exc})") from exc
    return arr


def decode_image(path) -> Tensor:
    arr = read_image_u8(path)
    return Tensor(arr.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(255.0))


def quantize(x: np.ndarray) -> np.ndarray:
    """[0, 1] floats to bytes, rounding half up."""
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def tensor_to_u8(t: Tensor, index: int = 0) -> np.ndarray:
    return quantize(t.data[index].transpose(1, 2, 0))


def write_u8_atomic(arr: np.ndarray, path) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".png", dir=path.parent or ".")
    os.close(fd)
    try:
        Image.fromarray(arr, mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_image(t: Tensor, path) -> None:
    """Write a (1, 3, H, W) tensor as an 8-bit PNG (temp file + rename)."""
    if t.shape[0] != 1 or t.shape[1] != 3:
        raise ValueError(f"encode_image expects shape (1, 3, H, W), got {t.shape}")
    write_u8_atomic(tensor_to_u8(t), path)


# ------------------------------------------------------------------- datasets


@dataclass
class PairedDataset:
    pairs: list[tuple[Path, Path]]
    height: int | None = None
    width: int | None = None
    _cache: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.pairs)

    def name(self, i: int) -> str:
        return self.pairs[i][0].name

    def load_u8(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(low, gt) as HxWx3 uint8 arrays; decoded once, then cached."""
        if i not in self._cache:
            low_path, gt_path = self.pairs[i]
            low, gt = read_image_u8(low_path), read_image_u8(gt_path)
            if low.shape != gt.shape:
                raise DatasetError(f"pair {low_path.name}: low {low.shape[:2]} vs high {gt.shape[:2]} differ")
            self._cache[i] = (low, gt)
        return self._cache[i]

    @classmethod
    def from_arrays(cls, lows, gts, names=None) -> "PairedDataset":
        """In-memory dataset, mostly for tests and synthetic fixtures."""
        names = names or [f"{i}.png" for i in range(len(lows))]
        ds = cls([(Path("low") / n, Path("high") / n) for n in names])
        for i, (lo, gt) in enumerate(zip(lows, gts)):
            if lo.shape != gt.shape:
                raise DatasetError(f"pair {names[i]}: low {lo.shape[:2]} vs high {gt.shape[:2]} differ")
            ds._cache[i] = (np.asarray(lo, np.uint8), np.asarray(gt, np.uint8))
        if lows:
            ds.height, ds.width = lows[0].shape[:2]
        return ds


def _split_dir(root: Path, split: str) -> Path:
    if split not in SPLIT_ALIASES:
        raise DatasetError(f"unknown split {split!r}, expected 'train' or 'test'")
    for name in SPLIT_ALIASES[split]:
        if (root / name / "low").is_dir():
            return root / name
    if (root / "low").is_dir():
        return root
    raise DatasetError(f"{root}: no low/ directory for split {split!r}")


def _png_files(d: Path) -> dict[str, Path]:
    return {p.name: p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}


def load_dataset(root_dir, split: str = "train") -> PairedDataset:
    """Pair ``low/`` and ``high/`` images by filename.

    ``root_dir`` may hold ``low/`` and ``high/`` directly, or one directory per
    split (``train``/``test``, or LoL's ``our485``/``eval15``).
    """
    root = Path(root_dir)
    d = _split_dir(root, split)
    if not (d / "high").is_dir():
        raise DatasetError(f"{d}: missing high/ directory")
    lows, highs = _png_files(d / "low"), _png_files(d / "high")
    for name in sorted(lows):
        if name not in highs:
            raise DatasetError(f"orphan low image {d / 'low' / name}: no high/{name}")
    for name in sorted(highs):
        if name not in lows:
            raise DatasetError(f"orphan high image {d / 'high' / name}: no low/{name}")
    if not lows:
        raise DatasetError(f"{d}: split {split!r} is empty")

    pairs = [(lows[n], highs[n]) for n in sorted(lows)]
    sizes = set()
    for low_path, gt_path in pairs:
        with Image.open(low_path) as a, Image.open(gt_path) as b:
            if a.size != b.size:
                raise DatasetError(f"pair {low_path.name}: low {a.size[::-1]} vs high {b.size[::-1]} differ")
            sizes.add(a.size)
    ds = PairedDataset(pairs)
    if len(sizes) == 1:
        w, h = sizes.pop()
        ds.height, ds.width = h, w
    return ds


# ------------------------------------------------------------------ sampling


@dataclass
class Batch:
    low: Tensor
    gt: Tensor
    # (pair index, top, left, hflip, vflip) per element
    provenance: list[tuple[int, int, int, bool, bool]] = field(default_factory=list)


def sample_batch(dataset: PairedDataset, patch_size: int, batch_size: int,
                 rng: np.random.Generator, flips: bool = True) -> Batch:
    """Random aligned crops; flips are drawn per element and shared by low and gt."""
    if len(dataset) == 0:
        raise DatasetError("cannot sample from an empty dataset")
    p = patch_size
    low = np.empty((batch_size, 3, p, p), dtype=np.float32)
    gt = np.empty_like(low)
    prov = []
    for b in range(batch_size):
        idx = int(rng.integers(len(dataset)))
        lo_img, gt_img = dataset.load_u8(idx)
        h, w = lo_img.shape[:2]
        if p > h or p > w:
            raise DatasetError(f"patch {p} larger than image {dataset.name(idx)} ({h}x{w})")
        top = int(rng.integers(0, h - p + 1))
        left = int(rng.integers(0, w - p + 1))
        hflip = vflip = False
        if flips:
            hflip = bool(rng.random() < 0.5)
            vflip = bool(rng.random() < 0.5)
        for dst, src in ((low, lo_img), (gt, gt_img)):
            crop = src[top : top + p, left : left + p].transpose(2, 0, 1)
            if hflip:
                crop = crop[:, :, ::-1]
            if vflip:
                crop = crop[:, ::-1, :]
            dst[b] = crop
        prov.append((idx, top, left, hflip, vflip))
    scale_ = np.float32(1.0 / 255.0)
    return Batch(Tensor(low * scale_), Tensor(gt * scale_), prov)


def mixup(batch: Batch, beta_param: float, rng: np.random.Generator, lam: float | None = None) -> Batch:
    """Blend the batch with a shuffled copy of itself.

    The same coefficient and permutation apply to inputs and targets. The
    partner permutation is a random cyclic shift, so no sample is mixed with
    itself. A batch of one is returned unchanged.
    """
    n = batch.low.shape[0]
    if n < 2:
        return batch
    if lam is None:
        lam = float(rng.beta(beta_param, beta_param))
    perm = np.roll(np.arange(n), int(rng.integers(1, n)))
    a = np.float32(lam)
    b = np.float32(1.0 - lam)
    low = a * batch.low.data + b * batch.low.data[perm]
    gt = a * batch.gt.data + b * batch.gt.data[perm]
    return Batch(Tensor(low), Tensor(gt), batch.provenance)


# ----------------------------------------------------------------- histograms


def emit_histogram(image: Tensor) -> np.ndarray:
    """(3, 256) per-channel counts of the quantised byte values."""
    u8 = tensor_to_u8(image)
    return np.stack([np.bincount(u8[..., c].ravel(), minlength=256) for c in range(3)])


def histogram_csv(counts: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin", "R", "G", "B"])
    for i in range(256):
        w.writerow([i, int(counts[0, i]), int(counts[1, i]), int(counts[2, i])])
    return buf.getvalue()
