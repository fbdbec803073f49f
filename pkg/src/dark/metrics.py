"""PSNR and SSIM on 8-bit images, plus the per-dataset report."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = ["psnr_metric", "ssim_metric", "gaussian_window", "MetricReport", "PSNR_CEILING_DB"]

PSNR_CEILING_DB = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_hwc(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected an HxW or HxWxC image, got shape {arr.shape}")
    return arr.astype(np.float64)


def psnr_metric(pred, target, data_range: float = 255.0) -> float:
    """PSNR in dB over all pixels and channels, capped at 100 dB."""
    a, b = _as_hwc(pred), _as_hwc(target)
    if a.shape != b.shape:
        raise ValueError(f"psnr: image shapes differ, {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CEILING_DB
    return float(min(10.0 * np.log10(data_range**2 / mse), PSNR_CEILING_DB))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    r = len(taps) // 2
    out = ndimage.correlate1d(img, taps, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, taps, axis=1, mode="nearest")
    return out[r:-r, r:-r]


def _ssim_channel(a: np.ndarray, b: np.ndarray, taps: np.ndarray, data_range: float) -> float:
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = _filter_valid(a * a, taps) - mu_aa
    var_b = _filter_valid(b * b, taps) - mu_bb
    cov = _filter_valid(a * b, taps) - mu_ab
    num = (2 * mu_ab + c1) * (2 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_metric(pred, target, data_range: float = 255.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a, b = _as_hwc(pred), _as_hwc(target)
    if a.shape != b.shape:
        raise ValueError(f"ssim: image shapes differ, {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ValueError(f"ssim: image {a.shape[0]}x{a.shape[1]} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    taps = gaussian_window()
    scores = [_ssim_channel(a[..., c], b[..., c], taps, data_range) for c in range(a.shape[2])]
    return float(np.mean(scores))


@dataclass
class MetricReport:
    names: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, name: str, psnr_db: float, ssim: float) -> None:
        self.names.append(name)
        self.psnr.append(psnr_db)
        self.ssim.append(ssim)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_name", "psnr_db", "ssim"])
        for row in zip(self.names, self.psnr, self.ssim):
            w.writerow([row[0], f"{row[1]:.4f}", f"{row[2]:.6f}"])
        w.writerow(["mean", f"{self.mean_psnr:.4f}", f"{self.mean_ssim:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'image':<24} {'PSNR(dB)':>9} {'SSIM':>8}"]
        for n, p, s in zip(self.names, self.psnr, self.ssim):
            lines.append(f"{n:<24} {p:9.4f} {s:8.4f}")
        lines.append(f"{'mean':<24} {self.mean_psnr:9.4f} {self.mean_ssim:8.4f}")
        lines.append(f"(identical images report the {PSNR_CEILING_DB:.0f} dB PSNR ceiling)")
        return "\n".join(lines)
