"""PSNR / SSIM and benchmark evaluation.

Evaluation convention: HR images are mod-cropped to the scale, LR inputs come
from bicubic downscaling, and metrics are computed on the BT.601 luma channel
with a border of ``scale`` pixels removed.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import bicubic_resize, check_image, from_tensor, mod_crop, to_tensor

PSNR_INF = math.inf
SSIM_K1, SSIM_K2 = 0.01, 0.03
PEAK = 255.0


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma in [16, 235] as float64, unrounded."""
    rgb = img.astype(np.float64)
    return 16.0 + (65.481 * rgb[..., 0] + 128.553 * rgb[..., 1] + 24.966 * rgb[..., 2]) / 255.0


def _prepare(a, b, border_crop: int, y_only: bool):
    check_image(a, "a")
    check_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    if border_crop < 0 or 2 * border_crop >= min(h, w):
        raise ValueError(f"border crop {border_crop} too large for {w}x{h}")
    if y_only:
        a, b = rgb_to_y(a)[..., None], rgb_to_y(b)[..., None]
    else:
        a, b = a.astype(np.float64), b.astype(np.float64)
    if border_crop:
        a = a[border_crop:-border_crop, border_crop:-border_crop]
        b = b[border_crop:-border_crop, border_crop:-border_crop]
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, border_crop: int = 0, y_only: bool = False) -> float:
    """Peak signal-to-noise ratio in dB; ``PSNR_INF`` when the images match exactly."""
    a, b = _prepare(a, b, border_crop, y_only)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(PEAK * PEAK / mse)


def _filter_valid(x: np.ndarray, g1: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of an ``(H, W)`` map with a 1-D kernel."""
    k = g1.size
    rows = sliding_window_view(x, k, axis=0) @ g1
    return sliding_window_view(rows, k, axis=1) @ g1


def ssim_map(x: np.ndarray, y: np.ndarray, window: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Local SSIM at every position where the window fits entirely."""
    ax = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g1 = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g1 /= g1.sum()
    c1, c2 = (SSIM_K1 * PEAK) ** 2, (SSIM_K2 * PEAK) ** 2
    mu_x, mu_y = _filter_valid(x, g1), _filter_valid(y, g1)
    sxx = _filter_valid(x * x, g1) - mu_x ** 2
    syy = _filter_valid(y * y, g1) - mu_y ** 2
    sxy = _filter_valid(x * y, g1) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, y_only: bool = False,
         border_crop: int = 0, sigma: float = 1.5) -> float:
    """Mean structural similarity over Gaussian windows (channel mean for RGB)."""
    a, b = _prepare(a, b, border_crop, y_only)
    if min(a.shape[:2]) < window:
        raise ValueError(f"image smaller than the {window}x{window} SSIM window")
    vals = [float(ssim_map(a[..., c], b[..., c], window, sigma).mean()) for c in range(a.shape[2])]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Benchmark evaluation
# ---------------------------------------------------------------------------


def bicubic_upscaler(lr: np.ndarray, scale: int) -> np.ndarray:
    return bicubic_resize(lr, lr.shape[1] * scale, lr.shape[0] * scale)


def network_upscaler(net):
    """Wrap a network as ``fn(lr_image, scale) -> sr_image``."""

    def upscale(lr: np.ndarray, scale: int) -> np.ndarray:
        dtype = next(iter(net.params.entries.values())).dtype
        return from_tensor(net.forward(to_tensor(lr, dtype), scale))

    return upscale


@dataclass(frozen=True)
class EvalRow:
    image: str
    scale: int
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    rows: list

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr_db for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    def to_csv(self, include_mean: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image", "scale", "psnr_db", "ssim"])
        for r in self.rows:
            writer.writerow([r.image, r.scale, repr(r.psnr_db), repr(r.ssim)])
        if include_mean and self.rows:
            writer.writerow(["MEAN", self.rows[0].scale, repr(self.mean_psnr), repr(self.mean_ssim)])
        return buf.getvalue()


def evaluate(upscaler, images, scale: int, names=None) -> EvalReport:
    """Score ``upscaler`` on HR ``images``; LR inputs are derived by bicubic downscaling."""
    images = list(images)
    names = list(names) if names is not None else [f"img{i:03d}" for i in range(len(images))]
    rows = []
    for name, hr in zip(names, images):
        hr = mod_crop(check_image(hr), scale)
        lr = bicubic_resize(hr, hr.shape[1] // scale, hr.shape[0] // scale)
        sr = upscaler(lr, scale)
        if sr.shape != hr.shape:
            raise ValueError(f"{name}: upscaler returned {sr.shape}, expected {hr.shape}")
        rows.append(EvalRow(name, scale, psnr(sr, hr, scale, True), ssim(sr, hr, 11, True, scale)))
    return EvalReport(rows)
