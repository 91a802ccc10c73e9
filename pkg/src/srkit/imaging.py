"""8-bit RGB images: PNG I/O, tensor conversion and bicubic resizing.

An image is a ``uint8`` array of shape ``(H, W, 3)``.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

CUBIC_A = -0.5


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must be uint8 HxWx3, got {img.dtype} {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"{name} is empty")
    return img


def to_tensor(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    """``(H, W, 3)`` uint8 -> ``(1, 3, H, W)`` in [0, 1]."""
    check_image(img)
    return np.ascontiguousarray((img.astype(np.float64) / 255.0).transpose(2, 0, 1)[None]).astype(dtype)


def from_tensor(t: np.ndarray) -> np.ndarray:
    """``(1, 3, H, W)`` in [0, 1] -> uint8 image, rounded to nearest and clipped."""
    if t.ndim != 4 or t.shape[0] != 1 or t.shape[1] != 3:
        raise ValueError(f"expected (1, 3, H, W), got {t.shape}")
    arr = np.clip(np.rint(t[0].astype(np.float64) * 255.0), 0, 255)
    return np.ascontiguousarray(arr.transpose(1, 2, 0)).astype(np.uint8)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    check_image(img)
    Image.fromarray(img, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def list_pngs(directory) -> list:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png" and p.is_file())


def mod_crop(img: np.ndarray, scale: int) -> np.ndarray:
    """Crop bottom/right so both dimensions are multiples of ``scale``."""
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


def cubic(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(in_size: int, out_size: int) -> np.ndarray:
    """Dense ``(out_size, in_size)`` matrix of normalized bicubic weights.

    Downscaling stretches the kernel by ``in/out`` (antialiasing).  Taps
    beyond the border are clamped onto the edge pixel.
    """
    if in_size < 1 or out_size < 1:
        raise ValueError("sizes must be positive")
    scale = out_size / in_size
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    taps = int(math.ceil(2 * support)) + 2
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    left = np.floor(centers - support).astype(np.int64)
    idx = left[:, None] + np.arange(taps)[None, :]
    w = stretch * cubic(stretch * (centers[:, None] - idx))
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((out_size, in_size))
    np.add.at(mat, (np.repeat(np.arange(out_size), taps), np.clip(idx, 0, in_size - 1).ravel()), w.ravel())
    return mat


def resize_float(arr: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Separable bicubic resize of an ``(H, W, C)`` float array, no rounding."""
    h, w = arr.shape[:2]
    wy = resize_weights(h, out_h)
    wx = resize_weights(w, out_w)
    tmp = np.einsum("ih,hwc->iwc", wy, arr.astype(np.float64))
    return np.einsum("jw,iwc->ijc", wx, tmp)


def bicubic_resize(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    check_image(img)
    if out_w < 1 or out_h < 1:
        raise ValueError("output dims must be positive")
    if (out_h, out_w) == img.shape[:2]:
        return img.copy()
    out = resize_float(img, out_w, out_h)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def downscale(img: np.ndarray, scale: int) -> np.ndarray:
    """LR counterpart of an HR image (HR is mod-cropped first)."""
    img = mod_crop(img, scale)
    return bicubic_resize(img, img.shape[1] // scale, img.shape[0] // scale)
