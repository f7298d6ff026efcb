"""Plain image containers, colour conversion, quality metrics and PNG I/O.

Images are ``numpy`` arrays of shape ``(3, H, W)`` holding intensities in
``[0, 1]`` (channel-major). Nothing in here records gradients; the
differentiable counterparts live in :mod:`uwadv.autodiff`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

CHANNELS = 3

# BT.601 analog form. Shared with the differentiable colour transform.
RGB_TO_YUV = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.492 * 0.299, -0.492 * 0.587, 0.492 * (1.0 - 0.114)],
        [0.877 * (1.0 - 0.299), -0.877 * 0.587, -0.877 * 0.114],
    ],
    dtype=np.float64,
)
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class ImageError(ValueError):
    """Raised for malformed images or mismatched image pairs."""


@dataclass(frozen=True)
class MetricValue:
    """A PSNR (dB) or SSIM score. ``infinite`` marks PSNR of identical images."""

    kind: str
    value: float
    infinite: bool = False

    def __float__(self) -> float:
        return math.inf if self.infinite else self.value

    def to_csv(self) -> str:
        return "inf" if self.infinite else repr(self.value)


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate the image invariants and return the array unchanged."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != CHANNELS:
        raise ImageError(f"{name} must have shape (3, H, W), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ImageError(f"{name} contains non-finite values")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ImageError(f"{name} has values outside [0, 1]")
    return img


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ImageError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> MetricValue:
    """Peak signal-to-noise ratio with peak 1.0, in dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return MetricValue("PSNR", math.inf, infinite=True)
    return MetricValue("PSNR", 10.0 * math.log10(1.0 / mse))


def gaussian_kernel1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation over the last two axes, keeping only full windows
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ g


def ssim(a: np.ndarray, b: np.ndarray) -> MetricValue:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.

    Uses the Wang et al. constants (K1=0.01, K2=0.03, L=1) and population
    statistics. Windows that would need padding are dropped.
    """
    a, b = _check_pair(a, b)
    if a.ndim != 3:
        raise ImageError(f"expected (C, H, W) images, got {a.shape}")
    if a.shape[1] < SSIM_WINDOW or a.shape[2] < SSIM_WINDOW:
        raise ImageError(
            f"image {a.shape[1]}x{a.shape[2]} is smaller than the "
            f"{SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    g = gaussian_kernel1d()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    per_channel = (num / den).mean(axis=(-2, -1))
    value = float(np.clip(per_channel.mean(), -1.0, 1.0))
    return MetricValue("SSIM", value)


def rgb_to_yuv(img: np.ndarray) -> np.ndarray:
    """RGB -> (Y, U, V). U and V are signed and not range-limited."""
    img = np.asarray(img)
    out = np.tensordot(RGB_TO_YUV, img.astype(np.float64), axes=([1], [0]))
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float64)


def yuv_to_rgb(t: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`rgb_to_yuv`. No clamping."""
    t = np.asarray(t)
    out = np.tensordot(YUV_TO_RGB, t.astype(np.float64), axes=([1], [0]))
    return out.astype(t.dtype if t.dtype.kind == "f" else np.float64)


def quantize(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] intensities to bytes with round-half-even."""
    return np.rint(np.asarray(img, dtype=np.float64) * 255.0).astype(np.uint8)


def histogram256(img: np.ndarray) -> np.ndarray:
    """Per-channel 256-bin counts of ``round(v * 255)``; shape (3, 256)."""
    img = check_image(img)
    q = quantize(img).reshape(img.shape[0], -1)
    return np.stack([np.bincount(ch, minlength=256) for ch in q]).astype(np.int64)


def clamp01(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if not np.all(np.isfinite(img)):
        raise ImageError("cannot clamp non-finite values")
    return np.clip(img, 0.0, 1.0)


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit RGB PNG as a float32 (3, H, W) array."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise ImageError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except ImageError:
        raise
    except Exception as exc:  # PIL raises a zoo of decode errors
        raise ImageError(f"{path}: cannot decode image ({exc})") from exc
    return (arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def save_image(img: np.ndarray, path: str | Path) -> None:
    img = check_image(img)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(quantize(img).transpose(1, 2, 0)).save(path, format="PNG")
