"""PSNR, SSIM and albedo comparison helpers."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InvalidInputError
from .images import ImageBuffer

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = a.data if isinstance(a, ImageBuffer) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, ImageBuffer) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float, peak: float = 1.0) -> float:
    if err <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, float(-10.0 * np.log10(err / peak**2)))


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; identical images report the 99 dB cap."""
    return psnr_from_mse(mse(a, b), peak)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = len(w) // 2
    out = correlate1d(img, w, axis=0, mode="constant")
    out = correlate1d(out, w, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a, b, peak: float = 1.0) -> float:
    """Single-scale SSIM on the channel-mean luminance, 11x11 Gaussian window."""
    a, b = _pair(a, b)
    if a.ndim == 3:
        a, b = a.mean(axis=2), b.mean(axis=2)
    if min(a.shape) < SSIM_WINDOW:
        raise InvalidInputError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    w = gaussian_window()
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    saa = _filter_valid(a * a, w) - mu_a**2
    sbb = _filter_valid(b * b, w) - mu_b**2
    sab = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def standardize_albedo(pred, target) -> np.ndarray:
    """Scale each channel of ``pred`` by the least-squares global scalar onto ``target``."""
    p, t = _pair(pred, target)
    p2 = p.reshape(-1, p.shape[-1])
    t2 = t.reshape(-1, t.shape[-1])
    den = np.sum(p2 * p2, axis=0)
    scale = np.where(den > 0, np.sum(p2 * t2, axis=0) / np.where(den > 0, den, 1.0), 1.0)
    return p * scale


def albedo_mse(pred, target) -> float:
    """MSE after per-channel scalar standardization."""
    _, t = _pair(pred, target)
    return float(np.mean((standardize_albedo(pred, target) - t) ** 2))
