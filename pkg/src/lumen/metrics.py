"""Fidelity metrics and rate accounting."""

from __future__ import annotations

import math

import numpy as np
import scipy.ndimage

PSNR_CAP_DB = 100.0
MS_SSIM_DB_CAP = 100.0
MS_SSIM_MIN_SIZE = 160

_MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_K1, _K2 = 0.01, 0.03
_WINDOW = 11
_SIGMA = 1.5


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for (near-)identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))


def _gaussian_window() -> np.ndarray:
    half = (_WINDOW - 1) / 2.0
    xs = np.arange(_WINDOW) - half
    w = np.exp(-(xs**2) / (2.0 * _SIGMA**2))
    return w / w.sum()


_WIN1D = _gaussian_window()


def _filt(img: np.ndarray) -> np.ndarray:
    out = scipy.ndimage.correlate1d(img, _WIN1D, axis=-1, mode="reflect")
    return scipy.ndimage.correlate1d(out, _WIN1D, axis=-2, mode="reflect")


def _ssim_parts(a: np.ndarray, b: np.ndarray, peak: float) -> tuple[float, float]:
    c1 = (_K1 * peak) ** 2
    c2 = (_K2 * peak) ** 2
    mu_a = _filt(a)
    mu_b = _filt(b)
    var_a = _filt(a * a) - mu_a * mu_a
    var_b = _filt(b * b) - mu_b * mu_b
    cov = _filt(a * b) - mu_a * mu_b
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    return float((lum * cs).mean()), float(cs.mean())


def _halve(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    if h % 2 or w % 2:
        img = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(0, h % 2), (0, w % 2)], mode="edge")
        h, w = img.shape[-2:]
    shape = img.shape[:-2] + (h // 2, 2, w // 2, 2)
    return img.reshape(shape).mean(axis=(-3, -1))


def ms_ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Five-scale structural similarity with the canonical scale weights.

    Inputs are [..., H, W] arrays (leading channel dims averaged in); both
    dimensions must be at least MS_SSIM_MIN_SIZE so the coarsest scale still
    supports the 11-tap window.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    h, w = a.shape[-2:]
    if h < MS_SSIM_MIN_SIZE or w < MS_SSIM_MIN_SIZE:
        raise ValueError(
            f"images must be at least {MS_SSIM_MIN_SIZE}x{MS_SSIM_MIN_SIZE} "
            f"for multi-scale evaluation, got {h}x{w}"
        )
    levels = len(_MS_WEIGHTS)
    value = 1.0
    for level in range(levels):
        ssim_mean, cs_mean = _ssim_parts(a, b, peak)
        if level < levels - 1:
            value *= max(cs_mean, 0.0) ** _MS_WEIGHTS[level]
            a, b = _halve(a), _halve(b)
        else:
            value *= max(ssim_mean, 0.0) ** _MS_WEIGHTS[level]
    return float(value)


def ms_ssim_db(value: float) -> float:
    """Map similarity in [0, 1] to decibels; 1.0 saturates at the cap."""
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"similarity must be in [0, 1], got {value}")
    if value >= 1.0:
        return MS_SSIM_DB_CAP
    return min(MS_SSIM_DB_CAP, -10.0 * math.log10(1.0 - value))


def bpp(nbytes: int, orig_h: int, orig_w: int) -> float:
    """Bits per original pixel for a payload of ``nbytes`` bytes."""
    if orig_h < 1 or orig_w < 1:
        raise ValueError("image dimensions must be positive")
    if nbytes < 0:
        raise ValueError("byte count must be nonnegative")
    return 8.0 * nbytes / (orig_h * orig_w)
