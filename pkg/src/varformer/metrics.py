"""Fidelity metrics on [0, 1] images."""

from __future__ import annotations

import math

import numpy as np
import torch
from scipy import ndimage

from .errors import DomainError, ShapeError

PSNR_CAP = 100.0


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for unit-range images; identical inputs give ``PSNR_CAP``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def psnr_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable per-sample PSNR over all non-batch dims, capped like :func:`psnr`."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = (a - b).pow(2).flatten(1).mean(1)
    floor = 10.0 ** (-PSNR_CAP / 10.0)
    return -10.0 * torch.log10(mse.clamp_min(floor))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-windowed SSIM averaged over channels.

    Accepts ``(H, W)`` or ``(C, H, W)`` arrays in [0, 1]. Only window positions
    fully inside the image contribute.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ShapeError(f"expected (H, W) or (C, H, W), got {a.shape}")
    if min(a.shape[1:]) < window:
        raise DomainError(f"image side {min(a.shape[1:])} smaller than SSIM window {window}")
    g = _gaussian_window(window, sigma)
    pad = (window - 1) // 2
    c1, c2 = 0.01**2, 0.03**2

    def filt(x):
        y = ndimage.correlate1d(x, g, axis=0, mode="reflect")
        y = ndimage.correlate1d(y, g, axis=1, mode="reflect")
        return y[pad:-pad, pad:-pad]

    vals = []
    for x, y in zip(a, b):
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
