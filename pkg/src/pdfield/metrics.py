"""Image fidelity metrics for images with values in [0, 1]."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _check(img, gt) -> tuple[np.ndarray, np.ndarray]:
    img, gt = np.asarray(img, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if img.shape != gt.shape:
        raise ValueError(f"image shapes differ: {img.shape} vs {gt.shape}")
    return img, gt


def mse(img, gt) -> float:
    img, gt = _check(img, gt)
    return float(np.mean((img - gt) ** 2))


def psnr(img, gt) -> float:
    """``-10 log10(MSE)``; identical images give ``inf``."""
    err = mse(img, gt)
    return math.inf if err == 0.0 else -10.0 * math.log10(err)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering over the first two axes."""
    x = sliding_window_view(x, len(w), axis=0) @ w
    x = np.moveaxis(sliding_window_view(x, len(w), axis=1), -1, 0)
    return np.tensordot(w, x, axes=(0, 0))


def ssim(img, gt, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with a Gaussian window, averaged over channels.

    Images are (H, W) or (H, W, C) with data range 1.
    """
    img, gt = _check(img, gt)
    if img.ndim == 2:
        img, gt = img[..., None], gt[..., None]
    if min(img.shape[:2]) < window:
        raise ValueError(f"images must be at least {window}x{window} for SSIM")
    w = gaussian_window(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    mu_x, mu_y = _filter_valid(img, w), _filter_valid(gt, w)
    sxx = _filter_valid(img * img, w) - mu_x ** 2
    syy = _filter_valid(gt * gt, w) - mu_y ** 2
    sxy = _filter_valid(img * gt, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
