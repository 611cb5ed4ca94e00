"""Image fidelity metrics for [0, 1] images."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    image, reference = np.asarray(image, dtype=np.float64), np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch: {image.shape} vs {reference.shape}")
    mse = float(np.mean((image - reference) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    out = correlate1d(img, win, axis=0, mode="reflect")
    return correlate1d(out, win, axis=1, mode="reflect")


def ssim(image: np.ndarray, reference: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5); colour channels averaged.

    Borders within half a window of the edge are excluded from the mean.
    """
    image, reference = np.asarray(image, dtype=np.float64), np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch: {image.shape} vs {reference.shape}")
    if image.ndim == 3:
        return float(np.mean([ssim(image[..., c], reference[..., c], k1, k2) for c in range(image.shape[2])]))
    win = _gaussian_window()
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    mu_x, mu_y = _filter(image, win), _filter(reference, win)
    sxx = _filter(image * image, win) - mu_x**2
    syy = _filter(reference * reference, win) - mu_y**2
    sxy = _filter(image * reference, win) - mu_x * mu_y
    s = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))
    pad = (len(win) - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)
