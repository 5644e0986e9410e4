"""PSNR and SSIM with optional pixel masks.

Images are float arrays in [0, 1] with peak value 1.0. SSIM uses an
11x11 Gaussian window (sigma 1.5) with periodic boundaries, so the SSIM
map has one value per pixel and both metrics are unchanged when the two
images are rolled by the same offset.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W) or (H, W, C) images, got {a.shape}")
    return a, b


def _mask(mask, hw) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask)
    if m.shape != tuple(hw):
        raise ValueError(f"mask shape {m.shape} does not match image {tuple(hw)}")
    m = m.astype(bool)
    if not m.any():
        raise ValueError("mask selects no pixels")
    return m


def mse(a, b, mask=None) -> float:
    a, b = _pair(a, b)
    m = _mask(mask, a.shape[:2])
    d = (a - b) ** 2
    return float(d.mean() if m is None else d[m].mean())


def psnr(a, b, mask=None) -> float:
    """``10 log10(1 / MSE)``; ``inf`` for identical inputs.

    With a mask, the MSE runs over the selected pixels' channels only.
    """
    err = mse(a, b, mask)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    out = correlate1d(img, taps, axis=0, mode="wrap")
    return correlate1d(out, taps, axis=1, mode="wrap")


def ssim_map(a, b, size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
             k1: float = SSIM_K1, k2: float = SSIM_K2) -> np.ndarray:
    """Per-pixel, per-channel SSIM ``(H, W, C)``."""
    a, b = _pair(a, b)
    H, W = a.shape[:2]
    if H < size or W < size:
        raise ValueError(f"images {H}x{W} are smaller than the {size}x{size} SSIM window")
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    taps = gaussian_window(size, sigma)
    out = np.empty_like(a)
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter(x, taps), _filter(y, taps)
        vx = _filter(x * x, taps) - mx * mx
        vy = _filter(y * y, taps) - my * my
        cxy = _filter(x * y, taps) - mx * my
        out[..., ch] = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return out


def ssim(a, b, mask=None) -> float:
    """Mean SSIM over channels, restricted to masked pixels when a mask is given."""
    smap = ssim_map(a, b)
    m = _mask(mask, smap.shape[:2])
    # every channel has the same pixel count, so one mean equals the mean of channel means
    return float(smap.mean() if m is None else smap[m].mean())
