"""Image arrays, straight-alpha compositing, layer edits and 8-bit PNG I/O.

Images are plain float64 numpy arrays: ``(H, W, 3)`` for RGB, ``(H, W, 4)``
for straight (non-premultiplied) RGBA and ``(H, W)`` with values in {0, 1}
for binary masks. Values are not clamped by the compositing functions; only
:func:`save_png` and :func:`recolor_layer` clamp.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image, UnidentifiedImageError


class PngError(IOError):
    """Raised when a PNG cannot be decoded or written."""


def _check(arr, channels: int | None, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if channels is None:
        if arr.ndim != 2:
            raise ValueError(f"{name}: expected (H, W) array, got shape {arr.shape}")
    elif arr.ndim != 3 or arr.shape[2] != channels:
        raise ValueError(f"{name}: expected (H, W, {channels}) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite values")
    return arr


def as_rgb(arr) -> np.ndarray:
    return _check(arr, 3, "rgb image")


def as_rgba(arr) -> np.ndarray:
    return _check(arr, 4, "rgba image")


def as_mask(arr) -> np.ndarray:
    m = _check(arr, None, "mask")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask: values must be exactly 0 or 1")
    return m


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap values to the 8-bit grid ``k / 255`` (clamping to [0, 1])."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _same_hw(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"{op}: dimension mismatch {a.shape[:2]} vs {b.shape[:2]}")


def alpha_blend(bg, fg) -> np.ndarray:
    """Composite a straight-alpha RGBA layer over an RGB background.

    ``out = a * fg_rgb + (1 - a) * bg`` per pixel and channel, so pixels
    with ``a == 0`` reproduce ``bg`` exactly.
    """
    bg, fg = as_rgb(bg), as_rgba(fg)
    _same_hw(bg, fg, "alpha_blend")
    a = fg[..., 3:4]
    return a * fg[..., :3] + (1.0 - a) * bg


def over_composite(top, bottom) -> np.ndarray:
    """Source-over of two straight-alpha RGBA layers.

    Where the resulting alpha is zero the colour is set to 0.
    """
    top, bottom = as_rgba(top), as_rgba(bottom)
    _same_hw(top, bottom, "over_composite")
    at, ab = top[..., 3:4], bottom[..., 3:4]
    a_out = at + ab * (1.0 - at)
    num = at * top[..., :3] + ab * (1.0 - at) * bottom[..., :3]
    safe = np.where(a_out > 0, a_out, 1.0)
    rgb = np.where(a_out > 0, num / safe, 0.0)
    return np.concatenate([rgb, a_out], axis=-1)


def bounding_box(alpha: np.ndarray, threshold: float = 0.0) -> tuple[int, int, int, int] | None:
    """Inclusive ``(y0, y1, x0, x1)`` of pixels with ``alpha > threshold``, or None."""
    ys, xs = np.nonzero(alpha > threshold)
    if ys.size == 0:
        return None
    return int(ys.min()), int(ys.max()), int(xs.min()), int(xs.max())


def round_half_away(v: float) -> int:
    return int(np.sign(v) * np.floor(abs(v) + 0.5))


def shift_image(img: np.ndarray, sy: int, sx: int) -> np.ndarray:
    """Integer translation with zero fill; content leaving the canvas is dropped."""
    out = np.zeros_like(img)
    H, W = img.shape[:2]
    if abs(sy) >= H or abs(sx) >= W:
        return out
    dst_y = slice(max(sy, 0), H + min(sy, 0))
    src_y = slice(max(-sy, 0), H + min(-sy, 0))
    dst_x = slice(max(sx, 0), W + min(sx, 0))
    src_x = slice(max(-sx, 0), W + min(-sx, 0))
    out[dst_y, dst_x] = img[src_y, src_x]
    return out


def _bilinear_zoom(img: np.ndarray, scale: float, cy: float, cx: float) -> np.ndarray:
    H, W = img.shape[:2]
    ys = cy + (np.arange(H) - cy) / scale
    xs = cx + (np.arange(W) - cx) / scale
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)))

    def tap(yi, xi):
        yi = np.clip(yi + 1, 0, H + 1)
        xi = np.clip(xi + 1, 0, W + 1)
        return padded[yi[:, None], xi[None, :]]

    return (
        (1 - wy) * (1 - wx) * tap(y0, x0)
        + (1 - wy) * wx * tap(y0, x0 + 1)
        + wy * (1 - wx) * tap(y0 + 1, x0)
        + wy * wx * tap(y0 + 1, x0 + 1)
    )


def scale_about_center(img: np.ndarray, scale: float, center: tuple[float, float]) -> np.ndarray:
    """Bilinear zoom of a multi-channel image about ``center`` (y, x); zero outside."""
    return _bilinear_zoom(img, scale, center[0], center[1])


def transform_layer(fg, dx: float, dy: float, scale: float) -> np.ndarray:
    """Scale an RGBA layer about its bounding-box centre, then translate it.

    ``dx`` and ``dy`` are fractions of the width and height; the shift is
    rounded to whole pixels. Resampling is done on premultiplied colour so
    transparent pixels do not bleed into the edge. ``scale == 1`` skips
    resampling entirely.
    """
    fg = as_rgba(fg)
    if not scale > 0:
        raise ValueError(f"transform_layer: scale must be > 0, got {scale}")
    H, W = fg.shape[:2]
    out = fg
    if scale != 1.0:
        box = bounding_box(fg[..., 3])
        if box is not None:
            y0, y1, x0, x1 = box
            prem = np.concatenate([fg[..., :3] * fg[..., 3:4], fg[..., 3:4]], axis=-1)
            z = scale_about_center(prem, scale, ((y0 + y1) / 2.0, (x0 + x1) / 2.0))
            a = np.clip(z[..., 3:4], 0.0, 1.0)
            safe = np.where(a > 0, a, 1.0)
            rgb = np.where(a > 0, np.clip(z[..., :3] / safe, 0.0, 1.0), 0.0)
            out = np.concatenate([rgb, a], axis=-1)
    sx, sy = round_half_away(dx * W), round_half_away(dy * H)
    if sx == 0 and sy == 0:
        return out.copy()
    return shift_image(out, sy, sx)


def recolor_layer(fg, gains) -> np.ndarray:
    """Multiply RGB by per-channel gains and clamp to [0, 1]; alpha untouched."""
    fg = as_rgba(fg)
    gains = np.asarray(gains, dtype=np.float64).reshape(3)
    if np.any(gains < 0):
        raise ValueError(f"recolor_layer: gains must be >= 0, got {gains.tolist()}")
    out = fg.copy()
    out[..., :3] = np.clip(fg[..., :3] * gains, 0.0, 1.0)
    return out


# ---------------------------------------------------------------- PNG

def save_png(image, path) -> None:
    """Write an ``(H, W)``, ``(H, W, 3)`` or ``(H, W, 4)`` float image as 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        mode = "L"
    elif arr.ndim == 3 and arr.shape[2] in (3, 4):
        mode = "RGB" if arr.shape[2] == 3 else "RGBA"
    else:
        raise ValueError(f"save_png: unsupported shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("save_png: non-finite values")
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(u8, mode=mode).save(os.fspath(path), format="PNG")
    except OSError as exc:
        raise PngError(f"cannot write {path}: {exc}") from exc


def load_png(path) -> np.ndarray:
    """Read an 8-bit PNG as float64 in [0, 1].

    Grayscale and palette images come back as RGB; anything carrying
    transparency (RGBA, LA, palette with tRNS) comes back as RGBA.
    """
    try:
        with Image.open(os.fspath(path)) as im:
            if im.format != "PNG":
                raise PngError(f"{path}: not a PNG file (format {im.format})")
            im.load()
            mode = im.mode
            if mode in ("RGB", "RGBA"):
                conv = im
            elif mode in ("L", "1"):
                conv = im.convert("RGB")
            elif mode in ("LA", "PA"):
                conv = im.convert("RGBA")
            elif mode == "P":
                conv = im.convert("RGBA" if "transparency" in im.info else "RGB")
            else:
                raise PngError(f"{path}: unsupported PNG mode {mode}")
            u8 = np.asarray(conv, dtype=np.uint8).copy()
    except PngError:
        raise
    except (OSError, SyntaxError, ValueError, UnidentifiedImageError) as exc:
        raise PngError(f"cannot read {path}: {exc}") from exc
    return u8.astype(np.float64) / 255.0


def load_mask(path) -> np.ndarray:
    """Read a PNG and binarize its first channel at 0.5."""
    img = load_png(path)
    return (img[..., 0] > 0.5).astype(np.float64)
