"""Procedural foreground objects with a synthetic shadow stored in alpha.

Object pixels are opaque with a one-pixel anti-aliased rim. The shadow is
translucent black, so blending it onto a background darkens it by
``(1 - alpha)`` per channel.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .imaging import as_rgba, over_composite, save_png, shift_image

SHAPES = ("disk", "box", "capsule", "polygon")
OBJECT_THRESHOLD = 0.5


@dataclass
class ObjectAsset:
    layer: np.ndarray
    object_mask: np.ndarray
    provenance: dict = field(default_factory=dict)


@dataclass
class ShadowParams:
    offset: tuple[int, int] = (4, 3)  # (dx, dy) in pixels
    blur_sigma: float = 1.5
    intensity: float = 0.6

    def __post_init__(self):
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"shadow intensity must lie in [0, 1], got {self.intensity}")
        if self.blur_sigma < 0:
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")


def _segment_distance(py, px, a, b):
    ay, ax = a
    by, bx = b
    vy, vx = by - ay, bx - ax
    t = ((py - ay) * vy + (px - ax) * vx) / max(vy * vy + vx * vx, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(py - (ay + t * vy), px - (ax + t * vx))


def convex_polygon_sdf(py, px, vertices) -> np.ndarray:
    """Min over edges of the signed distance to each edge line (positive inside).

    Exact inside a convex polygon; outside it under-estimates the distance,
    which only affects the anti-aliased rim.
    """
    v = np.asarray(vertices, dtype=np.float64)
    n = len(v)
    area2 = sum(v[i, 1] * v[(i + 1) % n, 0] - v[(i + 1) % n, 1] * v[i, 0] for i in range(n))
    orient = 1.0 if area2 > 0 else -1.0
    d = np.full(np.shape(py), np.inf)
    for i in range(n):
        (ay, ax), (by, bx) = v[i], v[(i + 1) % n]
        ey, ex = by - ay, bx - ax
        length = np.hypot(ey, ex)
        # cross of edge with (p - a); positive on the interior side for CCW (x, y) order
        side = orient * (ex * (py - ay) - ey * (px - ax)) / length
        d = np.minimum(d, side)
    return d


def shape_sdf(shape: str, size_px: float, canvas: tuple[int, int], rng: np.random.Generator):
    """Signed distance field (pixels, positive inside) and shape parameters."""
    H, W = canvas
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    py, px = np.mgrid[0:H, 0:W].astype(np.float64)
    r = float(size_px)
    if shape == "disk":
        return r - np.hypot(py - cy, px - cx), {"radius": r}
    if shape == "box":
        hh = r * rng.uniform(0.5, 1.0)
        hw = r * rng.uniform(0.5, 1.0)
        d = np.minimum(hh - np.abs(py - cy), hw - np.abs(px - cx))
        return d, {"half_height": hh, "half_width": hw}
    if shape == "capsule":
        theta = rng.uniform(0, np.pi)
        radius = r * rng.uniform(0.3, 0.5)
        half = r - radius
        a = (cy - half * np.sin(theta), cx - half * np.cos(theta))
        b = (cy + half * np.sin(theta), cx + half * np.cos(theta))
        return radius - _segment_distance(py, px, a, b), {"a": a, "b": b, "radius": radius}
    if shape == "polygon":
        n = int(rng.integers(3, 7))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        verts = np.stack([cy + r * np.sin(angles), cx + r * np.cos(angles)], axis=1)
        return convex_polygon_sdf(py, px, verts), {"vertices": verts.tolist()}
    raise ValueError(f"unknown shape {shape!r}; expected one of {SHAPES}")


def gen_object(shape: str, size_px: float, color, seed: int, canvas: tuple[int, int] = (32, 32)) -> ObjectAsset:
    """Rasterize one procedural object centred on the canvas.

    ``size_px`` is the half-extent (radius for disks). Alpha is
    ``clip(sdf + 0.5, 0, 1)``: 1 inside, a one-pixel ramp across the edge.
    """
    H, W = canvas
    if size_px <= 0 or 2 * size_px > min(H, W):
        raise ValueError(f"object of half-size {size_px} does not fit a {H}x{W} canvas")
    rng = np.random.default_rng(seed)
    sdf, params = shape_sdf(shape, size_px, canvas, rng)
    alpha = np.clip(sdf + 0.5, 0.0, 1.0)
    rgb = np.broadcast_to(np.asarray(color, dtype=np.float64).reshape(3), (H, W, 3))
    # flat colour with a mild seeded shading ramp so objects are not textureless
    ramp = rng.uniform(-0.15, 0.15) * (np.linspace(-1, 1, H)[:, None, None])
    rgb = np.clip(rgb + ramp, 0.0, 1.0) * (alpha[..., None] > 0)
    layer = np.concatenate([rgb, alpha[..., None]], axis=-1)
    mask = (alpha > OBJECT_THRESHOLD).astype(np.float64)
    prov = {"shape": shape, "size_px": float(size_px), "color": [float(c) for c in np.ravel(color)],
            "seed": int(seed), "canvas": [H, W], "params": params}
    return ObjectAsset(layer, mask, prov)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur truncated at 3 sigma, zero padding."""
    if sigma <= 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(img, k, axis=0, mode="constant")
    return ndimage.correlate1d(out, k, axis=1, mode="constant")


def synth_shadow(obj: ObjectAsset, p: ShadowParams) -> np.ndarray:
    """Shadow layer: silhouette shifted by ``offset``, blurred, scaled by intensity.

    Colour is black. Shadow alpha is removed wherever the object itself is
    fully opaque.
    """
    alpha = obj.layer[..., 3]
    dx, dy = (int(round(v)) for v in p.offset)
    sil = shift_image(alpha[..., None], dy, dx)[..., 0]
    a = np.clip(p.intensity * gaussian_blur(sil, p.blur_sigma), 0.0, p.intensity)
    a[alpha >= 1.0] = 0.0
    return np.concatenate([np.zeros(alpha.shape + (3,)), a[..., None]], axis=-1)


def compose_asset(obj: ObjectAsset, shadow) -> np.ndarray:
    """Object over its shadow: the finished RGBA foreground template."""
    return over_composite(obj.layer, as_rgba(shadow))


def save_asset(path_stem, asset_layer: np.ndarray, obj: ObjectAsset, shadow: ShadowParams | None) -> None:
    """Write ``<stem>.png`` plus a ``<stem>.json`` sidecar with generator settings."""
    save_png(asset_layer, f"{path_stem}.png")
    record = {"object": obj.provenance, "shadow": asdict(shadow) if shadow else None}
    with open(f"{path_stem}.json", "w") as fh:
        json.dump(record, fh, indent=2, default=float)


def random_asset(rng: np.random.Generator, canvas: tuple[int, int]) -> tuple[np.ndarray, ObjectAsset, ShadowParams]:
    """Sample shape, colour and shadow, returning ``(rgba_layer, object, shadow)``."""
    H, W = canvas
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    size = float(rng.uniform(0.18, 0.3) * min(H, W))
    color = rng.uniform(0.1, 0.95, size=3)
    obj = gen_object(shape, size, color, int(rng.integers(2**31)), canvas)
    sp = ShadowParams(
        offset=(int(rng.integers(-5, 6)), int(rng.integers(2, 6))),
        blur_sigma=float(rng.uniform(0.5, 2.0)),
        intensity=float(rng.uniform(0.35, 0.75)),
    )
    return compose_asset(obj, synth_shadow(obj, sp)), obj, sp
