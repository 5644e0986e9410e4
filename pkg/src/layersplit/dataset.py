"""Layered triplets: simulated placement of assets on backgrounds, captured
pair ingestion, mask dilation and JSON-lines manifests.

On-disk layout under a dataset root::

    data/{split}/{id}_comp.png
    data/{split}/{id}_bg.png
    data/{split}/{id}_fg.png      (simulated items only)
    data/{split}/{id}_mask.png
    manifest.jsonl
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import assets
from .imaging import (
    PngError,
    alpha_blend,
    as_mask,
    as_rgb,
    as_rgba,
    load_mask,
    load_png,
    quantize,
    save_png,
    transform_layer,
)


@dataclass
class LayeredTriplet:
    composite: np.ndarray
    background: np.ndarray
    foreground: np.ndarray | None
    object_mask: np.ndarray
    source: str = "simulated"
    meta: dict = field(default_factory=dict)

    @property
    def fg_supervised(self) -> bool:
        return self.foreground is not None


def make_triplet(bg, asset, object_mask, dx: float, dy: float, scale: float,
                 seed: int | None = None, quantize_fg: bool = False) -> LayeredTriplet:
    """Place an RGBA asset on ``bg`` and blend.

    The tight object mask goes through the same transform and is
    re-binarized at 0.5. With ``quantize_fg`` the placed foreground is
    snapped to the 8-bit grid before blending, so the triplet survives a
    PNG round trip up to the composite's own rounding.
    """
    bg, asset, object_mask = as_rgb(bg), as_rgba(asset), as_mask(object_mask)
    if asset.shape[:2] != bg.shape[:2] or object_mask.shape != bg.shape[:2]:
        raise ValueError(f"make_triplet: asset {asset.shape[:2]} / mask {object_mask.shape} "
                         f"do not match background {bg.shape[:2]}")
    fg = transform_layer(asset, dx, dy, scale)
    if quantize_fg:
        fg = quantize(fg)
    mask_layer = np.zeros(bg.shape[:2] + (4,))
    mask_layer[..., 3] = object_mask
    moved = transform_layer(mask_layer, dx, dy, scale)[..., 3]
    mask = (moved > 0.5).astype(np.float64)
    if not mask.any():
        raise ValueError(f"make_triplet: placement (dx={dx}, dy={dy}, scale={scale}) "
                         "moves the object entirely off the canvas")
    comp = alpha_blend(bg, fg)
    meta = {"dx": float(dx), "dy": float(dy), "scale": float(scale), "seed": seed}
    return LayeredTriplet(comp, bg, fg, mask, "simulated", meta)


def dilate_mask(mask, radius: float) -> np.ndarray:
    """Set every pixel within Euclidean distance ``radius`` of a set pixel."""
    if radius < 0:
        raise ValueError(f"dilate_mask: radius must be >= 0, got {radius}")
    m = as_mask(mask)
    if not m.any():
        return m.copy()
    dist = ndimage.distance_transform_edt(m == 0)
    return (dist <= radius).astype(np.float64)


def shadow_region(fg, object_mask, alpha_threshold: float = 0.05) -> np.ndarray:
    """Pixels carrying visual effect but not the object: ``(a > thr) & ~mask``."""
    fg = as_rgba(fg)
    return ((fg[..., 3] > alpha_threshold) & (np.asarray(object_mask) == 0)).astype(np.float64)


def gen_background(rng: np.random.Generator, canvas: tuple[int, int]) -> np.ndarray:
    """Smooth procedural backdrop: wall/floor split, gradients and a soft wave."""
    H, W = canvas
    yy, xx = np.mgrid[0:H, 0:W] / np.array([max(H - 1, 1), max(W - 1, 1)])[:, None, None]
    top, bottom, floor = rng.uniform(0.15, 0.9, size=(3, 3))
    horizon = rng.uniform(0.35, 0.7)
    sharp = rng.uniform(8, 20)
    w = 1.0 / (1.0 + np.exp(-sharp * (yy - horizon)))
    wall = top + (bottom - top) * yy[..., None]
    img = (1 - w[..., None]) * wall + w[..., None] * floor
    freq = rng.uniform(0.5, 2.0, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.06 * np.sin(2 * np.pi * (freq[0] * xx + freq[1] * yy) + phase)
    return quantize(img + wave[..., None])


# ---------------------------------------------------------------- manifest

@dataclass
class DatasetManifest:
    records: list[dict] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)
    root: str = "."

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> list[str]:
        return [r["id"] for r in self.records]

    def by_source(self, source: str) -> list[dict]:
        return [r for r in self.records if r["source"] == source]

    def path(self, record: dict, key: str) -> Path:
        return Path(self.root) / record["paths"][key]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "DatasetManifest":
        records = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
        ids = [r["id"] for r in records]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{path}: duplicate record ids")
        return cls(records, [], str(Path(path).parent))

    def load(self, record: dict) -> LayeredTriplet:
        comp = as_rgb(load_png(self.path(record, "comp")))
        bg = as_rgb(load_png(self.path(record, "bg")))
        fg = as_rgba(load_png(self.path(record, "fg"))) if "fg" in record["paths"] else None
        mask = load_mask(self.path(record, "mask"))
        return LayeredTriplet(comp, bg, fg, mask, record["source"], dict(record.get("placement") or {}))


_GROUP = re.compile(r"^(?P<id>.+)_(?P<kind>comp|bg|mask)\.png$")


def ingest_pairs(directory, split: str = "train", root=None) -> DatasetManifest:
    """Collect ``{id}_comp.png``/``{id}_bg.png``/``{id}_mask.png`` groups.

    Incomplete groups and groups whose members disagree in size are skipped
    and listed in ``diagnostics``. Paths are stored relative to ``root``
    (default: ``directory``).
    """
    directory = Path(directory)
    root = Path(root) if root is not None else directory
    groups: dict[str, dict[str, Path]] = {}
    for name in sorted(os.listdir(directory)):
        m = _GROUP.match(name)
        if m:
            groups.setdefault(m["id"], {})[m["kind"]] = directory / name
    manifest = DatasetManifest(root=str(root))
    for gid in sorted(groups):
        members = groups[gid]
        missing = sorted({"comp", "bg", "mask"} - set(members))
        if missing:
            manifest.diagnostics.append(f"{gid}: missing {', '.join(missing)}")
            continue
        try:
            shapes = {k: load_png(p).shape[:2] for k, p in members.items()}
        except PngError as exc:
            manifest.diagnostics.append(f"{gid}: unreadable ({exc})")
            continue
        if len(set(shapes.values())) != 1:
            manifest.diagnostics.append(f"{gid}: dimension mismatch {shapes}")
            continue
        manifest.records.append({
            "id": gid,
            "source": "captured",
            "split": split,
            "paths": {k: os.path.relpath(p, root) for k, p in sorted(members.items())},
            "placement": None,
        })
    return manifest


@dataclass
class DatasetConfig:
    n_simulated: int = 16
    n_captured: int = 0
    canvas: tuple[int, int] = (32, 32)
    seed: int = 0
    sim_ratio: float = 0.8
    split: str = "train"
    dx_range: tuple[float, float] = (-0.25, 0.25)
    dy_range: tuple[float, float] = (-0.25, 0.25)
    scale_range: tuple[float, float] = (0.5, 1.5)
    captured_dir: str | None = None


def simulate_item(rng: np.random.Generator, cfg: DatasetConfig) -> LayeredTriplet:
    canvas = tuple(cfg.canvas)
    bg = gen_background(rng, canvas)
    for _ in range(100):
        layer, obj, sp = assets.random_asset(rng, canvas)
        dx = rng.uniform(*cfg.dx_range)
        dy = rng.uniform(*cfg.dy_range)
        scale = rng.uniform(*cfg.scale_range)
        try:
            trip = make_triplet(bg, quantize(layer), obj.object_mask, dx, dy, scale, quantize_fg=True)
        except ValueError:
            continue
        trip.meta["asset"] = obj.provenance
        trip.meta["shadow"] = asdict(sp)
        return trip
    raise RuntimeError("could not place an asset on the canvas after 100 attempts")


def write_triplet(trip: LayeredTriplet, root: Path, split: str, item_id: str) -> dict:
    d = root / "data" / split
    d.mkdir(parents=True, exist_ok=True)
    paths = {"comp": d / f"{item_id}_comp.png", "bg": d / f"{item_id}_bg.png", "mask": d / f"{item_id}_mask.png"}
    save_png(trip.composite, paths["comp"])
    save_png(trip.background, paths["bg"])
    save_png(trip.object_mask, paths["mask"])
    if trip.foreground is not None:
        paths["fg"] = d / f"{item_id}_fg.png"
        save_png(trip.foreground, paths["fg"])
    return {
        "id": item_id,
        "source": trip.source,
        "split": split,
        "paths": {k: os.path.relpath(p, root) for k, p in sorted(paths.items())},
        # stored in its JSON form so the in-memory record equals the parsed one
        "placement": json.loads(json.dumps(trip.meta)) if trip.meta else None,
    }


def build_dataset(cfg: DatasetConfig, out_dir) -> DatasetManifest:
    """Generate simulated triplets (and synthetic captured stand-ins) on disk.

    Captured stand-ins are simulated scenes stored without their foreground
    layer, matching the camera-captured pair format. A ``captured_dir`` is
    ingested with :func:`ingest_pairs` and merged.
    """
    if not 0.0 <= cfg.sim_ratio <= 1.0:
        raise ValueError(f"sim_ratio must lie in [0, 1], got {cfg.sim_ratio}")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(root=str(root))
    for i in range(cfg.n_simulated):
        trip = simulate_item(np.random.default_rng([cfg.seed, 0, i]), cfg)
        manifest.records.append(write_triplet(trip, root, cfg.split, f"sim{i:05d}"))
    for i in range(cfg.n_captured):
        trip = simulate_item(np.random.default_rng([cfg.seed, 1, i]), cfg)
        trip.foreground, trip.source = None, "captured"
        trip.meta = {}
        manifest.records.append(write_triplet(trip, root, cfg.split, f"cap{i:05d}"))
    if cfg.captured_dir:
        ingested = ingest_pairs(cfg.captured_dir, cfg.split, root=root)
        manifest.records.extend(ingested.records)
        manifest.diagnostics.extend(ingested.diagnostics)
    if cfg.sim_ratio < 1.0 and not manifest.by_source("captured"):
        raise ValueError("sim_ratio < 1 requires captured records, but none are available")
    manifest.records.sort(key=lambda r: r["id"])
    manifest.to_jsonl(root / "manifest.jsonl")
    return manifest


def mix_epoch(manifest: DatasetManifest, sim_ratio: float, n: int, seed: int) -> list[str]:
    """Deterministic stratified draw of ``n`` ids.

    Exactly ``round(sim_ratio * n)`` simulated ids; the rest captured. Each
    stratum is cycled through fresh permutations if it is smaller than its
    quota.
    """
    if not 0.0 <= sim_ratio <= 1.0:
        raise ValueError(f"sim_ratio must lie in [0, 1], got {sim_ratio}")
    n_sim = int(np.floor(sim_ratio * n + 0.5))
    n_cap = n - n_sim
    rng = np.random.default_rng(seed)
    out = []
    for source, quota in (("simulated", n_sim), ("captured", n_cap)):
        if quota == 0:
            continue
        pool = [r["id"] for r in manifest.by_source(source)]
        if not pool:
            raise ValueError(f"mix ratio needs {quota} {source} records but the manifest has none")
        picked: list[str] = []
        while len(picked) < quota:
            picked.extend(pool[k] for k in rng.permutation(len(pool)))
        out.extend(picked[:quota])
    return [out[k] for k in rng.permutation(len(out))]
