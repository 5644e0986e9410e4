"""Decomposition quality reports and the random re-composition protocol.

Predictions live in one directory as ``{id}_bg.png`` (RGB) and
``{id}_fg.png`` (RGBA), keyed by manifest id. ``evaluate`` scores

* the predicted background against the ground-truth background,
* the recomposite ``alpha_blend(pred_bg, pred_fg)`` against the input composite,
* the predicted background restricted to the shadow region
  ``(fg alpha > 0.05) & ~object_mask`` (simulated items only).

Infinite PSNR values are stored as ``null`` with the metric name listed
under ``infinite`` and left out of the aggregate means.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .dataset import DatasetManifest, dilate_mask, shadow_region
from .imaging import PngError, alpha_blend, as_rgb, as_rgba, load_png, save_png, transform_layer

SCHEMA_VERSION = 1
METRICS = ("psnr_bg", "psnr_comp", "ssim_bg", "ssim_comp", "masked_psnr", "masked_ssim", "region_psnr_bg")
RESERVED = ("lpips", "fid", "clip_fid")

DX_RANGE = (-0.3, 0.3)
DY_RANGE = (-0.3, 0.3)
SCALE_RANGE = (0.5, 1.5)


@dataclass
class EvalProtocol:
    shadow_alpha_threshold: float = 0.05
    dilation_radius: int = 10
    recomposition_seed: int | None = None
    recomposition_dir: str | None = None

    def metadata(self) -> dict:
        d = asdict(self)
        d["mask_source"] = f"shadow region: fg alpha > {self.shadow_alpha_threshold} and not object mask"
        d["region_mask"] = f"object mask dilated by {self.dilation_radius} px"
        d["ssim"] = {"window": metrics.SSIM_WINDOW, "sigma": metrics.SSIM_SIGMA, "k1": metrics.SSIM_K1,
                     "k2": metrics.SSIM_K2, "boundary": "periodic", "peak": 1.0}
        d["recomposition_ranges"] = {"dx": DX_RANGE, "dy": DY_RANGE, "scale": SCALE_RANGE}
        return d


# ---------------------------------------------------------------- random re-composition

def sample_recomposition(n: int, seed: int) -> np.ndarray:
    """``(n, 3)`` array of ``(dx, dy, scale)`` drawn uniformly from the protocol ranges."""
    rng = np.random.default_rng(seed)
    lo = np.array([DX_RANGE[0], DY_RANGE[0], SCALE_RANGE[0]])
    hi = np.array([DX_RANGE[1], DY_RANGE[1], SCALE_RANGE[1]])
    # uniform on [lo, hi); the closed upper end has probability zero
    return lo + (hi - lo) * rng.random((n, 3))


def recomposition_params(ids, seed: int) -> dict[str, tuple[float, float, float]]:
    """Per-id triples that depend only on the sorted id list and the seed.

    Every model variant evaluated on the same ids with the same seed gets
    identical adjustments.
    """
    ids = sorted(ids)
    draws = sample_recomposition(len(ids), seed)
    return {i: tuple(float(v) for v in row) for i, row in zip(ids, draws)}


def recompose(bg, fg, dx: float = 0.0, dy: float = 0.0, scale: float = 1.0) -> np.ndarray:
    return alpha_blend(as_rgb(bg), transform_layer(as_rgba(fg), dx, dy, scale))


def random_recomposition_eval(decompositions: dict, seed: int, out_dir=None, params=None,
                              ground_truth: dict | None = None) -> dict:
    """Move and resize each predicted foreground and blend it back.

    ``decompositions`` maps id to ``(bg, fg)``; a ``None`` fg skips the
    item with a diagnostic. ``params`` overrides the sampled triples.
    When ``ground_truth`` maps an id to its true ``(bg, fg)``, the same
    edit is applied to it and PSNR/SSIM against that reference are added.
    """
    ids = sorted(decompositions)
    params = dict(params) if params is not None else recomposition_params(ids, seed)
    records, diagnostics = [], []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for i in ids:
        bg, fg = decompositions[i]
        if fg is None:
            diagnostics.append(f"{i}: no foreground prediction, skipped")
            continue
        dx, dy, s = params[i]
        img = recompose(bg, fg, dx, dy, s)
        rec = {"id": i, "dx": dx, "dy": dy, "scale": s}
        if out is not None:
            path = out / f"{i}_recomp.png"
            save_png(img, path)
            rec["path"] = str(path)
        if ground_truth and i in ground_truth and ground_truth[i][1] is not None:
            ref = recompose(ground_truth[i][0], ground_truth[i][1], dx, dy, s)
            rec["psnr"] = _finite_or_none(metrics.psnr(img, ref))
            rec["ssim"] = metrics.ssim(img, ref)
        records.append(rec)
    return {"seed": seed, "records": records, "diagnostics": diagnostics}


# ---------------------------------------------------------------- report

def _finite_or_none(v: float):
    return None if math.isinf(v) else float(v)


def score_item(pred_bg, pred_fg, gt_bg, composite, object_mask, gt_fg=None,
               protocol: EvalProtocol | None = None) -> dict:
    """Metric dict for one item; infinite values become ``None`` and are
    named in ``infinite``; masked metrics are ``None`` when no shadow
    pixels exist or no ground-truth foreground is known."""
    p = protocol or EvalProtocol()
    recomp = alpha_blend(pred_bg, pred_fg)
    vals = {
        "psnr_bg": metrics.psnr(pred_bg, gt_bg),
        "psnr_comp": metrics.psnr(recomp, composite),
        "ssim_bg": metrics.ssim(pred_bg, gt_bg),
        "ssim_comp": metrics.ssim(recomp, composite),
        "masked_psnr": None,
        "masked_ssim": None,
    }
    notes = []
    if gt_fg is not None:
        shadow = shadow_region(gt_fg, object_mask, p.shadow_alpha_threshold) > 0
        if shadow.any():
            vals["masked_psnr"] = metrics.psnr(pred_bg, gt_bg, shadow)
            vals["masked_ssim"] = metrics.ssim(pred_bg, gt_bg, shadow)
        else:
            notes.append("empty shadow region")
    else:
        notes.append("no ground-truth foreground")
    region = dilate_mask(object_mask, p.dilation_radius) > 0
    vals["region_psnr_bg"] = metrics.psnr(pred_bg, gt_bg, region)
    infinite = sorted(k for k, v in vals.items() if v is not None and math.isinf(v))
    out = {k: (None if v is None else _finite_or_none(v)) for k, v in vals.items()}
    out["infinite"] = infinite
    out["notes"] = notes
    return out


def aggregate(per_item: list[dict]) -> dict:
    """Means over finite per-item values, plus finite/infinite counts."""
    agg = {}
    for k in METRICS:
        vals = [r[k] for r in per_item if r.get(k) is not None]
        n_inf = sum(1 for r in per_item if k in r.get("infinite", ()))
        agg[k] = {"mean": float(np.mean(vals)) if vals else None, "n": len(vals), "n_infinite": n_inf}
    for k in RESERVED:
        agg[k] = None
    return agg


def load_prediction(pred_dir, item_id: str):
    d = Path(pred_dir)
    bg = as_rgb(load_png(d / f"{item_id}_bg.png"))
    fg = as_rgba(load_png(d / f"{item_id}_fg.png"))
    return bg, fg


def evaluate(manifest: DatasetManifest, predictions, protocol: EvalProtocol | None = None) -> dict:
    """Score every manifest item that has predictions; list the rest.

    ``predictions`` is a directory of PNGs or a mapping from id to
    ``(bg, fg)`` arrays (which skips 8-bit quantization).
    """
    p = protocol or EvalProtocol()
    in_memory = isinstance(predictions, Mapping)
    per_item, missing, decomps, truth = [], [], {}, {}
    for rec in sorted(manifest.records, key=lambda r: r["id"]):
        i = rec["id"]
        try:
            if in_memory:
                if i not in predictions:
                    raise ValueError("no prediction")
                bg, fg = as_rgb(predictions[i][0]), as_rgba(predictions[i][1])
            else:
                bg, fg = load_prediction(predictions, i)
        except (PngError, ValueError) as exc:
            missing.append({"id": i, "reason": str(exc)})
            continue
        trip = manifest.load(rec)
        if bg.shape[:2] != trip.composite.shape[:2] or fg.shape[:2] != trip.composite.shape[:2]:
            missing.append({"id": i, "reason": f"prediction size {bg.shape[:2]} != {trip.composite.shape[:2]}"})
            continue
        row = {"id": i, "source": rec["source"]}
        row.update(score_item(bg, fg, trip.background, trip.composite, trip.object_mask, trip.foreground, p))
        per_item.append(row)
        decomps[i] = (bg, fg)
        truth[i] = (trip.background, trip.foreground)
    report = {
        "schema_version": SCHEMA_VERSION,
        "protocol": p.metadata(),
        "coverage": {"expected": len(manifest), "evaluated": len(per_item), "missing": missing},
        "per_item": per_item,
        "aggregate": aggregate(per_item) if per_item else None,
    }
    if p.recomposition_seed is not None and decomps:
        report["random_recomposition"] = random_recomposition_eval(
            decomps, p.recomposition_seed, p.recomposition_dir, ground_truth=truth)
    return report


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, allow_nan=False)


def read_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
