"""``layersplit`` command line: data generation, training, decomposition,
layer edits, evaluation and gradient checks.

Every subcommand resolves a YAML config (strict keys) with flag overrides,
stages its outputs in a scratch directory and moves them into place only
on success, and writes ``run.json`` describing the run. Failures print a
single JSON line ``{"error": {...}}`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
import time
from dataclasses import asdict, fields
from importlib import metadata
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import assets as assets_mod
from .checkpoint import CheckpointError
from .dataset import DatasetConfig, DatasetManifest, build_dataset
from .evaluation import EvalProtocol, evaluate, write_report
from .imaging import PngError, alpha_blend, as_rgb, as_rgba, load_mask, load_png, recolor_layer, save_png, transform_layer
from .model.denoiser import Denoiser, DenoiserConfig
from .model.sampling import decompose
from .model.schedule import make_schedule
from .training import TrainConfig, Trainer, TrainingData, TrainingDiverged, default_autoencoders, load_model

log = logging.getLogger("layersplit")

EXIT_RUNTIME, EXIT_USAGE, EXIT_INPUT, EXIT_CHECK = 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_RUNTIME, kind: str = "runtime_error"):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _usage(msg):
    return CliError(msg, EXIT_USAGE, "usage_error")


def _missing(msg):
    return CliError(msg, EXIT_INPUT, "missing_input")


# ---------------------------------------------------------------- config

def _section(cls, drop=()):
    return {f.name: copy.deepcopy(f.default) for f in fields(cls) if f.name not in drop}


def default_config() -> dict:
    data = _section(DatasetConfig, drop=("seed",))
    data.update(canvas=[32, 32], dx_range=[-0.25, 0.25], dy_range=[-0.25, 0.25], scale_range=[0.5, 1.5],
                sim_ratio=1.0)
    model = _section(DenoiserConfig)
    model["latent_hw"] = [8, 8]
    train = _section(TrainConfig, drop=("seed",))
    train["sim_ratio"] = 1.0
    ev = _section(EvalProtocol, drop=("recomposition_dir",))
    ev["recomposition_seed"] = 0
    return {
        "seed": 0,
        "assets": {"n": 8, "canvas": [32, 32]},
        "dataset": data,
        "autoencoder": {"factor": 4, "fit_steps": 1000},
        "model": model,
        "train": train,
        "sampling": {"steps": 50, "clip_x0": 3.0},
        "eval": ev,
    }


def merge_strict(base: dict, override: dict, where: str = "") -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        path = f"{where}.{k}" if where else k
        if k not in base:
            raise _usage(f"unknown config key: {path}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise _usage(f"config key {path} must be a mapping")
            out[k] = merge_strict(base[k], v, path)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    cfg = default_config()
    if path is None:
        return cfg
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise _missing(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise _usage(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise _usage(f"config {path} must be a mapping at top level")
    return merge_strict(cfg, doc)


def _set(cfg: dict, dotted: str, value) -> None:
    if value is None:
        return
    node = cfg
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node[p]
    node[leaf] = value


def dataset_config(cfg: dict) -> DatasetConfig:
    d = dict(cfg["dataset"])
    for k in ("canvas", "dx_range", "dy_range", "scale_range"):
        d[k] = tuple(d[k])
    return DatasetConfig(seed=int(cfg["seed"]), **d)


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict({**cfg["train"], "seed": int(cfg["seed"])})
    except (TypeError, ValueError) as exc:
        raise _usage(f"train config: {exc}") from exc


def denoiser_config(cfg: dict) -> DenoiserConfig:
    d = dict(cfg["model"])
    d["latent_hw"] = tuple(d["latent_hw"])
    return DenoiserConfig(**d)


# ---------------------------------------------------------------- provenance

def _digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _versions() -> dict:
    out = {"layersplit": __version__, "python": platform.python_version()}
    for dist in ("numpy", "scipy", "Pillow", "PyYAML"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


class Run:
    """Staging area for one invocation's outputs."""

    def __init__(self, command: str, cfg: dict, out: str | None, run_id: str | None, inputs: dict):
        self.command = command
        self.cfg = cfg
        self.inputs = {k: str(v) for k, v in inputs.items() if v is not None}
        for k, v in self.inputs.items():
            if not Path(v).exists():
                raise _missing(f"--{k.replace('_', '-')}: {v} does not exist")
        self.digests = {k: _digest(Path(v)) for k, v in self.inputs.items()}
        if out is None:
            key = json.dumps({"cmd": command, "cfg": cfg, "inputs": self.digests}, sort_keys=True)
            run_id = run_id or f"{command}-{hashlib.sha256(key.encode()).hexdigest()[:10]}"
            out = os.path.join("out", run_id)
        self.dest = Path(out)
        self.stage = self.dest.parent / f".{self.dest.name}.partial-{os.getpid()}"
        if self.stage.exists():
            shutil.rmtree(self.stage)
        self.stage.mkdir(parents=True)
        self.t0 = time.time()

    def path(self, name: str) -> Path:
        p = self.stage / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def commit(self, argv, extra: dict | None = None) -> Path:
        outputs = sorted(str(p.relative_to(self.stage)) for p in self.stage.rglob("*") if p.is_file())
        record = {
            "subcommand": self.command,
            "argv": list(argv),
            "config": self.cfg,
            "seed": self.cfg.get("seed"),
            "versions": _versions(),
            "inputs": {k: {"path": v, "sha256": self.digests[k]} for k, v in self.inputs.items()},
            "outputs": outputs,
            "elapsed_s": round(time.time() - self.t0, 3),
        }
        if extra:
            record.update(extra)
        with open(self.stage / "run.json", "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True, default=_jsonable)
        self.dest.mkdir(parents=True, exist_ok=True)
        for p in sorted(self.stage.rglob("*")):
            if p.is_file():
                target = self.dest / p.relative_to(self.stage)
                target.parent.mkdir(parents=True, exist_ok=True)
                os.replace(p, target)
        shutil.rmtree(self.stage, ignore_errors=True)
        return self.dest

    def abort(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


def _jsonable(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (tuple, Path)):
        return list(o) if isinstance(o, tuple) else str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------- subcommands

def cmd_gen_assets(args, cfg, run: Run) -> dict:
    a = cfg["assets"]
    canvas = tuple(a["canvas"])
    for i in range(int(a["n"])):
        rng = np.random.default_rng([int(cfg["seed"]), 2, i])
        layer, obj, sp = assets_mod.random_asset(rng, canvas)
        assets_mod.save_asset(run.path(f"assets/asset{i:05d}"), layer, obj, sp)
    return {"n_assets": int(a["n"])}


def cmd_gen_dataset(args, cfg, run: Run) -> dict:
    try:
        manifest = build_dataset(dataset_config(cfg), run.stage)
    except ValueError as exc:
        raise _usage(str(exc)) from exc
    return {"n_items": len(manifest), "diagnostics": manifest.diagnostics}


def _manifest(path) -> DatasetManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    if not p.exists():
        raise _missing(f"no manifest at {p}")
    return DatasetManifest.from_jsonl(p)


def cmd_train(args, cfg, run: Run) -> dict:
    manifest = _manifest(args.dataset)
    if len(manifest) == 0:
        raise _usage("dataset has no items")
    tc = train_config(cfg)
    dc = denoiser_config(cfg)
    triplets = [manifest.load(r) for r in manifest.records]
    if args.resume:
        model, aes, schedule, _ = load_model(args.resume)
    else:
        ae_cfg = cfg["autoencoder"]
        aes = default_autoencoders(triplets, dc.latent_channels, int(ae_cfg["factor"]), seed=int(cfg["seed"]),
                                   steps=int(ae_cfg["fit_steps"]))
        model = Denoiser(dc, seed=int(cfg["seed"]))
        schedule = make_schedule(tc.schedule, tc.T)
    data = TrainingData.from_triplets(triplets, aes, manifest.ids())
    trainer = Trainer(model, aes, schedule, tc, data)
    if args.resume:
        trainer.load(args.resume)
    p0 = trainer.probe()
    remaining = max(tc.steps - trainer.step_count, 0)
    try:
        trainer.run(remaining, log_path=run.path("train.log.jsonl"),
                    checkpoint_dir=run.path("checkpoints/.keep").parent if tc.checkpoint_every else None)
    except TrainingDiverged as exc:
        raise CliError(str(exc), EXIT_RUNTIME, "training_diverged") from exc
    trainer.save(run.path("model.ckpt"))
    p1 = trainer.probe()
    return {"steps": trainer.step_count, "probe_start": {"l_dm": p0[0], "l_consist": p0[1]},
            "probe_end": {"l_dm": p1[0], "l_consist": p1[1]}, "parameters": trainer.model.num_parameters()}


def _load_checkpoint(path):
    try:
        return load_model(path)
    except (CheckpointError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", EXIT_INPUT, "bad_checkpoint") from exc


def _decompose_one(model, aes, schedule, comp, mask, cfg, seed):
    s = cfg["sampling"]
    bg, fg = decompose(model, aes, comp, mask, schedule, int(s["steps"]), seed,
                       None if s["clip_x0"] is None else float(s["clip_x0"]))
    bg = np.clip(bg, 0.0, 1.0)
    fg = np.clip(fg, 0.0, 1.0)
    return bg, fg


def cmd_decompose(args, cfg, run: Run) -> dict:
    model, aes, schedule, _ = _load_checkpoint(args.checkpoint)
    comp = as_rgb(load_png(args.image))
    mask = load_mask(args.mask)
    if mask.shape != comp.shape[:2]:
        raise _usage(f"mask {mask.shape} does not match image {comp.shape[:2]}")
    bg, fg = _decompose_one(model, aes, schedule, comp, mask, cfg, int(cfg["seed"]))
    save_png(bg, run.path("bg.png"))
    save_png(fg, run.path("fg.png"))
    save_png(alpha_blend(bg, fg), run.path("recomposite.png"))
    return {}


def _gains(text):
    if text is None:
        return None
    try:
        vals = [float(v) for v in str(text).split(",")]
    except ValueError as exc:
        raise _usage(f"--gains expects three comma-separated numbers, got {text!r}") from exc
    if len(vals) != 3:
        raise _usage(f"--gains expects three comma-separated numbers, got {text!r}")
    return vals


def cmd_edit(args, cfg, run: Run) -> dict:
    fg = as_rgba(load_png(args.fg))
    gains = _gains(args.gains)
    try:
        if gains is not None:
            fg = recolor_layer(fg, gains)
        fg = transform_layer(fg, args.dx, args.dy, args.scale)
    except ValueError as exc:
        raise _usage(str(exc)) from exc
    save_png(fg, run.path("fg.png"))
    if args.bg:
        bg = as_rgb(load_png(args.bg))
        save_png(alpha_blend(bg, fg), run.path("recomposite.png"))
    return {"edit": {"dx": args.dx, "dy": args.dy, "scale": args.scale, "gains": gains}}


def cmd_recompose(args, cfg, run: Run) -> dict:
    bg = as_rgb(load_png(args.bg))
    fg = as_rgba(load_png(args.fg))
    save_png(alpha_blend(bg, fg), run.path("recomposite.png"))
    return {}


def cmd_eval(args, cfg, run: Run) -> dict:
    manifest = _manifest(args.dataset)
    if args.predictions:
        pred_dir = Path(args.predictions)
    elif args.checkpoint:
        model, aes, schedule, _ = _load_checkpoint(args.checkpoint)
        pred_dir = run.path("predictions/.keep").parent
        for k, rec in enumerate(sorted(manifest.records, key=lambda r: r["id"])):
            trip = manifest.load(rec)
            bg, fg = _decompose_one(model, aes, schedule, trip.composite, trip.object_mask, cfg, int(cfg["seed"]))
            save_png(bg, pred_dir / f"{rec['id']}_bg.png")
            save_png(fg, pred_dir / f"{rec['id']}_fg.png")
    else:
        raise _usage("eval needs --predictions or --checkpoint")
    e = cfg["eval"]
    protocol = EvalProtocol(float(e["shadow_alpha_threshold"]), int(e["dilation_radius"]),
                            e["recomposition_seed"], None)
    if protocol.recomposition_seed is not None:
        protocol.recomposition_dir = str(run.path("recomposition/.keep").parent)
    report = evaluate(manifest, pred_dir, protocol)
    if protocol.recomposition_dir:
        # paths inside the report are relative to the run directory
        rr = report.get("random_recomposition") or {}
        for rec in rr.get("records", []):
            if "path" in rec:
                rec["path"] = str(Path(rec["path"]).relative_to(run.stage))
        report["protocol"]["recomposition_dir"] = "recomposition"
    write_report(report, run.path("report.json"))
    return {"coverage": report["coverage"]["evaluated"]}


def cmd_grad_check(args, cfg, run: Run) -> dict:
    from .gradcheck import run_suite

    tol = float(args.tol)
    results = run_suite(seed=int(cfg["seed"]), tol=tol)
    rows = [dict(asdict(r), max_rel_error=float(r.max_rel_error), passed=bool(r.passed(tol))) for r in results]
    with open(run.path("gradcheck.json"), "w") as fh:
        json.dump({"tolerance": tol, "cases": rows}, fh, indent=2)
    failed = [r["name"] for r in rows if not r["passed"]]
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['name']} max_rel_error={r['max_rel_error']:.3e}")
    return {"failed": failed}


COMMANDS = {
    "gen-assets": cmd_gen_assets,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "decompose": cmd_decompose,
    "edit": cmd_edit,
    "recompose": cmd_recompose,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
}


# ---------------------------------------------------------------- parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _usage(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="layersplit", description="Layer decomposition toolkit")
    parser.add_argument("--version", action="version", version=f"layersplit {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--out", help="output directory (default out/<run-id>)")
        p.add_argument("--run-id", help="name of the run directory under out/")
        p.add_argument("--seed", type=int)
        return p

    p = add("gen-assets", "generate object assets with shadows")
    p.add_argument("--n", type=int)
    p = add("gen-dataset", "generate a layered dataset")
    p.add_argument("--n", type=int, help="number of simulated triplets")
    p.add_argument("--captured", type=int, help="number of foreground-less captured stand-ins")
    p.add_argument("--captured-dir", help="directory of {id}_comp/bg/mask.png pairs to ingest")
    p = add("train", "train the denoiser")
    p.add_argument("--dataset", required=True, help="dataset directory or manifest.jsonl")
    p.add_argument("--steps", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p = add("decompose", "split a composite into background and foreground")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--steps", type=int, help="DDIM steps")
    p = add("edit", "move, resize or recolor a foreground layer")
    p.add_argument("--fg", required=True)
    p.add_argument("--dx", type=float, default=0.0)
    p.add_argument("--dy", type=float, default=0.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--gains", help="r,g,b multipliers")
    p.add_argument("--bg", help="background to recompose the edited layer onto")
    p = add("recompose", "alpha-blend a foreground layer onto a background")
    p.add_argument("--bg", required=True)
    p.add_argument("--fg", required=True)
    p = add("eval", "score decompositions against a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--predictions", help="directory of {id}_bg.png / {id}_fg.png")
    p.add_argument("--checkpoint", help="decompose every item with this model first")
    p.add_argument("--recomposition-seed", type=int)
    p = add("grad-check", "finite-difference gradient checks")
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


OVERRIDES = {
    "seed": "seed",
    "gen-assets": {"n": "assets.n"},
    "gen-dataset": {"n": "dataset.n_simulated", "captured": "dataset.n_captured",
                    "captured_dir": "dataset.captured_dir"},
    "train": {"steps": "train.steps", "lam": "train.lam", "lr": "train.lr", "batch_size": "train.batch_size"},
    "decompose": {"steps": "sampling.steps"},
    "eval": {"steps": "sampling.steps", "recomposition_seed": "eval.recomposition_seed"},
}

INPUTS = {
    "train": ("dataset", "resume"),
    "decompose": ("checkpoint", "image", "mask"),
    "edit": ("fg", "bg"),
    "recompose": ("bg", "fg"),
    "eval": ("dataset", "predictions", "checkpoint"),
}


def resolve(args) -> dict:
    cfg = load_config(args.config)
    _set(cfg, "seed", args.seed)
    for flag, key in OVERRIDES.get(args.command, {}).items():
        _set(cfg, key, getattr(args, flag, None))
    return cfg


def _error_line(exc: CliError, command: str | None) -> str:
    return json.dumps({"error": {"type": exc.kind, "code": exc.code, "message": str(exc), "subcommand": command}})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=os.environ.get("LAYERSPLIT_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    command, run = None, None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        if command is None:
            raise _usage("no subcommand given; see --help")
        cfg = resolve(args)
        inputs = {k: getattr(args, k, None) for k in INPUTS.get(command, ())}
        run = Run(command, cfg, args.out, args.run_id, inputs)
        extra = COMMANDS[command](args, cfg, run)
        dest = run.commit(argv, extra)
        log.info("wrote %s", dest)
        if extra.get("failed"):
            # keep the report on disk, but signal failure
            exc = CliError(f"gradient check failed: {', '.join(extra['failed'])}", EXIT_CHECK, "check_failed")
            print(_error_line(exc, command), file=sys.stderr)
            return EXIT_CHECK
        print(json.dumps({"status": "ok", "subcommand": command, "out": str(dest)}))
        return 0
    except CliError as exc:
        if run is not None:
            run.abort()
        print(_error_line(exc, command), file=sys.stderr)
        return exc.code
    except (PngError, CheckpointError, FileNotFoundError) as exc:
        if run is not None:
            run.abort()
        print(_error_line(CliError(str(exc), EXIT_INPUT, "missing_input"), command), file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, TypeError) as exc:
        if run is not None:
            run.abort()
        print(_error_line(CliError(str(exc), EXIT_USAGE, "invalid_value"), command), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort machine-readable error
        if run is not None:
            run.abort()
        print(_error_line(CliError(f"{type(exc).__name__}: {exc}"), command), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
