"""Masked diffusion loss, pixel-space consistency loss and the training loop."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor
from .dataset import DatasetManifest, LayeredTriplet
from .model.autoencoder import LayerAutoencoders, PatchAutoencoder, fit_layer_autoencoders, orthogonal_autoencoders
from .model.denoiser import Denoiser, DenoiserConfig
from .model.schedule import LatentPair, NoiseSchedule, forward_noise, make_schedule, recover_x0
from .optim import Adam


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_checkpoint: str | None):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class LossBreakdown:
    l_dm: float
    l_consist: float
    total: float
    fg_supervised: list[bool] = field(default_factory=list)


WEIGHTINGS = ("none", "sqrt_alpha_bar", "alpha_bar")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    steps: int = 1000
    lam: float = 1.0
    seed: int = 0
    schedule: str = "cosine"
    T: int = 1000
    checkpoint_every: int = 0
    sim_ratio: float = 0.8
    consistency_on: str = "all"  # or "captured"
    consistency_weighting: str = "alpha_bar"  # or "none", "sqrt_alpha_bar"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"consistency weight must be >= 0, got {self.lam}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.consistency_on not in ("all", "captured"):
            raise ValueError(f"consistency_on must be 'all' or 'captured', got {self.consistency_on!r}")
        if self.consistency_weighting not in WEIGHTINGS:
            raise ValueError(f"consistency_weighting must be one of {WEIGHTINGS}, got {self.consistency_weighting!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- losses

def diffusion_loss(eps_pred: LatentPair, eps_true: LatentPair, fg_supervised) -> Tensor:
    """Mean squared noise error over all background elements plus the
    foreground elements of supervised items, divided by the number of
    included elements. Unsupervised foreground entries never enter the graph."""
    flags = np.asarray(fg_supervised, dtype=bool).reshape(-1)
    B = eps_pred.bg.shape[0]
    if flags.shape[0] != B:
        raise ValueError(f"{flags.shape[0]} supervision flags for a batch of {B}")
    if B == 0:
        raise ValueError("empty batch")
    pb = ad.as_tensor(eps_pred.bg)
    diff = pb - np.asarray(eps_true.bg, dtype=pb.dtype)
    total = ad.tensor_sum(diff * diff)
    count = diff.data.size
    idx = np.nonzero(flags)[0]
    if idx.size:
        pf = ad.as_tensor(eps_pred.fg)[idx]
        df = pf - np.asarray(eps_true.fg, dtype=pf.dtype)[idx]
        total = total + ad.tensor_sum(df * df)
        count += df.data.size
    return total * (1.0 / count)


def blend_tensors(bg_img, fg_img, alpha_clamp: str = "straight_through") -> Tensor:
    """Differentiable straight-alpha blend of ``(B,H,W,3)`` under ``(B,H,W,4)``.

    Alpha is hard-clamped to [0, 1]; ``alpha_clamp`` picks the gradient
    (``"straight_through"`` passes it unchanged, ``"clip"`` zeroes it
    outside the interval).
    """
    bg_img, fg_img = ad.as_tensor(bg_img), ad.as_tensor(fg_img)
    if tuple(bg_img.shape[:-1]) != tuple(fg_img.shape[:-1]):
        raise ValueError(f"decoded layers disagree: {bg_img.shape} vs {fg_img.shape}")
    a = ad.clamp(fg_img[..., 3:4], 0.0, 1.0, straight_through=(alpha_clamp == "straight_through"))
    a3 = ad.broadcast_to(a, tuple(bg_img.shape))
    return a3 * fg_img[..., :3] + (1.0 - a3) * bg_img


def recomposite_l1(composite, bg_img, fg_img, alpha_clamp: str = "straight_through", weights=None) -> Tensor:
    """Mean absolute error between the composite and the blend of the two layers.

    ``weights`` (one non-negative value per item) scales each item's
    residual before the mean.
    """
    comp_hat = blend_tensors(bg_img, fg_img, alpha_clamp)
    composite = np.asarray(composite, dtype=comp_hat.dtype)
    if composite.shape != tuple(comp_hat.shape):
        raise ValueError(f"composite {composite.shape} vs recomposite {tuple(comp_hat.shape)}")
    resid = comp_hat - composite
    if weights is not None:
        w = np.asarray(weights, dtype=comp_hat.dtype).reshape((-1,) + (1,) * (resid.ndim - 1))
        resid = resid * np.broadcast_to(w, resid.shape)
    return ad.mean(ad.tensor_abs(resid))


def timestep_weights(t, schedule: NoiseSchedule, weighting: str) -> np.ndarray | None:
    """Per-item consistency weights; ``None`` for the unweighted loss."""
    if weighting == "none":
        return None
    ab = schedule.at(np.atleast_1d(np.asarray(t)))
    if weighting == "sqrt_alpha_bar":
        return np.sqrt(ab)
    if weighting == "alpha_bar":
        return ab
    raise ValueError(f"unknown weighting {weighting!r}")


def consistency_loss(x_t: LatentPair, eps_pred: LatentPair, t, composite, autoencoders: LayerAutoencoders,
                     schedule: NoiseSchedule, alpha_clamp: str = "straight_through",
                     weighting: str = "none") -> Tensor:
    """Recover both clean latents from the noise prediction, decode them,
    alpha-blend and take the L1 distance to the input composite.

    The x0 recovery divides by sqrt(alpha_bar_t), so near t = T the
    gradient with respect to the noise prediction grows like
    1/sqrt(alpha_bar_t) (about 2e4 for the cosine schedule).
    ``weighting`` scales each item's residual by a power of alpha_bar_t:
    ``"none"`` is the plain mean L1, ``"sqrt_alpha_bar"`` bounds the
    gradient, ``"alpha_bar"`` makes it vanish at both ends of the schedule.
    Every timestep stays in the loss either way.
    """
    x0 = recover_x0(x_t, eps_pred, t, schedule)
    bg_img = autoencoders.decode_rgb(x0.bg)
    fg_img = autoencoders.decode_rgba(x0.fg)
    return recomposite_l1(composite, bg_img, fg_img, alpha_clamp, timestep_weights(t, schedule, weighting))


# ---------------------------------------------------------------- data

@dataclass
class TrainingData:
    """Pre-encoded latents for a fixed set of triplets (frozen autoencoders)."""

    composite: np.ndarray
    x0_bg: np.ndarray
    x0_fg: np.ndarray
    y_comp: np.ndarray
    y_obj: np.ndarray
    supervised: np.ndarray
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_triplets(cls, triplets: list[LayeredTriplet], autoencoders: LayerAutoencoders,
                      ids: list[str] | None = None) -> "TrainingData":
        comp = np.stack([t.composite for t in triplets])
        bg = np.stack([t.background for t in triplets])
        fg = np.stack([t.foreground if t.foreground is not None else np.zeros(t.composite.shape[:2] + (4,))
                       for t in triplets])
        mask = np.stack([t.object_mask for t in triplets])
        with ad.no_grad():
            data = cls(
                composite=comp,
                x0_bg=autoencoders.encode_rgb(bg).data,
                x0_fg=autoencoders.encode_rgba(fg).data,
                y_comp=autoencoders.encode_rgb(comp).data,
                y_obj=autoencoders.encode_mask(mask).data,
                supervised=np.array([t.foreground is not None for t in triplets]),
                ids=list(ids) if ids is not None else [f"item{i}" for i in range(len(triplets))],
            )
        return data

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, autoencoders: LayerAutoencoders) -> "TrainingData":
        return cls.from_triplets([manifest.load(r) for r in manifest.records], autoencoders, manifest.ids())


def sample_batch(data: TrainingData, batch_size: int, sim_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Stratified batch: ``round(sim_ratio * B)`` supervised items, the rest unsupervised."""
    sim = np.nonzero(data.supervised)[0]
    cap = np.nonzero(~data.supervised)[0]
    n_sim = int(np.floor(sim_ratio * batch_size + 0.5))
    n_cap = batch_size - n_sim
    picks = []
    for pool, quota, name in ((sim, n_sim, "simulated"), (cap, n_cap, "captured")):
        if quota == 0:
            continue
        if pool.size == 0:
            raise ValueError(f"sim_ratio {sim_ratio} needs {quota} {name} items per batch, but none exist")
        picks.append(rng.choice(pool, size=quota, replace=pool.size < quota))
    return np.concatenate(picks)


# ---------------------------------------------------------------- trainer

class Trainer:
    def __init__(self, model: Denoiser, autoencoders: LayerAutoencoders, schedule: NoiseSchedule,
                 config: TrainConfig, data: TrainingData):
        self.model = model
        self.autoencoders = autoencoders
        self.schedule = schedule
        self.config = config
        self.data = data
        self.optimizer = Adam(model.params, lr=config.lr)
        self.step_count = 0
        self.last_checkpoint: str | None = None

    def losses(self, idx: np.ndarray, t: np.ndarray, eps: LatentPair, grad: bool = True, weighting: str | None = None):
        d = self.data
        dt = self.model.dtype
        x0 = LatentPair(d.x0_bg[idx].astype(dt), d.x0_fg[idx].astype(dt))
        x_t = forward_noise(x0, t, eps, self.schedule)
        sup = d.supervised[idx]
        eps_pred = self.model.predict_eps(x_t, d.y_comp[idx], d.y_obj[idx], t)
        l_dm = diffusion_loss(eps_pred, eps, sup)
        cidx = np.arange(len(idx)) if self.config.consistency_on == "all" else np.nonzero(~sup)[0]
        if cidx.size == 0:
            l_c = Tensor(np.zeros((), dt))
        else:
            sub = lambda lp: LatentPair(lp.bg[cidx], lp.fg[cidx])
            wt = self.config.consistency_weighting if weighting is None else weighting
            if self.config.lam == 0 and grad:
                with ad.no_grad():
                    l_c = consistency_loss(sub(x_t), sub(eps_pred.numpy()), t[cidx], d.composite[idx][cidx],
                                           self.autoencoders, self.schedule, weighting=wt)
            else:
                l_c = consistency_loss(sub(x_t), sub(eps_pred), t[cidx], d.composite[idx][cidx],
                                       self.autoencoders, self.schedule, weighting=wt)
        return l_dm, l_c, sup

    def _draw(self, step: int):
        rng = np.random.default_rng([self.config.seed, step])
        idx = sample_batch(self.data, self.config.batch_size, self.config.sim_ratio, rng)
        t = rng.integers(1, self.schedule.T + 1, size=len(idx))
        shape = (len(idx),) + self.data.x0_bg.shape[1:]
        eps = LatentPair(rng.standard_normal(shape).astype(self.model.dtype),
                         rng.standard_normal(shape).astype(self.model.dtype))
        return idx, t, eps

    def train_step(self) -> LossBreakdown:
        """One Adam update on ``l_dm + lam * l_consist``; randomness keyed on (seed, step)."""
        idx, t, eps = self._draw(self.step_count)
        l_dm, l_c, sup = self.losses(idx, t, eps)
        total = l_dm + self.config.lam * l_c if self.config.lam else l_dm
        value = float(l_dm.data) + self.config.lam * float(l_c.data)
        if not np.isfinite(value):
            raise TrainingDiverged(self.step_count, self.last_checkpoint)
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.step_count += 1
        return LossBreakdown(float(l_dm.data), float(l_c.data), value, sup.tolist())

    def run(self, steps: int, log_path=None, checkpoint_dir=None) -> list[LossBreakdown]:
        history = []
        log = open(log_path, "a") if log_path else None
        try:
            for _ in range(steps):
                t0 = time.perf_counter()
                lb = self.train_step()
                history.append(lb)
                if log:
                    log.write(json.dumps({"step": self.step_count, "l_dm": lb.l_dm, "l_consist": lb.l_consist,
                                          "total": lb.total, "lr": self.config.lr,
                                          "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}) + "\n")
                every = self.config.checkpoint_every
                if checkpoint_dir and every and self.step_count % every == 0:
                    path = Path(checkpoint_dir) / f"step{self.step_count:06d}.ckpt"
                    self.save(path)
        finally:
            if log:
                log.close()
        return history

    def probe(self, ts=None, seed: int = 12345, weighting: str | None = None) -> tuple[float, float]:
        """Both losses on every item at fixed timesteps and fixed noise, without updates.

        ``ts`` defaults to 20 evenly spaced timesteps over ``[1, T]``, a
        deterministic stand-in for the uniform expectation over t.
        ``weighting`` overrides the configured consistency weighting.
        """
        if ts is None:
            ts = np.unique(np.round(np.linspace(1, self.schedule.T, 20)).astype(int))
        rng = np.random.default_rng(seed)
        n = len(self.data)
        idx = np.repeat(np.arange(n), len(ts))
        t = np.tile(np.asarray(ts), n)
        shape = (len(idx),) + self.data.x0_bg.shape[1:]
        eps = LatentPair(rng.standard_normal(shape).astype(self.model.dtype),
                         rng.standard_normal(shape).astype(self.model.dtype))
        with ad.no_grad():
            l_dm, l_c, _ = self.losses(idx, t, eps, grad=False, weighting=weighting)
        return float(l_dm.data), float(l_c.data)

    # ------------------------------------------------------------ checkpoints

    def save(self, path) -> None:
        tensors = dict(self.model.named_arrays())
        tensors.update(self.autoencoders.named_arrays())
        tensors.update(self.optimizer.state_arrays())
        tensors["step"] = np.asarray(self.step_count, dtype=np.int64)
        meta = {
            "step": self.step_count,
            "denoiser": self.model.hyperparameters(),
            "autoencoder": {"mode": self.autoencoders.mode, "factor": self.autoencoders.factor,
                            "latent_channels": self.autoencoders.latent_channels},
            "schedule": {"kind": self.schedule.kind, "T": self.schedule.T},
            "train": asdict(self.config),
        }
        ckpt.write_tensors(path, tensors, meta)
        self.last_checkpoint = str(path)

    def load(self, path) -> None:
        """Restore weights, optimizer moments and step; nothing changes on error."""
        arrays = ckpt.read_tensors(path)
        missing = [k for k in list(self.model.named_arrays()) + list(self.autoencoders.named_arrays())
                   if k not in arrays]
        if missing or "step" not in arrays:
            raise ckpt.CheckpointError(f"{path}: missing tensors {missing[:5]}")
        self.model.load_arrays(arrays)
        self.autoencoders.load_arrays(arrays)
        self.optimizer.load_state_arrays(arrays)
        self.step_count = int(arrays["step"])
        self.last_checkpoint = str(path)


def load_model(path) -> tuple[Denoiser, LayerAutoencoders, NoiseSchedule, dict]:
    """Rebuild model, autoencoders and schedule from a checkpoint and its sidecar."""
    meta = ckpt.read_meta(path)
    arrays = ckpt.read_tensors(path)
    dcfg = dict(meta["denoiser"])
    dtype = np.dtype(dcfg.pop("dtype"))
    dcfg["latent_hw"] = tuple(dcfg["latent_hw"])
    model = Denoiser(DenoiserConfig(**dcfg), dtype=dtype)
    model.load_arrays(arrays)
    a = meta["autoencoder"]
    aes = _empty_autoencoders(a["factor"], a["latent_channels"], a["mode"])
    aes.load_arrays(arrays)
    schedule = make_schedule(meta["schedule"]["kind"], meta["schedule"]["T"])
    return model, aes, schedule, meta


def _empty_autoencoders(factor: int, c: int, mode: str) -> LayerAutoencoders:
    def blank(ch):
        p = factor * factor * ch
        return PatchAutoencoder(ch, factor, c, np.zeros((p, c)), np.zeros(c), np.zeros((c, p)), np.zeros(p), mode)

    return LayerAutoencoders(blank(3), blank(4))


def default_autoencoders(triplets, latent_channels: int, factor: int = 4, seed: int = 0, dtype=np.float32,
                         steps: int = 1000) -> LayerAutoencoders:
    """Orthogonal pair when lossless (``c = 4 f^2``), otherwise a pair fitted to ``triplets``.

    The RGB side sees backgrounds and composites; the RGBA side sees
    supervised foregrounds (composites stand in when none exist).
    """
    if latent_channels == factor * factor * 4:
        return orthogonal_autoencoders(factor, latent_channels, seed=seed, dtype=dtype)
    rgb = np.concatenate([np.stack([t.background for t in triplets]), np.stack([t.composite for t in triplets])])
    fgs = [t.foreground for t in triplets if t.foreground is not None]
    if fgs:
        rgba = np.stack(fgs)
    else:
        comp = np.stack([t.composite for t in triplets])
        rgba = np.concatenate([comp, np.ones(comp.shape[:-1] + (1,))], axis=-1)
    aes, _ = fit_layer_autoencoders(rgb, rgba, factor, latent_channels, steps=steps, seed=seed, dtype=dtype)
    return aes


def build_trainer(data_triplets, ids=None, denoiser_config: DenoiserConfig | None = None,
                  train_config: TrainConfig | None = None, autoencoders: LayerAutoencoders | None = None,
                  model_seed: int = 0, dtype=np.float32) -> Trainer:
    """Trainer over in-memory triplets; autoencoders default to :func:`default_autoencoders`."""
    tc = train_config or TrainConfig()
    dc = denoiser_config or DenoiserConfig()
    if autoencoders is None:
        autoencoders = default_autoencoders(data_triplets, dc.latent_channels, seed=model_seed, dtype=dtype)
    data = TrainingData.from_triplets(data_triplets, autoencoders, ids)
    schedule = make_schedule(tc.schedule, tc.T)
    return Trainer(Denoiser(dc, seed=model_seed, dtype=dtype), autoencoders, schedule, tc, data)
