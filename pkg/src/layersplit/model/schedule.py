"""Noise schedules and the closed-form forward/inverse noising maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients; ``alpha_bar[t - 1]`` belongs to step ``t``."""

    alpha_bar: np.ndarray
    kind: str = "cosine"

    @property
    def T(self) -> int:
        return len(self.alpha_bar)

    def at(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        return self.alpha_bar[t - 1]


def make_schedule(kind: str = "cosine", T: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 0.02, s: float = 0.008) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if kind == "linear-beta":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.minimum(1.0 - f[1:] / f[:-1], 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(np.cumprod(1.0 - betas), kind)


@dataclass
class LatentPair:
    """Background and foreground latents, ``(B, h, w, c)`` each."""

    bg: object
    fg: object

    def __post_init__(self):
        if tuple(self.bg.shape) != tuple(self.fg.shape):
            raise ValueError(f"latent pair shapes differ: {self.bg.shape} vs {self.fg.shape}")

    @property
    def shape(self):
        return self.bg.shape

    def numpy(self) -> "LatentPair":
        get = lambda x: x.data if isinstance(x, Tensor) else np.asarray(x)
        return LatentPair(get(self.bg), get(self.fg))


def _coef(values: np.ndarray, shape, dtype) -> np.ndarray:
    v = np.asarray(values, dtype=dtype).reshape((shape[0],) + (1,) * (len(shape) - 1))
    return np.broadcast_to(v, shape)


def _dtype_of(*xs):
    """Tensors keep their own precision; plain arrays follow numpy promotion
    against the float64 schedule, so float32 latents give float64 results."""
    for x in xs:
        if isinstance(x, Tensor):
            return x.dtype
    return np.result_type(*[np.asarray(x).dtype for x in xs], np.float64)


def forward_noise(x0: LatentPair, t, eps: LatentPair, schedule: NoiseSchedule) -> LatentPair:
    """``x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`` for both streams; ``t`` per item."""
    ab = schedule.at(np.atleast_1d(t))
    out = []
    for x, e in ((x0.bg, eps.bg), (x0.fg, eps.fg)):
        x, e = np.asarray(x), np.asarray(e)
        if x.shape != e.shape:
            raise ValueError(f"forward_noise: x0 {x.shape} and eps {e.shape} differ")
        dt = _dtype_of(x, e)
        out.append(_coef(np.sqrt(ab), x.shape, dt) * x + _coef(np.sqrt(1 - ab), x.shape, dt) * e)
    return LatentPair(*out)


def recover_x0(x_t: LatentPair, eps_pred: LatentPair, t, schedule: NoiseSchedule) -> LatentPair:
    """Clean-latent estimate ``(x_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)``.

    ``eps_pred`` may hold :class:`Tensor` values, in which case the result
    is differentiable with respect to them. No clamping is applied.
    """
    ab = schedule.at(np.atleast_1d(t))
    out = []
    for x, e in ((x_t.bg, eps_pred.bg), (x_t.fg, eps_pred.fg)):
        dt = _dtype_of(e, x)
        shape = tuple(e.shape)
        if tuple(x.shape) != shape:
            raise ValueError(f"recover_x0: x_t {x.shape} and eps {shape} differ")
        noise = _coef(np.sqrt(1 - ab), shape, dt)
        inv_signal = _coef(1.0 / np.sqrt(ab), shape, dt)
        xd = x if isinstance(x, Tensor) else np.asarray(x, dtype=dt)
        out.append((xd - noise * e) * inv_signal)
    return LatentPair(*out)
