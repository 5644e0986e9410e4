"""Finite-difference gradient checks for every op, the denoiser and the
full training loss, on micro shapes in double precision."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model.autoencoder import LayerAutoencoders, PatchAutoencoder
from .model.denoiser import Denoiser, DenoiserConfig
from .model.schedule import LatentPair, forward_noise, make_schedule
from .training import consistency_loss, diffusion_loss


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    n_checked: int
    n_excluded: int
    seconds: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.n_checked > 0 and self.max_rel_error < tol


def _weighted(out: ad.Tensor, seed: int) -> ad.Tensor:
    # a fixed random projection keeps every output coordinate in the gradient
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return ad.tensor_sum(out * w)


def op_cases(seed: int = 0):
    """``(name, f, params)`` triples, one or more per differentiable op."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    W = lambda f: (lambda *xs: _weighted(f(*xs), seed + 1))
    cases = [
        ("add", W(lambda a, b: a + b), [r(3, 4), r(3, 4)]),
        ("add_broadcast", W(lambda a, b: a + b), [r(2, 3, 4), r(4)]),
        ("sub", W(lambda a, b: a - b), [r(3, 4), r(3, 4)]),
        ("mul", W(lambda a, b: a * b), [r(3, 4), r(3, 4)]),
        ("mul_scalar", W(lambda a: a * 2.5), [r(3, 4)]),
        ("div", W(lambda a, b: a / b), [r(3, 4), pos(3, 4)]),
        ("power", W(lambda a: a ** 3), [r(3, 4)]),
        ("abs", W(ad.tensor_abs), [r(3, 4)]),
        ("exp", W(ad.exp), [r(3, 4)]),
        ("clamp", W(lambda a: ad.clamp(a, -0.5, 0.5)), [r(3, 4)]),
        ("gelu", W(ad.gelu), [r(3, 4)]),
        ("sum_axis", W(lambda a: ad.tensor_sum(a, axis=1)), [r(3, 4, 2)]),
        ("mean", W(lambda a: ad.mean(a, axis=(0, 2), keepdims=True)), [r(3, 4, 2)]),
        ("matmul", W(lambda a, b: a @ b), [r(3, 4), r(4, 5)]),
        ("matmul_batched", W(lambda a, b: ad.matmul(a, b)), [r(2, 3, 4), r(2, 4, 2)]),
        ("matmul_shared_rhs", W(lambda a, b: a @ b), [r(2, 3, 4), r(4, 2)]),
        ("reshape", W(lambda a: a.reshape(4, 6)), [r(2, 3, 4)]),
        ("transpose", W(lambda a: ad.transpose(a, (2, 0, 1))), [r(2, 3, 4)]),
        ("swapaxes", W(lambda a: ad.swapaxes(a, 0, 2)), [r(2, 3, 4)]),
        ("broadcast_to", W(lambda a: ad.broadcast_to(a, (3, 2, 4))), [r(2, 4)]),
        ("getitem_slice", W(lambda a: a[1:, ::2]), [r(3, 4)]),
        ("getitem_index", W(lambda a: a[np.array([0, 2, 0])]), [r(3, 4)]),
        ("concat", W(lambda a, b: ad.concat([a, b], axis=1)), [r(2, 3), r(2, 2)]),
        ("split", W(lambda a: ad.split(a, [1, 3], axis=1)[1] * 2.0), [r(2, 4)]),
        ("patchify", W(lambda a: ad.patchify(a, 2)), [r(1, 4, 4, 2)]),
        ("unpatchify", W(lambda a: ad.unpatchify(a, 2, 2, 2)), [r(1, 4, 8)]),
        ("softmax", W(lambda a: ad.softmax(a, axis=-1)), [r(3, 5)]),
        ("layer_norm", W(ad.layer_norm), [r(3, 6)]),
    ]
    return cases


def _micro_model(seed: int):
    cfg = DenoiserConfig(latent_hw=(4, 4), latent_channels=2, patch=2, width=8, depth=1, heads=2, mlp_ratio=2)
    model = Denoiser(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 7)
    for k in ("head_bg_w", "head_fg_w"):
        # heads start at zero; randomize so upstream gradients are nonzero
        model.params[k].data = rng.normal(0, 0.3, model.params[k].shape)
    return model


def _micro_autoencoders(seed: int) -> LayerAutoencoders:
    rng = np.random.default_rng(seed + 11)
    f, c = 2, 2

    def ae(ch):
        p = f * f * ch
        return PatchAutoencoder(ch, f, c, rng.normal(0, 0.3, (p, c)), rng.normal(0, 0.1, c),
                                rng.normal(0, 0.3, (c, p)), rng.normal(0, 0.1, p), "trained")

    return LayerAutoencoders(ae(3), ae(4))


def model_cases(seed: int = 0):
    """Denoiser forward and the full ``l_dm + lam * l_consist`` path."""
    model = _micro_model(seed)
    aes = _micro_autoencoders(seed)
    sched = make_schedule("cosine", 1000)
    rng = np.random.default_rng(seed + 3)
    B = 2
    x0 = LatentPair(rng.standard_normal((B, 4, 4, 2)), rng.standard_normal((B, 4, 4, 2)))
    eps = LatentPair(rng.standard_normal((B, 4, 4, 2)), rng.standard_normal((B, 4, 4, 2)))
    t = np.array([120, 600])
    x_t = forward_noise(x0, t, eps, sched)
    y_comp, y_obj = rng.standard_normal((B, 4, 4, 2)), rng.standard_normal((B, 4, 4, 2))
    composite = rng.uniform(0, 1, (B, 8, 8, 3))
    names = list(model.params)
    values = [model.params[k].data.copy() for k in names]
    wr = np.random.default_rng(seed + 5)
    w_bg, w_fg = wr.standard_normal(x_t.bg.shape), wr.standard_normal(x_t.fg.shape)

    def bind(leaves):
        for k, leaf in zip(names, leaves):
            model.params[k] = leaf

    def forward(*leaves):
        bind(leaves)
        out = model.predict_eps(x_t, y_comp, y_obj, t)
        return ad.tensor_sum(out.bg * w_bg) + ad.tensor_sum(out.fg * w_fg)

    def total(*leaves):
        bind(leaves)
        pred = model.predict_eps(x_t, y_comp, y_obj, t)
        l_dm = diffusion_loss(pred, eps, np.array([True, False]))
        l_c = consistency_loss(x_t, pred, t, composite, aes, sched, alpha_clamp="clip", weighting="alpha_bar")
        return l_dm + 1.0 * l_c

    def consist_only(eb, ef):
        return consistency_loss(x_t, LatentPair(eb, ef), t, composite, aes, sched, alpha_clamp="clip", weighting="none")

    def consist_decoders(dw_rgb, dw_rgba):
        aes.rgb.params["dec_w"], aes.rgba.params["dec_w"] = dw_rgb, dw_rgba
        return consistency_loss(x_t, eps, t, composite, aes, sched, alpha_clamp="clip")

    dec = [aes.rgb.params["dec_w"].data.copy(), aes.rgba.params["dec_w"].data.copy()]
    return [
        ("denoiser_forward", forward, values),
        ("consistency_path_eps", consist_only, [eps.bg + 0.1 * rng.standard_normal(eps.bg.shape),
                                                 eps.fg + 0.1 * rng.standard_normal(eps.fg.shape)]),
        ("consistency_path_decoders", consist_decoders, dec),
        ("total_loss_full_path", total, values),
    ]


def run_suite(seed: int = 0, tol: float = 1e-4, include_model: bool = True) -> list[CaseResult]:
    cases = op_cases(seed) + (model_cases(seed) if include_model else [])
    out = []
    for name, f, params in cases:
        t0 = time.perf_counter()
        res = ad.finite_diff_check(f, params)
        out.append(CaseResult(name, res.max_rel_error, res.n_checked, res.n_excluded, time.perf_counter() - t0))
    return out
