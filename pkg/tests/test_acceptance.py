"""Acceptance criteria, one test each.

Every test records a ``PASS``/``FAIL`` line; ``conftest.py`` prints them in
the terminal summary. Run this file directly to print them without pytest.
"""

import time

import numpy as np
import pytest
from scipy.ndimage import distance_transform_edt

from layersplit import autodiff as ad
from layersplit.checkpoint import read_tensors
from layersplit.cli import main as cli_main
from layersplit.dataset import DatasetConfig, dilate_mask, simulate_item
from layersplit.evaluation import DX_RANGE, DY_RANGE, SCALE_RANGE, random_recomposition_eval, sample_recomposition
from layersplit.gradcheck import run_suite
from layersplit.imaging import alpha_blend, load_png, save_png
from layersplit.metrics import psnr, ssim
from layersplit.model import DenoiserConfig, LatentPair, forward_noise, make_schedule
from layersplit.model.denoiser import Denoiser
from layersplit.model.sampling import ddim_sample, decompose
from layersplit.model.schedule import recover_x0
from layersplit.training import TrainConfig, build_trainer, default_autoencoders, diffusion_loss

RESULTS = {}


def record(n, ok, detail):
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, RESULTS[n]


def sim_triplets(n, seed):
    cfg = DatasetConfig()
    return [simulate_item(np.random.default_rng([seed, 0, i]), cfg) for i in range(n)]


# ---- 1

def test_criterion_1_recomposition_identity(tmp_path):
    t0 = time.perf_counter()
    trips = sim_triplets(100, seed=101)
    err_float = max(np.max(np.abs(t.composite - alpha_blend(t.background, t.foreground))) for t in trips)
    err_png = 0.0
    for k, t in enumerate(trips):
        for name, img in (("c", t.composite), ("b", t.background), ("f", t.foreground)):
            save_png(img, tmp_path / f"{k}{name}.png")
        c, b, f = (load_png(tmp_path / f"{k}{n}.png") for n in "cbf")
        err_png = max(err_png, np.max(np.abs(c - alpha_blend(b, f))))
    dt = time.perf_counter() - t0
    ok = err_float == 0 and err_png <= 1 / 255 + 1e-12 and dt < 10
    record(1, ok, f"float max err {err_float:.1e}, 8-bit max err {err_png * 255:.3f}/255, {dt:.1f}s")


# ---- 2

def test_criterion_2_gradient_fidelity():
    t0 = time.perf_counter()
    res = run_suite(seed=0)
    dt = time.perf_counter() - t0
    worst = max(res, key=lambda r: r.max_rel_error)
    bad = [r.name for r in res if not r.passed(1e-4)]
    names = {r.name for r in res}
    has_all = {"denoiser_forward", "consistency_path_eps", "total_loss_full_path"} <= names
    ok = not bad and has_all and dt < 120
    record(2, ok, f"{len(res)} cases, worst {worst.name} {worst.max_rel_error:.2e}, failed {bad}, {dt:.1f}s")


# ---- 3

def test_criterion_3_masking_contract():
    trips = sim_triplets(5, seed=3)
    for t in trips[3:]:
        t.foreground, t.source = None, "captured"
    aes = default_autoencoders(trips, 4, 4, seed=0, dtype=np.float64, steps=0)
    dc = DenoiserConfig(latent_channels=4, width=16, depth=1, heads=2, mlp_ratio=2)

    def trainer(lam):
        return build_trainer(trips, denoiser_config=dc, autoencoders=aes, dtype=np.float64,
                             train_config=TrainConfig(lam=lam, sim_ratio=0.5, batch_size=4))

    rng = np.random.default_rng(0)
    tr = trainer(0.0)
    unsup = np.nonzero(~tr.data.supervised)[0]
    idx = np.arange(len(tr.data))
    t = np.array([30, 200, 500, 800, 990])
    shape = (len(idx),) + tr.data.x0_bg.shape[1:]
    eps = LatentPair(rng.standard_normal(shape), rng.standard_normal(shape))
    x_t = forward_noise(LatentPair(tr.data.x0_bg, tr.data.x0_fg), t, eps, tr.schedule)
    with ad.no_grad():
        pred = tr.model.predict_eps(x_t, tr.data.y_comp, tr.data.y_obj, t)
    base = float(diffusion_loss(pred, eps, tr.data.supervised).data)
    max_change = 0.0
    for scale in (1e-6, 1.0, 1e6):
        fg = eps.fg.copy()
        fg[unsup] += scale * rng.standard_normal(fg[unsup].shape)
        max_change = max(max_change, abs(float(diffusion_loss(pred, LatentPair(eps.bg, fg), tr.data.supervised).data) - base))

    def fg_head_norm(tr):
        tt = np.array([100, 700])
        e = LatentPair(rng.standard_normal((2,) + shape[1:]), rng.standard_normal((2,) + shape[1:]))
        tr.optimizer.zero_grad()
        l_dm, l_c, _ = tr.losses(unsup, tt, e)
        (l_dm + tr.config.lam * l_c if tr.config.lam else l_dm).backward()
        return float(np.linalg.norm(tr.model.params["head_fg_w"].grad)) + float(
            np.linalg.norm(tr.model.params["head_fg_b"].grad))

    g0, g1 = fg_head_norm(tr), fg_head_norm(trainer(1.0))
    ok = max_change == 0.0 and g0 == 0.0 and g1 > 1e-12
    record(3, ok, f"l_dm change {max_change:.1e}, fg head grad lam=0 {g0:.1e}, lam=1 {g1:.2e}")


# ---- 4

def test_criterion_4_schedule_sampler_algebra():
    s = make_schedule()
    rng = np.random.default_rng(4)
    ts = np.array([1, 2, 10, 100, 250, 500, 750, 900, 990, 999, 1000])
    worst = 0.0
    for dtype in (np.float32, np.float64):
        x0 = LatentPair(rng.standard_normal((len(ts), 8, 8, 16)).astype(dtype),
                        rng.standard_normal((len(ts), 8, 8, 16)).astype(dtype))
        e = LatentPair(rng.standard_normal(x0.bg.shape).astype(dtype), rng.standard_normal(x0.bg.shape).astype(dtype))
        back = recover_x0(forward_noise(x0, ts, e, s), e, ts, s)
        worst = max(worst, np.max(np.abs(back.bg - x0.bg)), np.max(np.abs(back.fg - x0.fg)))
    cfg = DenoiserConfig(latent_channels=4, width=16, depth=1, heads=2, mlp_ratio=2)
    m = Denoiser(cfg, seed=1, dtype=np.float64)
    for k in ("head_bg_w", "head_fg_w"):
        m.params[k].data = rng.standard_normal(m.params[k].shape) * 0.1
    yc, yo = rng.standard_normal((2, 8, 8, 4)), rng.standard_normal((2, 8, 8, 4))
    a = ddim_sample(m, yc, yo, s, steps=20, seed=5)
    b = ddim_sample(m, yc, yo, s, steps=20, seed=5)
    bitwise = a.bg.tobytes() == b.bg.tobytes() and a.fg.tobytes() == b.fg.tobytes()
    one = ddim_sample(m, yc, yo, s, steps=1, seed=9, clip_x0=None)
    g = np.random.default_rng(9)
    xT = LatentPair(g.standard_normal(yc.shape), g.standard_normal(yc.shape))
    with ad.no_grad():
        ep = m.predict_eps(xT, yc, yo, np.full(2, s.T)).numpy()
    ref = recover_x0(xT, ep, np.full(2, s.T), s)
    single = np.array_equal(one.bg, ref.bg) and np.array_equal(one.fg, ref.fg)
    ok = worst <= 1e-5 and bitwise and single
    record(4, ok, f"round-trip max err {worst:.1e} over t in {ts.min()}..{ts.max()}, "
                  f"DDIM bitwise {bitwise}, steps=1 equals recovery {single}")


# ---- 5

OVERFIT_STEPS = 5000


@pytest.mark.slow
def test_criterion_5_overfit_and_decompose():
    t0 = time.perf_counter()
    trips = sim_triplets(16, seed=0)
    aes = default_autoencoders(trips, 16, 4, seed=0)
    tc = TrainConfig(lr=1e-3, batch_size=8, lam=1.0, sim_ratio=1.0, steps=OVERFIT_STEPS)
    tr = build_trainer(trips, denoiser_config=DenoiserConfig(), train_config=tc, autoencoders=aes)
    n_params = tr.model.num_parameters()
    # unweighted consistency in the probe: the training weighting hides the high-t terms
    p0 = tr.probe(weighting="none")
    tr.run(OVERFIT_STEPS)
    p1 = tr.probe(weighting="none")
    r_dm, r_c = p1[0] / p0[0], p1[1] / p0[1]
    comps = np.stack([t.composite for t in trips[:4]])
    masks = np.stack([t.object_mask for t in trips[:4]])
    bg, fg = decompose(tr.model, tr.autoencoders, comps, masks, tr.schedule, 50, 0)
    bg = np.clip(bg, 0, 1)
    fg = np.clip(fg, 0, 1)
    pb = [psnr(bg[i], trips[i].background) for i in range(4)]
    pc = [psnr(alpha_blend(bg[i], fg[i]), trips[i].composite) for i in range(4)]
    dt = time.perf_counter() - t0
    ok = (n_params <= 1_000_000 and r_dm < 0.1 and r_c < 0.1 and pb[0] >= 25 and pc[0] >= 25 and dt < 1800)
    record(5, ok, f"{n_params} params, loss ratios l_dm {r_dm:.3f} l_c {r_c:.3f}, item 0 bg {pb[0]:.1f} dB "
                  f"recomp {pc[0]:.1f} dB (items 0-3 mean {np.mean(pb):.1f}/{np.mean(pc):.1f}), {dt:.0f}s")


# ---- 6

def _loop_mse(a, b, m):
    tot, n = 0.0, 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            if m is None or m[i, j]:
                for c in range(a.shape[2]):
                    tot += (a[i, j, c] - b[i, j, c]) ** 2
                    n += 1
    return tot / n


def _dense_ssim(a, b, m):
    x = np.arange(11) - 5.0
    g = np.exp(-x ** 2 / 4.5)
    w = np.outer(g, g) / np.outer(g, g).sum()
    H, W, C = a.shape
    vals = np.empty((H, W, C))
    for i in range(H):
        for j in range(W):
            rows, cols = (np.arange(i - 5, i + 6) % H)[:, None], (np.arange(j - 5, j + 6) % W)[None, :]
            for c in range(C):
                pa, pb = a[rows, cols, c], b[rows, cols, c]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va, vb = (w * (pa - ma) ** 2).sum(), (w * (pb - mb) ** 2).sum()
                cv = (w * (pa - ma) * (pb - mb)).sum()
                vals[i, j, c] = (2 * ma * mb + 1e-4) * (2 * cv + 9e-4) / ((ma ** 2 + mb ** 2 + 1e-4) * (va + vb + 9e-4))
    return vals.mean() if m is None else vals[m].mean()


def test_criterion_6_metric_oracles():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(10):
        a = rng.uniform(0, 1, (16, 16, 3))
        b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
        m = rng.uniform(size=(16, 16)) > 0.5
        for mask in (None, m):
            worst = max(worst, abs(psnr(a, b, mask) - 10 * np.log10(1 / _loop_mse(a, b, mask))),
                        abs(ssim(a, b, mask) - _dense_ssim(a, b, mask)))
    a = rng.uniform(0, 0.9, (16, 16, 3))
    twenty = psnr(a, a + 0.1)
    ok = worst < 1e-6 and abs(twenty - 20.0) < 1e-9
    record(6, ok, f"max deviation from brute-force oracles {worst:.1e}, uniform 0.1 gives {twenty:.12f} dB")


# ---- 7

def test_criterion_7_protocol_fidelity():
    d = sample_recomposition(10_000, seed=7)
    in_range = bool(np.all((d[:, :2] >= -0.3) & (d[:, :2] <= 0.3)) and np.all((d[:, 2] >= 0.5) & (d[:, 2] <= 1.5)))
    ranges = (DX_RANGE, DY_RANGE, SCALE_RANGE) == ((-0.3, 0.3), (-0.3, 0.3), (0.5, 1.5))
    trips = sim_triplets(3, seed=7)
    ids = [f"item{k}" for k in range(3)]
    va = {i: (t.background, t.foreground) for i, t in zip(ids, trips)}
    vb = {i: (np.clip(t.background + 0.2, 0, 1), t.foreground) for i, t in zip(ids, trips)}
    key = lambda rec: [(r["id"], r["dx"], r["dy"], r["scale"]) for r in rec["records"]]
    shared = key(random_recomposition_eval(va, 3)) == key(random_recomposition_eval(vb, 3))
    rng = np.random.default_rng(7)
    dil_ok = True
    for _ in range(5):
        m = (rng.uniform(size=(48, 48)) > 0.99).astype(float)
        dil_ok &= np.array_equal(dilate_mask(m, 10) > 0, distance_transform_edt(m == 0) <= 10)
    ok = in_range and ranges and shared and dil_ok
    record(7, ok, f"10000 draws in range {in_range}, ranges {ranges}, shared triples {shared}, "
                  f"radius-10 dilation matches distance transform {dil_ok}")


# ---- 8

def test_criterion_8_reproducibility(tmp_path):
    import json

    trips = sim_triplets(4, seed=8)
    aes = default_autoencoders(trips, 4, 4, seed=0, dtype=np.float64, steps=0)
    dc = DenoiserConfig(latent_channels=4, width=16, depth=1, heads=2, mlp_ratio=2)

    def trainer():
        return build_trainer(trips, denoiser_config=dc, autoencoders=aes, dtype=np.float64,
                             train_config=TrainConfig(sim_ratio=1.0, batch_size=4, seed=2))

    full = trainer()
    ref = [full.train_step() for _ in range(60)]
    part = trainer()
    for _ in range(30):
        part.train_step()
    part.save(tmp_path / "m.ckpt")
    arrays = read_tensors(tmp_path / "m.ckpt")
    bitwise = all(arrays[k].tobytes() == v.tobytes() for k, v in part.model.named_arrays().items())
    resumed = trainer()
    resumed.load(tmp_path / "m.ckpt")
    same = [resumed.train_step() for _ in range(30)] == ref[30:]

    data, run, dec, ev = (tmp_path / n for n in ("data", "train", "dec", "eval"))
    codes = [cli_main(["gen-dataset", "--n", "8", "--seed", "7", "--out", str(data)]),
             cli_main(["train", "--dataset", str(data), "--steps", "200", "--out", str(run)])]
    rec = json.loads((data / "manifest.jsonl").read_text().splitlines()[0])
    codes.append(cli_main(["decompose", "--checkpoint", str(run / "model.ckpt"), "--image",
                           str(data / rec["paths"]["comp"]), "--mask", str(data / rec["paths"]["mask"]),
                           "--out", str(dec)]))
    codes.append(cli_main(["eval", "--dataset", str(data), "--checkpoint", str(run / "model.ckpt"),
                           "--out", str(ev)]))
    report = json.loads((ev / "report.json").read_text()) if (ev / "report.json").exists() else {}
    complete = (report.get("coverage", {}).get("evaluated") == 8
                and all(np.isfinite(report["aggregate"][k]["mean"]) for k in ("psnr_bg", "psnr_comp", "ssim_bg")))
    ok = bitwise and same and codes == [0, 0, 0, 0] and complete
    record(8, ok, f"checkpoint bitwise {bitwise}, resumed losses identical {same}, CLI exit codes {codes}, "
                  f"report complete {complete}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
