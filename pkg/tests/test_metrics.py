import math

import numpy as np
import pytest

from layersplit import metrics


def dense_ssim_map(a, b, size=11, sigma=1.5):
    # direct windowed sums over wrapped neighbourhoods, one pixel at a time
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    H, W = a.shape
    r = size // 2
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    out = np.empty((H, W))
    for i in range(H):
        for j in range(W):
            rows = (np.arange(i - r, i + r + 1) % H)[:, None]
            cols = (np.arange(j - r, j + r + 1) % W)[None, :]
            pa, pb = a[rows, cols], b[rows, cols]
            ma, mb = np.sum(w * pa), np.sum(w * pb)
            va = np.sum(w * (pa - ma) ** 2)
            vb = np.sum(w * (pb - mb) ** 2)
            cov = np.sum(w * (pa - ma) * (pb - mb))
            out[i, j] = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
    return out


def dense_ssim(a, b, mask=None):
    maps = np.stack([dense_ssim_map(a[..., c], b[..., c]) for c in range(a.shape[-1])], axis=-1)
    return maps.mean() if mask is None else maps[mask.astype(bool)].mean()


def loop_psnr(a, b, mask=None):
    total, n = 0.0, 0
    H, W, C = a.shape
    for i in range(H):
        for j in range(W):
            if mask is not None and not mask[i, j]:
                continue
            for c in range(C):
                total += (a[i, j, c] - b[i, j, c]) ** 2
                n += 1
    return 10 * math.log10(n / total)


def random_pair(rng, shape=(16, 16, 3)):
    a = rng.uniform(0, 1, shape)
    b = np.clip(a + rng.normal(0, 0.15, shape), 0, 1)
    mask = rng.uniform(size=shape[:2]) > 0.6
    return a, b, mask


def test_ssim_matches_dense_oracle(rng):
    for _ in range(10):
        a, b, m = random_pair(rng)
        assert abs(metrics.ssim(a, b) - dense_ssim(a, b)) < 1e-6
        assert abs(metrics.ssim(a, b, m) - dense_ssim(a, b, m)) < 1e-6


def test_psnr_matches_loop_oracle(rng):
    for _ in range(10):
        a, b, m = random_pair(rng, (12, 10, 3))
        assert abs(metrics.psnr(a, b) - loop_psnr(a, b)) < 1e-9
        assert abs(metrics.psnr(a, b, m) - loop_psnr(a, b, m)) < 1e-9


def test_uniform_offset_twenty_db(rng):
    a = rng.uniform(0, 0.8, (16, 16, 3))
    assert metrics.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert metrics.psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) == pytest.approx(20.0, abs=1e-12)


def test_identical_inputs(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    assert math.isinf(metrics.psnr(a, a))
    assert metrics.ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_anticorrelated_binary_negative(rng):
    a = (rng.uniform(size=(16, 16, 3)) > 0.5).astype(float)
    assert metrics.ssim(a, 1 - a) < 0


def test_symmetry_and_translation(rng):
    a, b, m = random_pair(rng)
    assert metrics.psnr(a, b) == metrics.psnr(b, a)
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-15)
    sh = (5, -3)
    ra, rb, rm = np.roll(a, sh, (0, 1)), np.roll(b, sh, (0, 1)), np.roll(m, sh, (0, 1))
    assert metrics.psnr(ra, rb) == pytest.approx(metrics.psnr(a, b), abs=1e-12)
    assert metrics.ssim(ra, rb) == pytest.approx(metrics.ssim(a, b), abs=1e-12)
    assert metrics.ssim(ra, rb, rm) == pytest.approx(metrics.ssim(a, b, m), abs=1e-12)


def test_full_mask_equals_unmasked(rng):
    a, b, _ = random_pair(rng)
    full = np.ones(a.shape[:2], bool)
    assert metrics.psnr(a, b, full) == metrics.psnr(a, b)
    assert metrics.ssim(a, b, full) == metrics.ssim(a, b)


def test_errors(rng):
    a = rng.uniform(size=(16, 16, 3))
    with pytest.raises(ValueError, match="no pixels"):
        metrics.psnr(a, a, np.zeros((16, 16)))
    with pytest.raises(ValueError, match="smaller"):
        metrics.ssim(a[:8, :8], a[:8, :8])
    with pytest.raises(ValueError, match="differ"):
        metrics.psnr(a, a[:, :15])
