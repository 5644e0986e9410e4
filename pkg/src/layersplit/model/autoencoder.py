"""Patch-linear RGB and RGBA autoencoders.

Each ``f x f`` pixel patch is mapped linearly to a ``c``-dimensional latent
vector. Colour is shifted to [-1, 1] before encoding; alpha is encoded as
is, so an image with zero alpha encodes exactly like its colour channels
under an RGBA encoder built from the RGB one.

Two modes:

* ``orthogonal``: frozen weights taken from a random orthogonal matrix;
  lossless when ``c >= f * f * 4``.
* ``trained``: weights fitted with an L1 reconstruction loss.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..optim import Adam


def _color_index(f: int, channels: int) -> np.ndarray:
    """Positions of colour entries inside a flattened ``(f, f, channels)`` patch."""
    idx = np.arange(f * f * channels).reshape(f * f, channels)
    return idx[:, :3].ravel()


class PatchAutoencoder:
    def __init__(self, channels: int, factor: int, latent_channels: int, enc_w, enc_b, dec_w, dec_b, mode: str):
        self.channels = channels
        self.factor = factor
        self.latent_channels = latent_channels
        self.mode = mode
        trainable = mode == "trained"
        self.params = {
            "enc_w": Tensor(enc_w, requires_grad=trainable),
            "enc_b": Tensor(enc_b, requires_grad=trainable),
            "dec_w": Tensor(dec_w, requires_grad=trainable),
            "dec_b": Tensor(dec_b, requires_grad=trainable),
        }
        p = factor * factor * channels
        if self.params["enc_w"].shape != (p, latent_channels) or self.params["dec_w"].shape != (latent_channels, p):
            raise ValueError("autoencoder weight shapes do not match patch/latent sizes")
        offset = np.zeros((p,))
        scale = np.ones((p,))
        col = _color_index(factor, channels) if channels == 4 else np.arange(p)
        offset[col] = -1.0
        scale[col] = 2.0
        self._offset, self._scale = offset, scale

    def _check_hw(self, H: int, W: int) -> None:
        if H % self.factor or W % self.factor:
            raise ValueError(f"image size {(H, W)} not divisible by spatial factor {self.factor}")

    def encode(self, img) -> Tensor:
        """``(B, H, W, C)`` or ``(H, W, C)`` image -> ``(B, H/f, W/f, c)`` latent."""
        x = ad.as_tensor(img, dtype=self.params["enc_w"].dtype) if not isinstance(img, Tensor) else img
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        B, H, W, C = x.shape
        if C != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {C}")
        self._check_hw(H, W)
        f = self.factor
        patches = ad.patchify(x, f)
        patches = patches * self._scale.astype(x.dtype) + self._offset.astype(x.dtype)
        z = patches @ self.params["enc_w"] + self.params["enc_b"]
        return z.reshape(B, H // f, W // f, self.latent_channels)

    def decode(self, z) -> Tensor:
        """``(B, h, w, c)`` latent -> ``(B, h*f, w*f, C)`` image (not clamped)."""
        z = ad.as_tensor(z, dtype=self.params["dec_w"].dtype) if not isinstance(z, Tensor) else z
        B, h, w, c = z.shape
        if c != self.latent_channels:
            raise ValueError(f"expected {self.latent_channels} latent channels, got {c}")
        tokens = z.reshape(B, h * w, c) @ self.params["dec_w"] + self.params["dec_b"]
        dt = tokens.dtype
        tokens = (tokens - self._offset.astype(dt)) * (1.0 / self._scale).astype(dt)
        return ad.unpatchify(tokens, self.factor, h, w)


class LayerAutoencoders:
    """The RGB and RGBA autoencoders used for backgrounds, composites, masks and foregrounds."""

    def __init__(self, rgb: PatchAutoencoder, rgba: PatchAutoencoder):
        if rgb.latent_channels != rgba.latent_channels or rgb.factor != rgba.factor:
            raise ValueError("RGB and RGBA autoencoders must share factor and latent channels")
        self.rgb = rgb
        self.rgba = rgba

    @property
    def factor(self) -> int:
        return self.rgb.factor

    @property
    def latent_channels(self) -> int:
        return self.rgb.latent_channels

    @property
    def mode(self) -> str:
        return self.rgb.mode

    def encode_rgb(self, img) -> Tensor:
        return self.rgb.encode(img)

    def decode_rgb(self, z) -> Tensor:
        return self.rgb.decode(z)

    def encode_rgba(self, img) -> Tensor:
        return self.rgba.encode(img)

    def decode_rgba(self, z) -> Tensor:
        return self.rgba.decode(z)

    def encode_mask(self, mask) -> Tensor:
        """Binary mask replicated to three channels through the RGB encoder."""
        m = np.asarray(mask, dtype=self.rgb.params["enc_w"].dtype)
        return self.rgb.encode(np.repeat(m[..., None], 3, axis=-1))

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, ae in (("ae.rgb", self.rgb), ("ae.rgba", self.rgba)):
            for k, p in ae.params.items():
                out[f"{prefix}.{k}"] = p.data
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for prefix, ae in (("ae.rgb", self.rgb), ("ae.rgba", self.rgba)):
            for k, p in ae.params.items():
                arr = arrays[f"{prefix}.{k}"]
                if arr.shape != p.shape:
                    raise ValueError(f"{prefix}.{k}: shape {arr.shape} does not match {p.shape}")
                p.data = arr.astype(p.dtype, copy=True)


def orthogonal_autoencoders(factor: int = 4, latent_channels: int | None = None, seed: int = 0,
                            dtype=np.float64) -> LayerAutoencoders:
    """Frozen autoencoders from one random orthogonal matrix ``Q``.

    The RGBA encoder is ``Q[:, :c]``; the RGB encoder keeps only the rows of
    the colour entries, so both share a latent space. Decoders are
    transposes. ``latent_channels`` defaults to the lossless ``f*f*4``.
    """
    p4 = factor * factor * 4
    c = p4 if latent_channels is None else latent_channels
    if c > p4:
        raise ValueError(f"orthogonal mode supports at most {p4} latent channels, got {c}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((p4, p4)))
    q = (q * np.sign(np.diag(r)))[:, :c]
    col = _color_index(factor, 4)
    q_rgb = q[col]
    if c < p4:
        # keep the RGB decoder a left inverse on the retained subspace
        dec_rgb = np.linalg.pinv(q_rgb)
    else:
        dec_rgb = q_rgb.T
    rgb = PatchAutoencoder(3, factor, c, q_rgb.astype(dtype), np.zeros(c, dtype), dec_rgb.astype(dtype),
                           np.zeros(len(col), dtype), "orthogonal")
    rgba = PatchAutoencoder(4, factor, c, q.astype(dtype), np.zeros(c, dtype), q.T.astype(dtype),
                            np.zeros(p4, dtype), "orthogonal")
    return LayerAutoencoders(rgb, rgba)


def rgba_from_rgb(rgb: PatchAutoencoder, mode: str | None = None) -> PatchAutoencoder:
    """RGBA autoencoder initialized from an RGB one: zero weights for alpha."""
    f, c = rgb.factor, rgb.latent_channels
    p4 = f * f * 4
    col = _color_index(f, 4)
    dt = rgb.params["enc_w"].dtype
    enc_w = np.zeros((p4, c), dt)
    enc_w[col] = rgb.params["enc_w"].data
    dec_w = np.zeros((c, p4), dt)
    dec_w[:, col] = rgb.params["dec_w"].data
    dec_b = np.zeros(p4, dt)
    dec_b[col] = rgb.params["dec_b"].data
    return PatchAutoencoder(4, f, c, enc_w, rgb.params["enc_b"].data.copy(), dec_w, dec_b, mode or rgb.mode)


def trained_autoencoders(factor: int = 4, latent_channels: int = 4, seed: int = 0, dtype=np.float32) -> LayerAutoencoders:
    """Untrained ``trained``-mode pair; fit with :func:`fit_autoencoder`."""
    p3 = factor * factor * 3
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((p3, p3)))
    w = q[:, :latent_channels]
    rgb = PatchAutoencoder(3, factor, latent_channels, w.astype(dtype), np.zeros(latent_channels, dtype),
                           w.T.astype(dtype), np.zeros(p3, dtype), "trained")
    return LayerAutoencoders(rgb, rgba_from_rgb(rgb, "trained"))


def _patch_rows(images: np.ndarray, f: int) -> np.ndarray:
    B, H, W, C = images.shape
    return images.reshape(B, H // f, f, W // f, f, C).transpose(0, 1, 3, 2, 4, 5).reshape(-1, f * f * C)


def pca_init(ae: PatchAutoencoder, images: np.ndarray, max_abs: float | None = 2.5) -> None:
    """Set weights to the top principal directions of ``images``' shifted patches.

    The encoder bias removes the patch mean and the decoder bias restores
    it, so the result is the least-squares optimal linear autoencoder. With
    ``max_abs`` each latent channel is rescaled so its largest magnitude
    over the data equals that value (the decoder undoes the scaling); this
    keeps latents inside the sampler's clipping range.
    """
    x = _patch_rows(np.asarray(images, dtype=np.float64), ae.factor) * ae._scale + ae._offset
    mu = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mu, full_matrices=False)
    c = ae.latent_channels
    if c > vt.shape[0]:
        raise ValueError(f"need at least {c} patches for a {c}-channel PCA init")
    v = vt[:c]
    std = np.ones(c)
    if max_abs is not None:
        std = np.maximum(np.abs((x - mu) @ v.T).max(axis=0) / max_abs, 1e-6)
    dt = ae.params["enc_w"].dtype
    ae.params["enc_w"].data = (v.T / std).astype(dt)
    ae.params["enc_b"].data = (-mu @ v.T / std).astype(dt)
    ae.params["dec_w"].data = (v * std[:, None]).astype(dt)
    ae.params["dec_b"].data = mu.astype(dt)


def fit_autoencoder(ae: PatchAutoencoder, images: np.ndarray, steps: int = 200, lr: float = 1e-2,
                    batch_size: int = 8, seed: int = 0, log_every: int = 20) -> list[tuple[int, float]]:
    """Fit encoder and decoder jointly with mean L1 reconstruction loss.

    Returns ``(step, full-set L1)`` checkpoints taken every ``log_every``
    steps and at the end.
    """
    if ae.mode != "trained":
        raise ValueError("only trained-mode autoencoders can be fitted")
    images = np.asarray(images, dtype=ae.params["enc_w"].dtype)
    opt = Adam(ae.params, lr=lr)
    rng = np.random.default_rng(seed)

    def full_l1() -> float:
        with ad.no_grad():
            return float(np.abs(ae.decode(ae.encode(images)).data - images).mean())

    log = [(0, full_l1())]
    for step in range(1, steps + 1):
        idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        batch = images[idx]
        opt.zero_grad()
        loss = ad.mean(ad.tensor_abs(ae.decode(ae.encode(batch)) - batch))
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps:
            log.append((step, full_l1()))
    return log


def fit_layer_autoencoders(rgb_images, rgba_images, factor: int = 4, latent_channels: int = 16,
                           steps: int = 1000, lr: float = 3e-3, seed: int = 0,
                           dtype=np.float32) -> tuple[LayerAutoencoders, dict]:
    """Trained-mode pair fitted to a dataset.

    Each autoencoder starts from a whitened PCA of its own images and is
    then refined with L1. Returns the pair and the two fit logs.
    """
    aes = trained_autoencoders(factor, latent_channels, seed, dtype)
    logs = {}
    for name, ae, images, s in (("rgb", aes.rgb, rgb_images, seed), ("rgba", aes.rgba, rgba_images, seed + 1)):
        pca_init(ae, images)
        logs[name] = fit_autoencoder(ae, images, steps=steps, lr=lr, seed=s, log_every=max(steps // 5, 1))
    return aes, logs
