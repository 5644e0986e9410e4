"""Four-stream transformer noise predictor.

Latents of the noisy background, noisy foreground, composite and mask are
patchified with one shared projection, tagged with a shared positional
table plus a per-stream type embedding, concatenated into a single
sequence and run through pre-norm transformer blocks. Only the two noisy
streams are projected back out; the conditioning streams are context.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from .schedule import LatentPair

NOISY_BG, NOISY_FG, COND_COMPOSITE, COND_MASK = range(4)
STREAM_NAMES = ("noisy_bg", "noisy_fg", "cond_composite", "cond_mask")


@dataclass
class DenoiserConfig:
    latent_hw: tuple[int, int] = (8, 8)
    latent_channels: int = 16
    patch: int = 2
    width: int = 128
    depth: int = 3
    heads: int = 4
    mlp_ratio: int = 4
    final_norm: bool = False
    embed_init: float = 1.0

    @property
    def tokens_per_stream(self) -> int:
        h, w = self.latent_hw
        return (h // self.patch) * (w // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.latent_channels


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding ``(B, dim)`` of integer timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def _xavier(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Denoiser:
    def __init__(self, config: DenoiserConfig, seed: int = 0, dtype=np.float32):
        cfg = config
        if cfg.width % cfg.heads:
            raise ValueError(f"width {cfg.width} not divisible by heads {cfg.heads}")
        h, w = cfg.latent_hw
        if h % cfg.patch or w % cfg.patch:
            raise ValueError(f"latent size {cfg.latent_hw} not divisible by patch {cfg.patch}")
        self.config = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        D, P, N = cfg.width, cfg.patch_dim, cfg.tokens_per_stream
        raw = {
            "patch_w": _xavier(rng, P, D),
            "patch_b": np.zeros(D),
            "pos": rng.normal(0, cfg.embed_init, (N, D)),
            "type": rng.normal(0, cfg.embed_init, (4, D)),
            "time_w1": _xavier(rng, D, D),
            "time_b1": np.zeros(D),
            "time_w2": _xavier(rng, D, D),
            "time_b2": np.zeros(D),
        }
        hidden = D * cfg.mlp_ratio
        for i in range(cfg.depth):
            raw.update({
                f"blk{i}.ln1_g": np.ones(D), f"blk{i}.ln1_b": np.zeros(D),
                f"blk{i}.qkv_w": _xavier(rng, D, 3 * D), f"blk{i}.qkv_b": np.zeros(3 * D),
                f"blk{i}.proj_w": _xavier(rng, D, D), f"blk{i}.proj_b": np.zeros(D),
                f"blk{i}.ln2_g": np.ones(D), f"blk{i}.ln2_b": np.zeros(D),
                f"blk{i}.fc1_w": _xavier(rng, D, hidden), f"blk{i}.fc1_b": np.zeros(hidden),
                f"blk{i}.fc2_w": _xavier(rng, hidden, D), f"blk{i}.fc2_b": np.zeros(D),
            })
        if cfg.final_norm:
            raw.update({"lnf_g": np.ones(D), "lnf_b": np.zeros(D)})
        raw.update({
            # zero-initialized heads: the untrained model predicts eps = 0
            "head_bg_w": np.zeros((D, P)), "head_bg_b": np.zeros(P),
            "head_fg_w": np.zeros((D, P)), "head_fg_b": np.zeros(P),
        })
        self.params = {k: Tensor(v.astype(self.dtype), requires_grad=True) for k, v in raw.items()}

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {f"denoiser.{k}": p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            arr = arrays[f"denoiser.{k}"]
            if arr.shape != p.shape:
                raise ValueError(f"denoiser.{k}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    # ------------------------------------------------------------ blocks

    def _ln(self, x: Tensor, g: str, b: str) -> Tensor:
        return ad.layer_norm(x) * self.params[g] + self.params[b]

    def _attention(self, x: Tensor, i: int) -> Tensor:
        cfg = self.config
        B, L, D = x.shape
        H, dh = cfg.heads, D // cfg.heads
        qkv = x @ self.params[f"blk{i}.qkv_w"] + self.params[f"blk{i}.qkv_b"]
        qkv = ad.transpose(qkv.reshape(B, L, 3, H, dh), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        att = ad.matmul(ad.softmax(scores, axis=-1), v)
        out = ad.transpose(att, (0, 2, 1, 3)).reshape(B, L, D)
        return out @ self.params[f"blk{i}.proj_w"] + self.params[f"blk{i}.proj_b"]

    def _mlp(self, x: Tensor, i: int) -> Tensor:
        h = ad.gelu(x @ self.params[f"blk{i}.fc1_w"] + self.params[f"blk{i}.fc1_b"])
        return h @ self.params[f"blk{i}.fc2_w"] + self.params[f"blk{i}.fc2_b"]

    def hidden_tokens(self, streams, t, type_embeddings: bool = True) -> Tensor:
        """Output token features ``(B, len(streams) * N, D)``.

        ``streams`` is a sequence of ``(latent, type_id)``; each latent is
        ``(B, h, w, c)``. With ``type_embeddings=False`` the type table is
        left out, which makes the streams indistinguishable apart from
        their content.
        """
        cfg = self.config
        p = self.params
        N, D = cfg.tokens_per_stream, cfg.width
        lat = [x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype)) for x, _ in streams]
        shape0 = tuple(lat[0].shape)
        for x in lat[1:]:
            if tuple(x.shape) != shape0:
                raise ValueError(f"stream shape mismatch: {shape0} vs {tuple(x.shape)}")
        if shape0[1:] != tuple(cfg.latent_hw) + (cfg.latent_channels,):
            raise ValueError(f"latent shape {shape0[1:]} does not match model geometry "
                             f"{tuple(cfg.latent_hw) + (cfg.latent_channels,)}")
        B = shape0[0]
        tokens = ad.concat([ad.patchify(x, cfg.patch) for x in lat], axis=1)
        tags = []
        for _, type_id in streams:
            tag = p["pos"]
            if type_embeddings:
                tag = tag + ad.broadcast_to(p["type"][type_id:type_id + 1], (N, D))
            tags.append(tag)
        h = tokens @ p["patch_w"] + p["patch_b"] + ad.concat(tags, axis=0)
        temb = Tensor(timestep_embedding(t, D).astype(self.dtype))
        temb = ad.gelu(temb @ p["time_w1"] + p["time_b1"]) @ p["time_w2"] + p["time_b2"]
        if temb.shape[0] != B:
            temb = ad.broadcast_to(temb, (B, D))
        h = h + ad.broadcast_to(temb.reshape(B, 1, D), (B, len(streams) * N, D))
        for i in range(cfg.depth):
            h = h + self._attention(self._ln(h, f"blk{i}.ln1_g", f"blk{i}.ln1_b"), i)
            h = h + self._mlp(self._ln(h, f"blk{i}.ln2_g", f"blk{i}.ln2_b"), i)
        return self._ln(h, "lnf_g", "lnf_b") if cfg.final_norm else h

    def forward_streams(self, streams, t, type_embeddings: bool = True) -> LatentPair:
        """Noise predictions for whichever positions hold the two noisy streams."""
        cfg = self.config
        N = cfg.tokens_per_stream
        ids = [sid for _, sid in streams]
        if ids.count(NOISY_BG) != 1 or ids.count(NOISY_FG) != 1:
            raise ValueError("exactly one noisy_bg and one noisy_fg stream required")
        h = self.hidden_tokens(streams, t, type_embeddings)
        gh, gw = cfg.latent_hw[0] // cfg.patch, cfg.latent_hw[1] // cfg.patch
        out = []
        for sid, head in ((NOISY_BG, "head_bg"), (NOISY_FG, "head_fg")):
            k = ids.index(sid)
            tok = h[:, k * N:(k + 1) * N]
            y = tok @ self.params[f"{head}_w"] + self.params[f"{head}_b"]
            out.append(ad.unpatchify(y, cfg.patch, gh, gw))
        return LatentPair(*out)

    def predict_eps(self, x_t: LatentPair, y_comp, y_obj, t) -> LatentPair:
        streams = [(x_t.bg, NOISY_BG), (x_t.fg, NOISY_FG), (y_comp, COND_COMPOSITE), (y_obj, COND_MASK)]
        return self.forward_streams(streams, t)

    __call__ = predict_eps

    def hyperparameters(self) -> dict:
        d = asdict(self.config)
        d["dtype"] = self.dtype.name
        return d
