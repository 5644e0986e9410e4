from .autoencoder import (
    LayerAutoencoders,
    PatchAutoencoder,
    fit_autoencoder,
    fit_layer_autoencoders,
    pca_init,
    orthogonal_autoencoders,
    rgba_from_rgb,
    trained_autoencoders,
)
from .denoiser import COND_COMPOSITE, COND_MASK, NOISY_BG, NOISY_FG, Denoiser, DenoiserConfig
from .sampling import ddim_sample, ddim_timesteps, decompose
from .schedule import LatentPair, NoiseSchedule, forward_noise, make_schedule, recover_x0
