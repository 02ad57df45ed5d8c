from histobalance.diffusion.schedule import NoiseSchedule, downsample_mask, q_forward
from histobalance.diffusion.autoencoder import (
    AutoencoderConfig,
    VQAutoencoder,
    ae_decode,
    ae_encode,
    load_autoencoder,
    psnr,
    train_autoencoder,
)
from histobalance.diffusion.ldm import (
    Denoiser,
    LdmConfig,
    ldm_inpaint,
    ldm_sample,
    ldm_sample_batch,
    load_denoiser,
    train_ldm,
)

__all__ = [
    "NoiseSchedule",
    "downsample_mask",
    "q_forward",
    "AutoencoderConfig",
    "VQAutoencoder",
    "ae_encode",
    "ae_decode",
    "load_autoencoder",
    "psnr",
    "train_autoencoder",
    "Denoiser",
    "LdmConfig",
    "ldm_sample",
    "ldm_sample_batch",
    "ldm_inpaint",
    "load_denoiser",
    "train_ldm",
]
