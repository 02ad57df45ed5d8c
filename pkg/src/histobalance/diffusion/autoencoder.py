"""Vector-quantized compressing autoencoder for the latent diffusion stage.

The encoder shrinks an RGB patch by `compression_factor` per side into a
continuous latent; the decoder snaps each latent vector to its nearest
codebook entry before decompressing. Diffusion operates on the continuous
(pre-quantization) latent.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from histobalance.checkpoints import make_checkpoint
from histobalance.errors import TrainingDiverged, ValidationError
from histobalance.torchutil import batch_indices, capture_rng, image_to_tensor, tensor_to_image, group_norm


@dataclass
class AutoencoderConfig:
    image_size: int = 64
    compression_factor: int = 4
    latent_channels: int = 8
    codebook_size: int = 256
    base_channels: int = 16
    learning_rate: float = 1e-3
    batch_size: int = 8
    steps: int = 2000
    commitment_weight: float = 0.25

    def __post_init__(self):
        f = self.compression_factor
        if f < 1 or (f & (f - 1)) != 0:
            raise ValidationError("compression_factor must be a power of two")
        if self.image_size % f:
            raise ValidationError(f"image_size {self.image_size} not divisible by f={f}")
        if self.codebook_size < 2:
            raise ValidationError("codebook_size must be >=2")




class _Res(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.norm1, self.conv1 = group_norm(c), nn.Conv2d(c, c, 3, padding=1)
        self.norm2, self.conv2 = group_norm(c), nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class VectorQuantizer(nn.Module):
    def __init__(self, codebook_size: int, dim: int):
        super().__init__()
        self.embedding = nn.Embedding(codebook_size, dim)
        nn.init.uniform_(self.embedding.weight, -1.0, 1.0)

    def nearest(self, z: torch.Tensor) -> torch.Tensor:
        # z: (B,C,H,W) -> indices (B,H,W) of the closest codebook vector
        flat = z.permute(0, 2, 3, 1).reshape(-1, z.shape[1])
        dist = (
            flat.pow(2).sum(1, keepdim=True)
            - 2 * flat @ self.embedding.weight.t()
            + self.embedding.weight.pow(2).sum(1)
        )
        return dist.argmin(1).reshape(z.shape[0], z.shape[2], z.shape[3])

    def forward(self, z: torch.Tensor):
        idx = self.nearest(z)
        z_q = self.embedding(idx).permute(0, 3, 1, 2)
        codebook_loss = F.mse_loss(z_q, z.detach())
        commitment_loss = F.mse_loss(z, z_q.detach())
        z_q = z + (z_q - z).detach()  # straight-through gradient
        return z_q, codebook_loss, commitment_loss


class VQAutoencoder(nn.Module):
    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        levels = int(np.log2(config.compression_factor))
        enc = [nn.Conv2d(3, c, 3, padding=1)]
        width = c
        for _ in range(levels):
            enc += [_Res(width), nn.Conv2d(width, width * 2, 3, stride=2, padding=1)]
            width *= 2
        enc += [_Res(width), group_norm(width), nn.SiLU(), nn.Conv2d(width, config.latent_channels, 1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(config.latent_channels, width, 1), _Res(width)]
        for _ in range(levels):
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(width, width // 2, 3, padding=1),
                _Res(width // 2),
            ]
            width //= 2
        dec += [group_norm(width), nn.SiLU(), nn.Conv2d(width, 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)
        self.quantizer = VectorQuantizer(config.codebook_size, config.latent_channels)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        f = self.config.compression_factor
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ValidationError(f"input {tuple(x.shape[-2:])} not divisible by f={f}")
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        z_q, _, _ = self.quantizer(z)
        return self.decoder(z_q)

    def forward(self, x):
        z = self.encode(x)
        z_q, codebook_loss, commitment_loss = self.quantizer(z)
        return self.decoder(z_q), codebook_loss, commitment_loss


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(255.0**2 / mse))


def train_autoencoder(patches, config: AutoencoderConfig, seed: int) -> tuple[dict, dict]:
    if not patches:
        raise ValidationError("empty training set")
    torch.manual_seed(seed)
    model = VQAutoencoder(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(seed)
    images = [image_to_tensor(p.image) for p in patches]

    history = {"loss": [], "recon": []}
    batch = min(config.batch_size, len(images))
    step = 0
    for idx in batch_indices(len(images), batch, config.steps, rng):
        x = torch.stack([images[i] for i in idx])
        recon, codebook_loss, commitment_loss = model(x)
        recon_loss = F.mse_loss(recon, x)
        loss = recon_loss + codebook_loss + config.commitment_weight * commitment_loss
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite autoencoder loss at step {step}",
                snapshot={"step": step, "batch_indices": list(map(int, idx))},
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history["loss"].append(loss.item())
        history["recon"].append(recon_loss.item())
        step += 1

    payload = make_checkpoint(
        kind="autoencoder",
        config=asdict(config),
        step=step,
        modules={"model": model.state_dict()},
        rng=capture_rng(rng),
    )
    return payload, history


def load_autoencoder(payload: dict) -> VQAutoencoder:
    if payload.get("kind") != "autoencoder":
        raise ValidationError(f"expected an autoencoder checkpoint, got {payload.get('kind')!r}")
    model = VQAutoencoder(AutoencoderConfig(**payload["config"]))
    model.load_state_dict(payload["modules"]["model"])
    model.eval()
    return model


def ae_encode(model: VQAutoencoder, image: np.ndarray) -> torch.Tensor:
    """uint8 H×W×3 -> continuous latent (C, H/f, W/f)."""
    with torch.no_grad():
        return model.encode(image_to_tensor(image).unsqueeze(0))[0]


def ae_decode(model: VQAutoencoder, latent: torch.Tensor) -> np.ndarray:
    """Latent (C,h,w) -> uint8 image, through codebook quantization."""
    with torch.no_grad():
        out = model.decode(latent.unsqueeze(0))[0]
    return tensor_to_image(out)
