"""Mask-conditioned denoiser in autoencoder latent space.

The denoiser predicts the noise added by the forward process; conditioning
is a one-hot subtype mask downsampled to latent resolution and concatenated
to the noisy latent. Sampling walks a strided ancestral reverse chain, and
inpainting re-noises the original latent into every position outside the
tumor footprint at each step, then composites original background pixels
back in for a bit-exact guarantee.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from histobalance.checkpoints import make_checkpoint
from histobalance.diffusion.autoencoder import VQAutoencoder, ae_decode, load_autoencoder
from histobalance.diffusion.schedule import NoiseSchedule, downsample_mask, q_forward
from histobalance.errors import TrainingDiverged, ValidationError
from histobalance.subtypes import NUM_CLASSES
from histobalance.torchutil import (
    group_norm,
    batch_indices,
    capture_rng,
    image_to_tensor,
    item_generator,
    mask_to_onehot,
)

logger = logging.getLogger(__name__)


@dataclass
class LdmConfig:
    image_size: int = 64
    compression_factor: int = 4
    latent_channels: int = 8
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.05
    base_channels: int = 48
    learning_rate: float = 1e-6
    batch_size: int = 16
    steps: int = 3000
    sampler: str = "ancestral"
    sample_steps: int = 50

    def __post_init__(self):
        if self.sample_steps > self.timesteps:
            raise ValidationError("sample_steps must be <= timesteps")
        if self.sampler not in ("ancestral", "strided"):
            raise ValidationError(f"unknown sampler {self.sampler!r}")

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.timesteps, self.beta_start, self.beta_end)




def _time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    angles = t.float()[:, None] * freqs[None, :]
    return torch.cat([angles.sin(), angles.cos()], dim=1)


class _ResT(nn.Module):
    def __init__(self, c_in, c_out, time_dim):
        super().__init__()
        self.norm1, self.conv1 = group_norm(c_in), nn.Conv2d(c_in, c_out, 3, padding=1)
        self.proj = nn.Linear(time_dim, c_out)
        self.norm2, self.conv2 = group_norm(c_out), nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Two-level UNet over latents, conditioned on timestep and mask."""

    def __init__(self, config: LdmConfig):
        super().__init__()
        c = config.base_channels
        time_dim = c * 2
        in_ch = config.latent_channels + NUM_CLASSES
        self.time_mlp = nn.Sequential(nn.Linear(c, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.emb_dim = c
        self.stem = nn.Conv2d(in_ch, c, 3, padding=1)
        self.enc1 = _ResT(c, c, time_dim)
        self.down = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.mid = _ResT(2 * c, 2 * c, time_dim)
        self.up = nn.Conv2d(2 * c, c, 3, padding=1)
        self.dec1 = _ResT(2 * c, c, time_dim)
        self.head_norm = group_norm(c)
        self.head = nn.Conv2d(c, config.latent_channels, 3, padding=1)
        # zero-init head: the untrained model predicts exactly zero noise
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x, t, cond):
        emb = self.time_mlp(_time_embedding(t, self.emb_dim))
        h = self.stem(torch.cat([x, cond], dim=1))
        h1 = self.enc1(h, emb)
        h2 = self.mid(self.down(h1), emb)
        h3 = self.up(F.interpolate(h2, scale_factor=2, mode="nearest"))
        h4 = self.dec1(torch.cat([h3, h1], dim=1), emb)
        return self.head(F.silu(self.head_norm(h4)))


def _latent_cond(mask: np.ndarray, factor: int) -> torch.Tensor:
    return mask_to_onehot(downsample_mask(mask, factor))


def _check_compatible(config: LdmConfig, ae: VQAutoencoder):
    ae_cfg = ae.config
    if (
        ae_cfg.compression_factor != config.compression_factor
        or ae_cfg.latent_channels != config.latent_channels
    ):
        raise ValidationError(
            "autoencoder/denoiser mismatch: "
            f"f {ae_cfg.compression_factor} vs {config.compression_factor}, "
            f"channels {ae_cfg.latent_channels} vs {config.latent_channels}"
        )


def _resolve_ae(ae) -> VQAutoencoder:
    return ae if isinstance(ae, VQAutoencoder) else load_autoencoder(ae)


def train_ldm(patches, ae, config: LdmConfig, seed: int, resume: dict | None = None) -> tuple[dict, dict]:
    """Train the noise predictor on autoencoded patches.

    `config.steps` counts optimizer steps for this call, so resuming with
    steps=0 re-emits the loaded state unchanged.
    """
    if not patches:
        raise ValidationError("empty training set")
    ae_model = _resolve_ae(ae)
    _check_compatible(config, ae_model)
    schedule = config.schedule()

    torch.manual_seed(seed)
    model = Denoiser(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    noise_gen = torch.Generator().manual_seed(seed + 1)
    rng = np.random.default_rng(seed)
    step = 0
    if resume is not None:
        if resume.get("kind") != "ldm":
            raise ValidationError("resume payload is not an ldm checkpoint")
        model.load_state_dict(resume["modules"]["model"])
        _restore_optimizer(optimizer, resume["modules"]["optimizer"])
        noise_gen.set_state(resume["rng"]["noise"])
        rng.bit_generator.state = _numpy_state(resume["rng"]["numpy"])
        step = resume["step"]
        scale = resume["extras"]["latent_scale"]
        latents = _encode_all(ae_model, patches)
    else:
        latents = _encode_all(ae_model, patches)
        scale = float(1.0 / torch.cat([z.reshape(-1) for z in latents]).std())
    conds = [_latent_cond(p.mask, config.compression_factor) for p in patches]

    history = {"loss": []}
    batch = min(config.batch_size, len(latents))
    for idx in batch_indices(len(latents), batch, config.steps, rng):
        x0 = torch.stack([latents[i] for i in idx]) * scale
        cond = torch.stack([conds[i] for i in idx])
        t = rng.integers(1, schedule.T + 1, size=len(idx))
        noise = torch.randn(x0.shape, generator=noise_gen)
        x_t = q_forward(x0, t, noise, schedule)
        pred = model(x_t, torch.from_numpy(t), cond)
        loss = F.mse_loss(pred, noise)
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite ldm loss at step {step}",
                snapshot={"step": step, "batch_indices": list(map(int, idx)), "t": t.tolist()},
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history["loss"].append(loss.item())
        step += 1

    rng_state = capture_rng(rng)
    rng_state["noise"] = noise_gen.get_state()
    payload = make_checkpoint(
        kind="ldm",
        config=asdict(config),
        step=step,
        modules={"model": model.state_dict(), "optimizer": _optimizer_to_checkpoint(optimizer)},
        rng=rng_state,
        extras={"latent_scale": scale, "betas": torch.from_numpy(schedule.betas)},
    )
    return payload, history


def _encode_all(ae_model: VQAutoencoder, patches) -> list[torch.Tensor]:
    out = []
    with torch.no_grad():
        for p in patches:
            out.append(ae_model.encode(image_to_tensor(p.image).unsqueeze(0))[0])
    return out


def _optimizer_to_checkpoint(optimizer) -> dict:
    # keyed by stringified ints so the payload stays weights_only-loadable
    state = optimizer.state_dict()
    return {
        "state": {str(k): v for k, v in state["state"].items()},
        "param_groups_lr": [g["lr"] for g in state["param_groups"]],
    }


def _restore_optimizer(optimizer, saved: dict):
    state = optimizer.state_dict()
    state["state"] = {int(k): v for k, v in saved["state"].items()}
    for g, lr in zip(state["param_groups"], saved["param_groups_lr"]):
        g["lr"] = lr
    optimizer.load_state_dict(state)


def _numpy_state(encoded: str) -> dict:
    import json

    return json.loads(encoded)


def load_denoiser(payload: dict) -> tuple[Denoiser, LdmConfig, NoiseSchedule, float]:
    if payload.get("kind") != "ldm":
        raise ValidationError(f"expected an ldm checkpoint, got {payload.get('kind')!r}")
    config = LdmConfig(**payload["config"])
    model = Denoiser(config)
    model.load_state_dict(payload["modules"]["model"])
    model.eval()
    schedule = NoiseSchedule(betas=payload["extras"]["betas"].numpy())
    return model, config, schedule, float(payload["extras"]["latent_scale"])


def _step_sequence(T: int, sample_steps: int) -> list[int]:
    ts = np.unique(np.round(np.linspace(0, T, sample_steps + 1)).astype(int))
    return ts[::-1].tolist()  # T ... 0, strictly decreasing


def _reverse_step(model, schedule, x, t, s, cond, noise):
    """One ancestral update from timestep t down to s (s < t)."""
    ab_t = schedule.alpha_bar[t]
    ab_s = schedule.alpha_bar[s]
    t_vec = torch.full((x.shape[0],), t, dtype=torch.long)
    eps = model(x, t_vec, cond)
    x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    if s == 0:
        return x0
    var = (1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s)
    dir_coeff = math.sqrt(max(1.0 - ab_s - var, 0.0))
    return math.sqrt(ab_s) * x0 + dir_coeff * eps + math.sqrt(var) * noise


def ldm_sample(payload: dict, ae, mask: np.ndarray, seed: int) -> np.ndarray:
    """Generate one image for one conditioning mask, deterministically."""
    return ldm_sample_batch(payload, ae, [mask], [seed])[0]


def ldm_sample_batch(payload: dict, ae, masks, seeds) -> list[np.ndarray]:
    """Batched sampling; per-item noise streams make the output independent
    of how the masks are grouped into batches."""
    if len(masks) != len(seeds):
        raise ValidationError("need one seed per mask")
    model, config, schedule, scale = load_denoiser(payload)
    ae_model = _resolve_ae(ae)
    _check_compatible(config, ae_model)
    size = config.image_size
    for m in masks:
        if m.shape != (size, size):
            raise ValidationError(f"mask {m.shape} incompatible with image_size {size}")

    f = config.compression_factor
    latent_hw = size // f
    gens = [item_generator(s) for s in seeds]
    shape = (config.latent_channels, latent_hw, latent_hw)
    x = torch.stack([torch.randn(shape, generator=g) for g in gens])
    cond = torch.stack([_latent_cond(m, f) for m in masks])

    steps = _step_sequence(schedule.T, config.sample_steps)
    with torch.no_grad():
        for t, s in zip(steps, steps[1:]):
            noise = torch.stack([torch.randn(shape, generator=g) for g in gens])
            x = _reverse_step(model, schedule, x, t, s, cond, noise)
    return [ae_decode(ae_model, x[i] / scale) for i in range(len(masks))]


def ldm_inpaint(
    payload: dict,
    ae,
    image: np.ndarray,
    mask: np.ndarray,
    tumor_region: np.ndarray,
    seed: int,
) -> np.ndarray:
    """Resynthesize tumor pixels under `mask` conditioning; everything
    outside `tumor_region` is returned bit-exact."""
    model, config, schedule, scale = load_denoiser(payload)
    ae_model = _resolve_ae(ae)
    _check_compatible(config, ae_model)
    size = config.image_size
    if image.shape[:2] != (size, size) or mask.shape != (size, size):
        raise ValidationError("image/mask incompatible with checkpoint image_size")
    if tumor_region.shape != (size, size):
        raise ValidationError("tumor_region shape mismatch")
    tumor = tumor_region.astype(bool)
    if not tumor.any():
        logger.warning("empty tumor region, returning the input unchanged")
        return image.copy()

    f = config.compression_factor
    hw = size // f
    # latent positions whose full f×f footprint lies outside the tumor
    touched = tumor.reshape(hw, f, hw, f).any(axis=(1, 3))
    keep = torch.from_numpy(~touched)

    with torch.no_grad():
        z0 = ae_model.encode(image_to_tensor(image).unsqueeze(0)) * scale
    gen = item_generator(seed)
    shape = z0.shape
    cond = _latent_cond(mask, f).unsqueeze(0)
    x = torch.randn(shape, generator=gen)
    steps = _step_sequence(schedule.T, config.sample_steps)
    with torch.no_grad():
        for t, s in zip(steps, steps[1:]):
            noise = torch.randn(shape, generator=gen)
            x = _reverse_step(model, schedule, x, t, s, cond, noise)
            if s == 0:
                x = torch.where(keep, z0, x)
            else:
                renoised = q_forward(z0, s, torch.randn(shape, generator=gen), schedule)
                x = torch.where(keep, renoised, x)
    out = ae_decode(ae_model, x[0] / scale)
    out[~tumor] = image[~tumor]  # hard guarantee, independent of the decoder
    return out
