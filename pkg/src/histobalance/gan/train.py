"""Adversarial training loop and mask-conditioned image generation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from histobalance.checkpoints import make_checkpoint
from histobalance.errors import TrainingDiverged, ValidationError
from histobalance.gan.networks import MultiScaleDiscriminator, SpadeGenerator, StyleEncoder, StyleVector
from histobalance.torchutil import (
    batch_indices,
    capture_rng,
    image_to_tensor,
    item_generator,
    mask_to_onehot,
    tensor_to_image,
)

logger = logging.getLogger(__name__)


def _default_weights() -> dict:
    return {"adversarial": 1.0, "feature_matching": 10.0, "kl": 0.05}


@dataclass
class GanConfig:
    image_size: int = 64
    base_channels: int = 24
    style_dim: int = 16
    learning_rate: float = 1e-5
    batch_size: int = 16
    steps: int = 1000
    loss_weights: dict = field(default_factory=_default_weights)

    def __post_init__(self):
        size = self.image_size
        if size < 16 or size % 16 != 0 or (size // 16) & (size // 16 - 1) != 0:
            raise ValidationError(f"image_size must be a power-of-two multiple of 16, got {size}")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        missing = set(_default_weights()) - set(self.loss_weights)
        if missing:
            raise ValidationError(f"loss_weights missing {sorted(missing)}")
        if any(w < 0 for w in self.loss_weights.values()):
            raise ValidationError("loss weights must be >= 0")


def _build(config: GanConfig) -> tuple[SpadeGenerator, StyleEncoder, MultiScaleDiscriminator]:
    gen = SpadeGenerator(config.image_size, config.base_channels, config.style_dim)
    enc = StyleEncoder(config.image_size, config.base_channels, config.style_dim)
    disc = MultiScaleDiscriminator(config.base_channels)
    return gen, enc, disc


def _feature_match(real_feats, fake_feats) -> torch.Tensor:
    terms = [
        F.l1_loss(f, r.detach())
        for real_scale, fake_scale in zip(real_feats, fake_feats)
        for r, f in zip(real_scale[:-1], fake_scale[:-1])
    ]
    return torch.stack(terms).mean()


def train_gan(patches, config: GanConfig, seed: int, resume: dict | None = None) -> tuple[dict, dict]:
    """Alternating discriminator/generator hinge training.

    `config.steps` counts optimizer steps for this call, so resuming with
    steps=0 re-emits the loaded state unchanged.
    """
    if not patches:
        raise ValidationError("empty training set")
    torch.manual_seed(seed)
    gen, enc, disc = _build(config)
    opt_g = torch.optim.Adam(list(gen.parameters()) + list(enc.parameters()), lr=config.learning_rate, betas=(0.0, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.learning_rate, betas=(0.0, 0.999))
    noise_gen = torch.Generator().manual_seed(seed + 1)
    rng = np.random.default_rng(seed)
    step = 0
    if resume is not None:
        if resume.get("kind") != "gan":
            raise ValidationError("resume payload is not a gan checkpoint")
        gen.load_state_dict(resume["modules"]["generator"])
        enc.load_state_dict(resume["modules"]["style_encoder"])
        disc.load_state_dict(resume["modules"]["discriminator"])
        _restore_optimizer(opt_g, resume["modules"]["opt_g"])
        _restore_optimizer(opt_d, resume["modules"]["opt_d"])
        noise_gen.set_state(resume["rng"]["noise"])
        rng.bit_generator.state = json.loads(resume["rng"]["numpy"])
        step = resume["step"]

    images = [image_to_tensor(p.image) for p in patches]
    masks = [mask_to_onehot(p.mask) for p in patches]
    w = config.loss_weights
    history = {"d_loss": [], "g_loss": [], "adversarial": [], "feature_matching": [], "kl": []}
    batch = min(config.batch_size, len(images))
    for idx in batch_indices(len(images), batch, config.steps, rng):
        real = torch.stack([images[i] for i in idx])
        mask = torch.stack([masks[i] for i in idx])

        mu, logvar = enc(real)
        eps = torch.randn(mu.shape, generator=noise_gen)
        style = mu + torch.exp(0.5 * logvar) * eps
        fake = gen(style, mask)

        # discriminator: hinge on real vs detached fake
        d_real = disc(real, mask)
        d_fake = disc(fake.detach(), mask)
        d_loss = torch.stack(
            [F.relu(1.0 - s[-1]).mean() + F.relu(1.0 + f[-1]).mean() for s, f in zip(d_real, d_fake)]
        ).mean()
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        # generator: adversarial + feature matching + style KL
        d_real = disc(real, mask)
        d_fake = disc(fake, mask)
        adv = -torch.stack([f[-1].mean() for f in d_fake]).mean()
        fm = _feature_match(d_real, d_fake)
        kl = -0.5 * (1 + logvar - mu.pow(2) - logvar.exp()).sum(dim=1).mean()
        g_loss = w["adversarial"] * adv + w["feature_matching"] * fm + w["kl"] * kl
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        terms = {"d_loss": d_loss, "g_loss": g_loss, "adversarial": adv, "feature_matching": fm, "kl": kl}
        bad = [name for name, value in terms.items() if not torch.isfinite(value)]
        if bad:
            raise TrainingDiverged(
                f"non-finite gan loss terms {bad} at step {step}",
                snapshot={"step": step, "batch_indices": list(map(int, idx)),
                          "losses": {k: float(v) for k, v in terms.items()}},
            )
        for name, value in terms.items():
            history[name].append(value.item())
        step += 1

    rng_state = capture_rng(rng)
    rng_state["noise"] = noise_gen.get_state()
    payload = make_checkpoint(
        kind="gan",
        config=asdict(config),
        step=step,
        modules={
            "generator": gen.state_dict(),
            "style_encoder": enc.state_dict(),
            "discriminator": disc.state_dict(),
            "opt_g": _optimizer_to_checkpoint(opt_g),
            "opt_d": _optimizer_to_checkpoint(opt_d),
        },
        rng=rng_state,
        extras={},
    )
    return payload, history


def _optimizer_to_checkpoint(optimizer) -> dict:
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


def load_generator(payload: dict) -> tuple[SpadeGenerator, GanConfig]:
    if payload.get("kind") != "gan":
        raise ValidationError(f"expected a gan checkpoint, got {payload.get('kind')!r}")
    config = GanConfig(**payload["config"])
    gen = SpadeGenerator(config.image_size, config.base_channels, config.style_dim)
    gen.load_state_dict(payload["modules"]["generator"])
    gen.eval()
    return gen, config


def gan_generate(payload: dict, mask: np.ndarray, style: StyleVector | int) -> np.ndarray:
    """Deterministic image for (checkpoint, mask, style); an int style is a
    seed for a standard-normal style draw."""
    gen, config = load_generator(payload)
    size = config.image_size
    if mask.shape != (size, size):
        raise ValidationError(f"mask {mask.shape} incompatible with image_size {size}")
    if isinstance(style, StyleVector):
        if style.values.shape[0] != config.style_dim:
            raise ValidationError(f"style length {style.values.shape[0]} != style_dim {config.style_dim}")
        z = torch.from_numpy(style.values)
    else:
        z = torch.randn(config.style_dim, generator=item_generator(style))
    with torch.no_grad():
        out = gen(z.unsqueeze(0), mask_to_onehot(mask).unsqueeze(0))
    return tensor_to_image(out[0])
