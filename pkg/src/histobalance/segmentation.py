"""Binary tumor segmentation: residual-encoder U-Net and its training loop.

The network sees RGB patches and predicts a single tumor-probability map;
subtype codes collapse to tumor/background before they ever reach the loss,
so subtype identity cannot leak into training. GroupNorm keeps forward
passes independent of batch composition, which the determinism and
frozen-weights contracts rely on.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from histobalance.errors import TrainingDiverged, ValidationError
from histobalance.evaluation import dice_score
from histobalance.torchutil import batch_indices, capture_rng, image_to_tensor, group_norm

CE_CLAMP = 1e-7
DICE_SMOOTH = 1.0


@dataclass
class SegConfig:
    image_size: int = 64
    base_channels: int = 24
    encoder_depth: int = 3
    use_pretrained_encoder: bool = False
    learning_rate: float = 1e-6
    batch_size: int = 16
    steps: int = 600
    lambda_dice: float = 0.5
    lambda_ce: float = 0.5
    threshold: float = 0.5
    val_every: int = 100

    def __post_init__(self):
        if abs(self.lambda_dice + self.lambda_ce - 1.0) > 1e-9:
            raise ValidationError("lambda_dice + lambda_ce must equal 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError("threshold must lie in (0,1)")
        if self.encoder_depth < 1:
            raise ValidationError("encoder_depth must be >=1")


@dataclass
class BinaryPrediction:
    probabilities: np.ndarray
    binary: np.ndarray
    threshold: float


def binary_target(mask: np.ndarray) -> np.ndarray:
    """Collapse subtype codes to {0,1}: any tumor subtype becomes 1."""
    return (np.asarray(mask) > 0).astype(np.uint8)


def dice_ce_loss(probabilities: torch.Tensor, target: torch.Tensor,
                 lambda_dice: float = 0.5, lambda_ce: float = 0.5) -> torch.Tensor:
    """lambda_dice*(1 - soft Dice) + lambda_ce*mean BCE over all pixels."""
    if probabilities.shape != target.shape:
        raise ValidationError(f"shape mismatch {tuple(probabilities.shape)} vs {tuple(target.shape)}")
    uniq = torch.unique(target)
    if not bool(((uniq == 0) | (uniq == 1)).all()):
        raise ValidationError("target must be binary")
    p = probabilities.reshape(-1)
    y = target.reshape(-1).to(p.dtype)
    inter = (p * y).sum()
    dice = (2.0 * inter + DICE_SMOOTH) / (p.sum() + y.sum() + DICE_SMOOTH)
    p_clamped = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP)
    ce = -(y * p_clamped.log() + (1.0 - y) * (1.0 - p_clamped).log()).mean()
    return lambda_dice * (1.0 - dice) + lambda_ce * ce




class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.norm1 = group_norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = group_norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SegUNet(nn.Module):
    """U-Net over RGB with a residual encoder and a single sigmoid output."""

    def __init__(self, config: SegConfig):
        super().__init__()
        c = config.base_channels
        depth = config.encoder_depth
        widths = [c * 2**i for i in range(depth + 1)]
        self.stem = nn.Conv2d(3, widths[0], 3, padding=1)
        self.enc = nn.ModuleList([ResBlock(w, w) for w in widths[:-1]])
        self.down = nn.ModuleList(
            [nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(depth)]
        )
        self.mid = ResBlock(widths[-1], widths[-1])
        self.up = nn.ModuleList(
            [nn.Conv2d(widths[i + 1], widths[i], 3, padding=1) for i in reversed(range(depth))]
        )
        self.dec = nn.ModuleList([ResBlock(2 * w, w) for w in reversed(widths[:-1])])
        self.head = nn.Sequential(group_norm(widths[0]), nn.SiLU(), nn.Conv2d(widths[0], 1, 1))

    def forward(self, x):
        h = self.stem(x)
        skips = []
        for block, down in zip(self.enc, self.down):
            h = block(h)
            skips.append(h)
            h = down(h)
        h = self.mid(h)
        for up, block, skip in zip(self.up, self.dec, reversed(skips)):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skip], dim=1))
        return self.head(h)


def _stack_batch(items, idx) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.stack([image_to_tensor(items[i].image) for i in idx])
    targets = torch.stack(
        [torch.from_numpy(binary_target(items[i].mask)).float() for i in idx]
    ).unsqueeze(1)
    return images, targets


def _validation_dice(model: nn.Module, items, threshold: float, batch: int = 16) -> float:
    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(items), batch):
            chunk = list(range(start, min(start + batch, len(items))))
            images, targets = _stack_batch(items, chunk)
            probs = torch.sigmoid(model(images))
            pred = (probs > threshold).byte().squeeze(1).numpy()
            for k in range(pred.shape[0]):
                scores.append(dice_score(pred[k], targets[k, 0].byte().numpy()))
    model.train()
    return float(np.mean(scores))


def train_segmenter(items, config: SegConfig, seed: int, val_items=None) -> tuple[dict, dict]:
    """Train the U-Net; returns (checkpoint payload, history).

    Model selection picks the step with the best validation Dice when a
    validation set is given, otherwise the final weights are kept.
    """
    from histobalance.checkpoints import make_checkpoint

    if not items:
        raise ValidationError("empty training dataset")
    torch.manual_seed(seed)
    model = SegUNet(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(seed)

    history = {"train_loss": [], "val_dice": [], "val_steps": [], "best_step": None}
    best_state = None
    best_dice = -1.0
    batch_size = min(config.batch_size, len(items))

    step = 0
    for idx in batch_indices(len(items), batch_size, config.steps, rng):
        images, targets = _stack_batch(items, idx)
        probs = torch.sigmoid(model(images))
        loss = dice_ce_loss(probs, targets, config.lambda_dice, config.lambda_ce)
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite segmenter loss at step {step}",
                snapshot={"step": step, "batch_indices": list(map(int, idx))},
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history["train_loss"].append(loss.item())
        step += 1
        if val_items and (step % config.val_every == 0 or step == config.steps):
            vd = _validation_dice(model, val_items, config.threshold)
            history["val_dice"].append(vd)
            history["val_steps"].append(step)
            if vd > best_dice:
                best_dice = vd
                best_state = copy.deepcopy(model.state_dict())
                history["best_step"] = step

    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        history["best_step"] = step

    payload = make_checkpoint(
        kind="segmenter",
        config=asdict(config),
        step=step,
        modules={"model": model.state_dict()},
        rng=capture_rng(rng),
        extras={"best_val_dice": best_dice if best_dice >= 0 else None},
    )
    return payload, history


def load_segmenter(payload: dict) -> tuple[SegUNet, SegConfig]:
    if payload.get("kind") != "segmenter":
        raise ValidationError(f"expected a segmenter checkpoint, got {payload.get('kind')!r}")
    config = SegConfig(**payload["config"])
    model = SegUNet(config)
    model.load_state_dict(payload["modules"]["model"])
    model.eval()
    return model, config


def predict_mask(payload: dict, image: np.ndarray) -> BinaryPrediction:
    """Pure prediction for one RGB patch."""
    model, config = load_segmenter(payload)
    if image.shape[0] != config.image_size or image.shape[1] != config.image_size:
        raise ValidationError(
            f"image is {image.shape[:2]}, checkpoint expects "
            f"{(config.image_size, config.image_size)}"
        )
    with torch.no_grad():
        probs = torch.sigmoid(model(image_to_tensor(image).unsqueeze(0)))[0, 0]
    probabilities = probs.numpy().astype(np.float32)
    return BinaryPrediction(
        probabilities=probabilities,
        binary=(probabilities > config.threshold).astype(np.uint8),
        threshold=config.threshold,
    )
