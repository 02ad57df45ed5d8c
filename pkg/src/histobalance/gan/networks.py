"""Generator, style encoder, and multi-scale discriminator.

The generator decodes a style vector through mask-modulated residual blocks;
the style encoder produces a Gaussian posterior over style vectors from a
real image; the discriminator scores (image, mask) pairs at two scales and
exposes intermediate features for feature matching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from histobalance.errors import ValidationError
from histobalance.gan.spade import SPADE
from histobalance.subtypes import NUM_CLASSES
from histobalance.torchutil import group_norm

INITIAL_GRID = 8  # generator starts from an 8x8 grid and upsamples to image_size
CHANNEL_CAP = 4  # widest layer = CHANNEL_CAP * base_channels


@dataclass(frozen=True)
class StyleVector:
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValidationError(f"style vector must be 1-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("style vector has non-finite entries")
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float32))


class SpadeResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, num_classes: int = NUM_CLASSES):
        super().__init__()
        c_mid = min(c_in, c_out)
        self.spade1 = SPADE(c_in, num_classes)
        self.conv1 = nn.Conv2d(c_in, c_mid, 3, padding=1)
        self.spade2 = SPADE(c_mid, num_classes)
        self.conv2 = nn.Conv2d(c_mid, c_out, 3, padding=1)
        if c_in != c_out:
            self.spade_skip = SPADE(c_in, num_classes)
            self.conv_skip = nn.Conv2d(c_in, c_out, 1, bias=False)
        else:
            self.spade_skip = self.conv_skip = None

    def forward(self, x, mask):
        h = self.conv1(F.leaky_relu(self.spade1(x, mask), 0.2))
        h = self.conv2(F.leaky_relu(self.spade2(h, mask), 0.2))
        s = x if self.conv_skip is None else self.conv_skip(self.spade_skip(x, mask))
        return h + s


class SpadeGenerator(nn.Module):
    """Style vector + one-hot mask -> RGB image in [-1, 1]."""

    def __init__(self, image_size: int, base_channels: int, style_dim: int, num_classes: int = NUM_CLASSES):
        super().__init__()
        n_up = (image_size // INITIAL_GRID).bit_length() - 1
        widths = [min(base_channels << (n_up - i), base_channels * CHANNEL_CAP) for i in range(n_up + 1)]
        self.image_size = image_size
        self.fc = nn.Linear(style_dim, widths[0] * INITIAL_GRID * INITIAL_GRID)
        self.entry = SpadeResBlock(widths[0], widths[0], num_classes)
        self.blocks = nn.ModuleList(
            SpadeResBlock(widths[i], widths[i + 1], num_classes) for i in range(n_up)
        )
        self.head = nn.Conv2d(widths[-1], 3, 3, padding=1)

    def forward(self, style: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b = style.shape[0]
        h = self.fc(style).reshape(b, -1, INITIAL_GRID, INITIAL_GRID)
        h = self.entry(h, mask)
        for block in self.blocks:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(h, mask)
        return torch.tanh(self.head(F.leaky_relu(h, 0.2)))


class StyleEncoder(nn.Module):
    """Real image -> (mu, logvar) of a Gaussian posterior over style vectors."""

    def __init__(self, image_size: int, base_channels: int, style_dim: int):
        super().__init__()
        layers, c_in = [], 3
        size = image_size
        c = base_channels
        while size > 4:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), group_norm(c), nn.LeakyReLU(0.2)]
            c_in, c = c, min(2 * c, base_channels * CHANNEL_CAP)
            size //= 2
        self.body = nn.Sequential(*layers)
        self.mu = nn.Linear(c_in, style_dim)
        self.logvar = nn.Linear(c_in, style_dim)

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.body(image).mean(dim=(-2, -1))
        return self.mu(h), self.logvar(h)


class _PatchDiscriminator(nn.Module):
    def __init__(self, in_channels: int, base_channels: int):
        super().__init__()
        c = base_channels
        self.layers = nn.ModuleList(
            [
                nn.Sequential(nn.Conv2d(in_channels, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)),
                nn.Sequential(nn.Conv2d(c, 2 * c, 4, stride=2, padding=1), group_norm(2 * c), nn.LeakyReLU(0.2)),
                nn.Sequential(nn.Conv2d(2 * c, 4 * c, 4, stride=1, padding=1), group_norm(4 * c), nn.LeakyReLU(0.2)),
                nn.Conv2d(4 * c, 1, 4, stride=1, padding=1),
            ]
        )

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats  # last entry is the logit map


class MultiScaleDiscriminator(nn.Module):
    """Two patch discriminators, the second on a 2x downsampled input."""

    def __init__(self, base_channels: int, num_classes: int = NUM_CLASSES):
        super().__init__()
        in_ch = 3 + num_classes
        self.scales = nn.ModuleList(
            [_PatchDiscriminator(in_ch, base_channels) for _ in range(2)]
        )

    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> list[list[torch.Tensor]]:
        x = torch.cat([image, mask], dim=1)
        outputs = []
        for i, scale in enumerate(self.scales):
            inp = x if i == 0 else F.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)
            outputs.append(scale(inp))
        return outputs
