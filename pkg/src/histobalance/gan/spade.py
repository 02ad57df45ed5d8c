"""Spatially-adaptive normalization: per-pixel affine modulation from a mask.

Activations are normalized per channel over spatial positions, then scaled
and shifted by maps a small convolutional head computes from the one-hot
class mask. Statistics are taken per sample, so the result never depends on
how items were grouped into a batch.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from histobalance.errors import ValidationError
from histobalance.subtypes import NUM_CLASSES

NORM_EPS = 1e-5


class SPADE(nn.Module):
    """Computes gamma/beta maps from the mask and applies them.

    `kernel_size=1` makes the maps a pure per-pixel function of the mask,
    which is the configuration with no spatial receptive field.
    """

    def __init__(self, channels: int, num_classes: int = NUM_CLASSES, hidden: int = 32, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.shared = nn.Sequential(
            nn.Conv2d(num_classes, hidden, kernel_size, padding=pad), nn.ReLU()
        )
        self.gamma_head = nn.Conv2d(hidden, channels, kernel_size, padding=pad)
        self.beta_head = nn.Conv2d(hidden, channels, kernel_size, padding=pad)
        # receptive-field radius of the gamma/beta maps, in mask pixels
        self.field_radius = 2 * (kernel_size // 2)

    def maps(self, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B,K,h,w) one-hot mask -> (gamma, beta), each (B,C,h,w)."""
        h = self.shared(mask)
        return 1.0 + self.gamma_head(h), self.beta_head(h)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if mask.shape[-2:] != x.shape[-2:]:
            mask = F.interpolate(mask, size=x.shape[-2:], mode="nearest")
        mean = x.mean(dim=(-2, -1), keepdim=True)
        var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
        normalized = (x - mean) / torch.sqrt(var + NORM_EPS)
        gamma, beta = self.maps(mask)
        return normalized * gamma + beta


def spade_modulation(activations, mask, params: SPADE) -> torch.Tensor:
    """Modulate a single (C,h,w) activation map by a (K,h,w) one-hot mask.

    Output = normalize(activations) * gamma(mask) + beta(mask); a channel
    with zero spatial variance normalizes to 0, so its output is beta(mask).
    """
    x = torch.as_tensor(np.asarray(activations), dtype=torch.float32)
    m = torch.as_tensor(np.asarray(mask), dtype=torch.float32)
    if x.ndim != 3 or m.ndim != 3:
        raise ValidationError(f"expected (C,h,w) activations and (K,h,w) mask, got {tuple(x.shape)} and {tuple(m.shape)}")
    if m.shape[-2:] != x.shape[-2:]:
        raise ValidationError(f"spatial shape mismatch: activations {tuple(x.shape[-2:])}, mask {tuple(m.shape[-2:])}")
    if not torch.isfinite(x).all():
        raise ValidationError("activations contain non-finite values")
    sums = m.sum(dim=0)
    if not torch.allclose(sums, torch.ones_like(sums)) or not ((m == 0) | (m == 1)).all():
        raise ValidationError("mask must be one-hot per pixel")
    with torch.no_grad():
        return params(x.unsqueeze(0), m.unsqueeze(0))[0]
