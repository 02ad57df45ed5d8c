"""Forward-noising schedule and latent-resolution mask geometry."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from histobalance.errors import ValidationError


@dataclass
class NoiseSchedule:
    """Per-step noise variances and their cumulative signal coefficients.

    alpha_bar has length T+1 with alpha_bar[0] = 1, so timestep t=0 means
    "no noise at all" and t=T is the noisiest state.
    """

    betas: np.ndarray
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or self.betas.size == 0:
            raise ValidationError("betas must be a non-empty 1-d array")
        if not (self.betas[0] > 0 and self.betas[-1] < 1):
            raise ValidationError("betas must lie in (0,1)")
        if (np.diff(self.betas) < 0).any():
            raise ValidationError("betas must be non-decreasing")
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])
        if (np.diff(self.alpha_bar) >= 0).any():
            raise ValidationError("alpha_bar must be strictly decreasing")

    @property
    def T(self) -> int:
        return self.betas.size

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(betas=np.linspace(beta_start, beta_end, T))


def q_forward(x0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise x0 to timestep t: sqrt(a_bar_t)*x0 + sqrt(1-a_bar_t)*noise.

    t may be a scalar or a per-item vector matching x0's leading dimension.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if (t_arr < 0).any() or (t_arr > schedule.T).any():
        raise ValidationError(f"t out of range [0, {schedule.T}]")
    ab = torch.as_tensor(schedule.alpha_bar[t_arr], dtype=x0.dtype)
    if np.isscalar(t) or np.asarray(t).ndim == 0:
        ab = ab[0]
    else:
        ab = ab.reshape(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Majority vote per factor×factor block; ties go to the lowest code."""
    if factor < 1:
        raise ValidationError("factor must be >=1")
    h, w = mask.shape
    if h % factor or w % factor:
        raise ValidationError(f"mask {mask.shape} not divisible by factor {factor}")
    if factor == 1:
        return mask.copy()
    blocks = mask.reshape(h // factor, factor, w // factor, factor)
    codes = np.unique(mask)
    counts = np.stack([(blocks == c).sum(axis=(1, 3)) for c in codes])
    return codes[np.argmax(counts, axis=0)].astype(mask.dtype)
