"""Subtype balancing: mask randomization, weighted sampling, dataset mixing.

The balancing mechanism is per-instance label reassignment: every tumor
instance in a patch mask is redrawn uniformly over the tumor classes, so a
pool of synthetic images generated from such masks is subtype-balanced in
expectation. Baseline samplers and real/synthetic mixing live here too.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from histobalance.errors import ValidationError
from histobalance.patches import LabeledPatch
from histobalance.subtypes import SubtypeClass

logger = logging.getLogger(__name__)

STRATEGY_KINDS = ("tumor_sampled", "subtype_sampled")
MIX_METHODS = ("gan", "diffusion", "inpaint")
PAPER_RATIOS = (0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class SamplingStrategy:
    kind: str
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValidationError(f"kind must be one of {STRATEGY_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class MixSpec:
    ratio: float
    method: str
    seed: int = 0

    def __post_init__(self):
        if self.ratio < 0:
            raise ValidationError(f"ratio must be >=0, got {self.ratio}")
        if self.method not in MIX_METHODS:
            raise ValidationError(f"method must be one of {MIX_METHODS}, got {self.method!r}")


@dataclass
class GeneratedSample:
    """One synthetic image plus the conditioning mask it was generated from."""

    image: np.ndarray
    mask: np.ndarray
    method: str
    seed: int
    source_patch: str = ""

    def validate(self) -> "GeneratedSample":
        if self.image.shape[:2] != self.mask.shape:
            raise ValidationError("image and mask disagree on spatial shape")
        if self.method not in MIX_METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        return self


@dataclass
class DatasetItem:
    """Unit of a segmentation training set: image, mask, and where it came from."""

    image: np.ndarray
    mask: np.ndarray
    source: str  # "real" or the generating method
    provenance: dict = field(default_factory=dict)


def randomize_instance_subtypes(
    patch: LabeledPatch, classes: Sequence[SubtypeClass], seed: int
) -> np.ndarray:
    """Redraw every instance's subtype i.i.d. uniform over `classes`.

    Returns a new mask; the patch (geometry, instance map, image) is left
    untouched and background pixels keep code 0 exactly.
    """
    if not classes:
        raise ValidationError("classes must be non-empty")
    if any(c.code == 0 for c in classes):
        raise ValidationError("classes must be tumor subtypes, not background")
    ids = np.unique(patch.instances)
    ids = ids[ids > 0]
    new_mask = patch.mask.copy()
    if ids.size == 0:
        return new_mask
    rng = np.random.default_rng(seed)
    codes = np.array([c.code for c in classes], dtype=np.uint8)
    drawn = codes[rng.integers(0, len(codes), size=ids.size)]
    lookup = np.zeros(int(ids.max()) + 1, dtype=np.uint8)
    lookup[ids] = drawn
    tumor = patch.instances > 0
    new_mask[tumor] = lookup[patch.instances[tumor]]
    return new_mask


def dominant_subtype(mask: np.ndarray) -> Optional[int]:
    """Most frequent tumor code in a mask; ties go to the lower code."""
    codes, counts = np.unique(mask[mask > 0], return_counts=True)
    if codes.size == 0:
        return None
    return int(codes[np.argmax(counts)])  # argmax takes the first (lowest) on ties


@dataclass
class PatchSampler:
    """Seed-deterministic weighted patch stream.

    probabilities[i] is the chance patch i is drawn on any single draw.
    Background-only patches share a fixed proportion of the draws.
    """

    patches: list
    probabilities: np.ndarray
    seed: int

    def __post_init__(self):
        if not np.isclose(self.probabilities.sum(), 1.0):
            raise ValidationError("probabilities must sum to 1")
        self._rng = np.random.default_rng(self.seed)

    def draw(self, n: int) -> list[int]:
        return self._rng.choice(len(self.patches), size=n, p=self.probabilities).tolist()


def build_training_sampler(
    patches: Sequence[LabeledPatch],
    strategy: SamplingStrategy,
    background_proportion: float = 0.2,
) -> PatchSampler:
    """Weight patches per the chosen baseline strategy.

    tumor_sampled: every tumor-containing patch equally likely.
    subtype_sampled: patch weight = inverse corpus pixel frequency of the
    patch's dominant subtype, equalizing expected drawn tumor pixels across
    the classes present in the corpus. Classes with zero corpus pixels are
    excluded from balancing with a warning.
    """
    if not patches:
        raise ValidationError("no patches to sample from")
    if not 0.0 <= background_proportion < 1.0:
        raise ValidationError("background_proportion must be in [0,1)")

    dominants = [dominant_subtype(p.mask) for p in patches]
    tumor_idx = [i for i, d in enumerate(dominants) if d is not None]
    bg_idx = [i for i, d in enumerate(dominants) if d is None]
    if not tumor_idx:
        raise ValidationError("corpus has no tumor-containing patches")

    if strategy.kind == "tumor_sampled":
        tumor_w = np.ones(len(tumor_idx))
    else:
        pixel_counts = np.zeros(6)
        for p in patches:
            codes, counts = np.unique(p.mask[p.mask > 0], return_counts=True)
            pixel_counts[codes] += counts
        absent = [c for c in range(1, 6) if pixel_counts[c] == 0]
        if absent:
            logger.warning("subtypes with no pixels in corpus, excluded from balancing: %s", absent)
        class_w = np.zeros(6)
        present = pixel_counts > 0
        class_w[present] = 1.0 / pixel_counts[present]
        tumor_w = np.array([class_w[dominants[i]] for i in tumor_idx])
        if tumor_w.sum() == 0:
            raise ValidationError("no sampleable subtype pixels in corpus")

    probs = np.zeros(len(patches))
    bg_share = background_proportion if bg_idx else 0.0
    probs[tumor_idx] = (1.0 - bg_share) * tumor_w / tumor_w.sum()
    if bg_idx:
        probs[bg_idx] = bg_share / len(bg_idx)
    return PatchSampler(patches=list(patches), probabilities=probs, seed=strategy.seed)


def mix_real_synthetic(
    real: Sequence, synthetic: Sequence[GeneratedSample], spec: MixSpec
) -> list[DatasetItem]:
    """All real items plus floor(ratio*|real|) pool draws, seed-shuffled.

    Synthetic items are drawn without replacement, so the pool must hold at
    least ratio*|real| samples.
    """
    n_syn = int(spec.ratio * len(real))
    if n_syn > len(synthetic):
        raise ValidationError(
            f"synthetic pool too small: need {n_syn}, have {len(synthetic)} "
            f"(short by {n_syn - len(synthetic)})"
        )
    items = []
    for i, patch in enumerate(real):
        items.append(
            DatasetItem(
                image=patch.image,
                mask=patch.mask,
                source="real",
                provenance={"slide_id": patch.slide_id, "index": i},
            )
        )
    rng = np.random.default_rng(spec.seed)
    if n_syn:
        chosen = rng.choice(len(synthetic), size=n_syn, replace=False)
        for j in sorted(chosen.tolist()):
            s = synthetic[j]
            items.append(
                DatasetItem(
                    image=s.image,
                    mask=s.mask,
                    source=s.method,
                    provenance={"seed": s.seed, "source_patch": s.source_patch, "pool_index": j},
                )
            )
    order = rng.permutation(len(items))
    return [items[k] for k in order]
