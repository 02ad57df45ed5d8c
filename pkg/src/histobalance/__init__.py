"""Subtype-balanced synthetic histopathology images for tumor segmentation.

The package covers the full pipeline: rasterizing polygon annotations into
label masks, reshuffling per-instance subtype labels to balance the class
distribution, synthesizing images from the modified masks (conditional GAN,
latent diffusion, diffusion inpainting), training a binary tumor segmenter
on real/synthetic mixtures, and scoring the result (tumor Dice, per-subtype
recalls, subtype variance).
"""

__version__ = "0.1.0"

from histobalance.subtypes import SubtypeClass, BACKGROUND, TUMOR_SUBTYPES, HER2_SUBTYPES
from histobalance.patches import LabeledPatch

__all__ = [
    "SubtypeClass",
    "BACKGROUND",
    "TUMOR_SUBTYPES",
    "HER2_SUBTYPES",
    "LabeledPatch",
    "__version__",
]
