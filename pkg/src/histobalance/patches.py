"""Labeled image patches: the unit flowing through every pipeline stage."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from histobalance.errors import ValidationError

DEFAULT_PATCH_SIZE = 512
DESK_PATCH_SIZE = 64


@dataclass
class LabeledPatch:
    """RGB patch with per-pixel subtype codes and instance ids.

    image      uint8 (H, W, 3)
    mask       uint8 (H, W), subtype codes 0..5
    instances  int32 (H, W), 0 = background
    """

    image: np.ndarray
    mask: np.ndarray
    instances: np.ndarray
    slide_id: str = ""
    origin: tuple[int, int] = (0, 0)

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    def validate(self) -> "LabeledPatch":
        """Check the structural invariants; raises ValidationError on any breach."""
        h, w = self.mask.shape
        if self.image.shape != (h, w, 3):
            raise ValidationError(
                f"image shape {self.image.shape} does not match mask {self.mask.shape}"
            )
        if self.instances.shape != (h, w):
            raise ValidationError(
                f"instances shape {self.instances.shape} does not match mask"
            )
        if h != w:
            raise ValidationError(f"patches must be square, got {h}x{w}")
        tumor = self.mask > 0
        if not np.array_equal(tumor, self.instances > 0):
            raise ValidationError("tumor pixel support differs between mask and instances")
        for inst in np.unique(self.instances[tumor]):
            codes = np.unique(self.mask[self.instances == inst])
            if len(codes) != 1:
                raise ValidationError(f"instance {inst} carries multiple subtype codes {codes}")
        return self

    def instance_subtypes(self) -> dict[int, int]:
        """Map instance id -> its (single) subtype code."""
        out = {}
        tumor = self.instances > 0
        for inst in np.unique(self.instances[tumor]):
            out[int(inst)] = int(self.mask[self.instances == inst][0])
        return out


def extract_patches(
    slide_image: np.ndarray,
    mask: np.ndarray,
    instances: np.ndarray,
    patch: int,
    stride: int,
    slide_id: str = "",
) -> list[LabeledPatch]:
    """Grid-aligned crops at offsets 0, stride, 2*stride, ... fully inside the slide.

    Instance ids survive cropping unchanged, so fragments of one instance in
    different patches still share their id.
    """
    h, w = mask.shape
    if patch > h or patch > w:
        raise ValidationError(f"patch {patch} exceeds slide dimensions {w}x{h}")
    if stride < 1:
        raise ValidationError(f"stride must be >=1, got {stride}")

    out = []
    for y in range(0, h - patch + 1, stride):
        for x in range(0, w - patch + 1, stride):
            out.append(
                LabeledPatch(
                    image=slide_image[y : y + patch, x : x + patch].copy(),
                    mask=mask[y : y + patch, x : x + patch].copy(),
                    instances=instances[y : y + patch, x : x + patch].copy(),
                    slide_id=slide_id,
                    origin=(x, y),
                )
            )
    return out


def save_image_png(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(image.astype(np.uint8), mode="RGB").save(path)


def load_image_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


def save_mask_png(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def load_mask_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint8)


def save_instances_png(path: str | Path, instances: np.ndarray) -> None:
    if instances.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValidationError("instance ids exceed 16-bit range")
    Image.fromarray(instances.astype(np.uint16)).save(path)


def load_instances_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int32)
