"""The closed label set: background plus five tumor tissue subtypes.

Codes are stable across the whole pipeline; masks are uint8 arrays of these
codes and one-hot encodings always use ``NUM_CLASSES`` channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SubtypeClass:
    code: int
    name: str

    def __post_init__(self):
        if not 0 <= self.code <= 5:
            raise ValueError(f"subtype code must be in 0..5, got {self.code}")


BACKGROUND = SubtypeClass(0, "background")
HER2_0 = SubtypeClass(1, "her2_0")
HER2_1 = SubtypeClass(2, "her2_1")
HER2_2 = SubtypeClass(3, "her2_2")
HER2_3 = SubtypeClass(4, "her2_3")
CIS = SubtypeClass(5, "cis")

ALL_CLASSES = (BACKGROUND, HER2_0, HER2_1, HER2_2, HER2_3, CIS)
TUMOR_SUBTYPES = (HER2_0, HER2_1, HER2_2, HER2_3, CIS)
HER2_SUBTYPES = (HER2_0, HER2_1, HER2_2, HER2_3)

NUM_CLASSES = len(ALL_CLASSES)

_BY_CODE = {c.code: c for c in ALL_CLASSES}
_BY_NAME = {c.name: c for c in ALL_CLASSES}


def by_code(code: int) -> SubtypeClass:
    try:
        return _BY_CODE[int(code)]
    except KeyError:
        raise ValueError(f"unknown subtype code {code}") from None


def by_name(name: str) -> SubtypeClass:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise ValueError(f"unknown subtype name {name!r}") from None


def one_hot(mask: np.ndarray) -> np.ndarray:
    """Encode a code mask (H, W) as float32 one-hot planes (NUM_CLASSES, H, W)."""
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {mask.shape}")
    if mask.min() < 0 or mask.max() >= NUM_CLASSES:
        raise ValueError("mask contains codes outside 0..5")
    planes = np.zeros((NUM_CLASSES,) + mask.shape, dtype=np.float32)
    for c in range(NUM_CLASSES):
        planes[c] = mask == c
    return planes
