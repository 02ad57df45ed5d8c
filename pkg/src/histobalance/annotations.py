"""Polygon annotations and their rasterization into label/instance arrays."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from histobalance.errors import ValidationError
from histobalance.subtypes import SubtypeClass, by_name


@dataclass
class Region:
    """One annotated tumor tissue instance: a polygon with a single subtype."""

    instance_id: int
    subtype: SubtypeClass
    polygon: list[tuple[float, float]]

    def __post_init__(self):
        if self.instance_id <= 0:
            raise ValidationError(f"instance_id must be positive, got {self.instance_id}")
        if self.subtype.code == 0:
            raise ValidationError(
                f"region {self.instance_id}: background is not a valid region subtype"
            )


@dataclass
class AnnotationDocument:
    slide_id: str
    regions: list[Region] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.instance_id for r in self.regions]
        if len(ids) != len(set(ids)):
            raise ValidationError(f"slide {self.slide_id}: duplicate instance ids")

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "regions": [
                {
                    "instance_id": r.instance_id,
                    "subtype": r.subtype.name,
                    "polygon": [[float(x), float(y)] for x, y in r.polygon],
                }
                for r in self.regions
            ],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "AnnotationDocument":
        regions = [
            Region(
                instance_id=int(r["instance_id"]),
                subtype=by_name(r["subtype"]),
                polygon=[(float(x), float(y)) for x, y in r["polygon"]],
            )
            for r in payload["regions"]
        ]
        return cls(slide_id=str(payload["slide_id"]), regions=regions)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "AnnotationDocument":
        return cls.from_json(json.loads(Path(path).read_text()))


def _polygon_interior(polygon, width: int, height: int) -> tuple[np.ndarray, slice, slice]:
    """Even-odd test of pixel centers against one polygon.

    Returns a boolean array covering the polygon's bounding box plus the row
    and column slices locating it in the full frame. A pixel (x, y) belongs to
    the polygon iff its center (x+0.5, y+0.5) is inside under the even-odd
    crossing rule.
    """
    pts = np.asarray(polygon, dtype=np.float64)
    x0 = max(int(np.floor(pts[:, 0].min())), 0)
    x1 = min(int(np.ceil(pts[:, 0].max())), width)
    y0 = max(int(np.floor(pts[:, 1].min())), 0)
    y1 = min(int(np.ceil(pts[:, 1].max())), height)
    if x1 <= x0 or y1 <= y0:
        return np.zeros((0, 0), dtype=bool), slice(0, 0), slice(0, 0)

    cx = np.arange(x0, x1, dtype=np.float64) + 0.5
    cy = np.arange(y0, y1, dtype=np.float64) + 0.5
    inside = np.zeros((y1 - y0, x1 - x0), dtype=bool)

    xa, ya = pts[:, 0], pts[:, 1]
    xb, yb = np.roll(xa, -1), np.roll(ya, -1)
    for ex0, ey0, ex1, ey1 in zip(xa, ya, xb, yb):
        if ey0 == ey1:
            continue  # horizontal edges never cross a y=const ray test
        crosses_row = (cy >= min(ey0, ey1)) & (cy < max(ey0, ey1))
        if not crosses_row.any():
            continue
        # x coordinate where the edge crosses each pixel-center row
        x_cross = ex0 + (cy[crosses_row] - ey0) * (ex1 - ex0) / (ey1 - ey0)
        inside[crosses_row] ^= cx[None, :] < x_cross[:, None]

    return inside, slice(y0, y1), slice(x0, x1)


def rasterize_annotations(
    doc: AnnotationDocument, width: int, height: int
) -> tuple[np.ndarray, np.ndarray]:
    """Paint the document's regions into (mask, instances) arrays.

    Regions are painted in document order, so a later region overwrites
    earlier ones wherever they overlap. Pixels covered by no region stay
    code 0 / instance 0.
    """
    if width <= 0 or height <= 0:
        raise ValidationError(f"frame must be positive, got {width}x{height}")

    mask = np.zeros((height, width), dtype=np.uint8)
    instances = np.zeros((height, width), dtype=np.int32)

    for region in doc.regions:
        if len(region.polygon) < 3:
            raise ValidationError(
                f"region {region.instance_id}: polygon needs >=3 vertices, "
                f"got {len(region.polygon)}"
            )
        for x, y in region.polygon:
            # closed upper bound so a polygon may trace the full frame edge
            if not (0 <= x <= width and 0 <= y <= height):
                raise ValidationError(
                    f"region {region.instance_id}: vertex ({x}, {y}) outside "
                    f"[0,{width}]x[0,{height}]"
                )
        interior, rows, cols = _polygon_interior(region.polygon, width, height)
        mask[rows, cols][interior] = region.subtype.code
        instances[rows, cols][interior] = region.instance_id

    return mask, instances
