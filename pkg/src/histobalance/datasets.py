"""Dataset manifests, slide-level splitting, and dataset-root IO.

A dataset root is a directory with a single ``manifest.json`` plus PNG files
for patch images, subtype masks, and instance maps. All manifest paths are
relative to the root so the directory can be moved freely. The root can be
overridden globally through the ``HISTOBALANCE_DATA_ROOT`` environment
variable (used by the CLI).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from histobalance.errors import ValidationError
from histobalance.patches import (
    LabeledPatch,
    load_image_png,
    load_instances_png,
    load_mask_png,
    save_image_png,
    save_instances_png,
    save_mask_png,
)

SPLITS = ("train", "val", "test")

DATA_ROOT_ENV = "HISTOBALANCE_DATA_ROOT"


@dataclass
class SlideRecord:
    slide_id: str
    aggregate_score_bin: int = 0
    patches: list[dict] = field(default_factory=list)


@dataclass
class DatasetManifest:
    slides: list[SlideRecord] = field(default_factory=list)
    split: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> "DatasetManifest":
        ids = [s.slide_id for s in self.slides]
        if len(ids) != len(set(ids)):
            raise ValidationError("duplicate slide ids in manifest")
        for slide_id, part in self.split.items():
            if part not in SPLITS:
                raise ValidationError(f"slide {slide_id}: unknown split {part!r}")
        missing = set(ids) - set(self.split)
        if missing:
            raise ValidationError(f"slides missing a split assignment: {sorted(missing)}")
        return self

    def slide_ids(self, part: str | None = None) -> list[str]:
        if part is None:
            return [s.slide_id for s in self.slides]
        return [s.slide_id for s in self.slides if self.split.get(s.slide_id) == part]

    def to_json(self) -> dict:
        return {
            "slides": [
                {
                    "slide_id": s.slide_id,
                    "aggregate_score_bin": s.aggregate_score_bin,
                    "patches": s.patches,
                }
                for s in self.slides
            ],
            "split": dict(self.split),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "DatasetManifest":
        slides = [
            SlideRecord(
                slide_id=str(s["slide_id"]),
                aggregate_score_bin=int(s.get("aggregate_score_bin", 0)),
                patches=list(s.get("patches", [])),
            )
            for s in payload["slides"]
        ]
        return cls(slides=slides, split=dict(payload.get("split", {})))


def make_split(
    slide_ids: list[str],
    counts: tuple[int, int, int],
    stratify_by: dict[str, int] | None = None,
    seed: int = 0,
) -> dict[str, str]:
    """Assign each slide to train/val/test, deterministically from the seed.

    With ``stratify_by`` (slide id -> score bin) every bin is spread across
    the three sets as evenly as integer arithmetic allows while the global
    per-set counts are met exactly.
    """
    if sum(counts) != len(slide_ids):
        raise ValidationError(
            f"split counts {counts} sum to {sum(counts)} but there are {len(slide_ids)} slides"
        )
    rng = np.random.default_rng(seed)
    total = len(slide_ids)

    if stratify_by is None:
        bins = {0: sorted(slide_ids)}
    else:
        bins = {}
        for sid in sorted(slide_ids):
            bins.setdefault(stratify_by[sid], []).append(sid)

    # Per-bin quotas: floor of the proportional share, then hand out the
    # leftover seats by largest fractional remainder under per-set capacity.
    quota = {}
    capacity = list(counts)
    remainders = []
    for b in sorted(bins):
        n_b = len(bins[b])
        for s, c_s in enumerate(counts):
            share = n_b * c_s / total if total else 0.0
            base = int(np.floor(share))
            quota[(b, s)] = base
            capacity[s] -= base
            remainders.append((share - base, b, s))
    leftovers = {b: len(bins[b]) - sum(quota[(b, s)] for s in range(3)) for b in bins}
    for _, b, s in sorted(remainders, key=lambda t: (-t[0], t[1], t[2])):
        if leftovers[b] > 0 and capacity[s] > 0:
            quota[(b, s)] += 1
            leftovers[b] -= 1
            capacity[s] -= 1
    for b in sorted(bins):  # rare fallback when greedy order exhausts a set
        while leftovers[b] > 0:
            s = next(i for i in range(3) if capacity[i] > 0)
            quota[(b, s)] += 1
            leftovers[b] -= 1
            capacity[s] -= 1

    split = {}
    for b in sorted(bins):
        members = list(bins[b])
        rng.shuffle(members)
        cursor = 0
        for s, part in enumerate(SPLITS):
            take = quota[(b, s)]
            for sid in members[cursor : cursor + take]:
                split[sid] = part
            cursor += take
    return split


def resolve_data_root(root: str | Path | None) -> Path:
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    if root is None:
        raise ValidationError(f"no dataset root given and {DATA_ROOT_ENV} is unset")
    return Path(root)


def write_dataset(root: str | Path, patches_by_slide: dict[str, list[LabeledPatch]],
                  split: dict[str, str], score_bins: dict[str, int] | None = None) -> DatasetManifest:
    """Write patches and a manifest under a dataset root directory."""
    root = Path(root)
    for sub in ("images", "masks", "instances"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    slides = []
    for slide_id in sorted(patches_by_slide):
        entries = []
        for i, patch in enumerate(patches_by_slide[slide_id]):
            stem = f"{slide_id}_{i:04d}"
            rel = {
                "image": f"images/{stem}.png",
                "mask": f"masks/{stem}.png",
                "instances": f"instances/{stem}.png",
            }
            save_image_png(root / rel["image"], patch.image)
            save_mask_png(root / rel["mask"], patch.mask)
            save_instances_png(root / rel["instances"], patch.instances)
            entries.append({"patch_id": stem, "origin": list(patch.origin), **rel})
        slides.append(
            SlideRecord(
                slide_id=slide_id,
                aggregate_score_bin=(score_bins or {}).get(slide_id, 0),
                patches=entries,
            )
        )
    manifest = DatasetManifest(slides=slides, split=dict(split)).validate()
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2))
    return manifest


def read_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise ValidationError(f"no manifest.json under {root}")
    return DatasetManifest.from_json(json.loads(path.read_text())).validate()


def load_patches(root: str | Path, part: str | None = None,
                 manifest: DatasetManifest | None = None) -> list[LabeledPatch]:
    """Load the patches of one split (or all of them) from a dataset root."""
    if part is not None and part not in SPLITS:
        raise ValidationError(f"unknown split {part!r}, expected one of {SPLITS}")
    root = Path(root)
    manifest = manifest or read_manifest(root)
    out = []
    for slide in manifest.slides:
        if part is not None and manifest.split.get(slide.slide_id) != part:
            continue
        for entry in slide.patches:
            out.append(
                LabeledPatch(
                    image=load_image_png(root / entry["image"]),
                    mask=load_mask_png(root / entry["mask"]),
                    instances=load_instances_png(root / entry["instances"]),
                    slide_id=slide.slide_id,
                    origin=tuple(entry.get("origin", (0, 0))),
                )
            )
    return out
