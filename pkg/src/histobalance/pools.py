"""Synthetic image pools: generate once per (method, seed), store as a
directory with a provenance manifest, reload for mixing at any ratio.

Every pool item is generated from a real tumor patch whose instance labels
were randomly reassigned, so the pool is subtype-balanced by construction.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from histobalance.errors import ValidationError
from histobalance.gan import gan_generate
from histobalance.diffusion import ldm_inpaint, ldm_sample_batch
from histobalance.patches import load_image_png, load_mask_png, save_image_png, save_mask_png
from histobalance.sampling import MIX_METHODS, GeneratedSample, randomize_instance_subtypes
from histobalance.seeding import stable_seed
from histobalance.subtypes import TUMOR_SUBTYPES

logger = logging.getLogger(__name__)

MANIFEST_NAME = "pool.json"
SAMPLE_BATCH = 16


def _mask_hash(mask: np.ndarray) -> str:
    return hashlib.sha256(mask.astype(np.uint8).tobytes()).hexdigest()


def generate_pool(
    method: str,
    patches,
    count: int,
    seed: int,
    out_dir: str | Path,
    *,
    gan: dict | None = None,
    ldm: dict | None = None,
    ae: dict | None = None,
    classes=TUMOR_SUBTYPES,
) -> dict:
    """Write `count` synthetic samples for one method under `out_dir`,
    returning the provenance manifest.

    Source patches rotate round-robin over the tumor-containing inputs; each
    item gets its own reassigned mask and generation seed derived stably from
    (seed, index), so the pool never depends on generation order.
    """
    if method not in MIX_METHODS:
        raise ValidationError(f"method must be one of {MIX_METHODS}, got {method!r}")
    if count < 1:
        raise ValidationError("count must be >= 1")
    sources = [p for p in patches if p.instances.max() > 0]
    if not sources:
        raise ValidationError("no tumor-containing patches to condition on")
    if method == "gan" and gan is None:
        raise ValidationError("gan pool needs a gan checkpoint")
    if method in ("diffusion", "inpaint") and (ldm is None or ae is None):
        raise ValidationError(f"{method} pool needs ldm and autoencoder checkpoints")

    out_dir = Path(out_dir)
    (out_dir / "items").mkdir(parents=True, exist_ok=True)

    chosen = [sources[i % len(sources)] for i in range(count)]
    masks = [
        randomize_instance_subtypes(src, classes, seed=stable_seed(seed, "mask", i))
        for i, src in enumerate(chosen)
    ]
    gen_seeds = [stable_seed(seed, "image", i) for i in range(count)]

    images: list[np.ndarray] = []
    if method == "diffusion":
        for start in range(0, count, SAMPLE_BATCH):
            stop = min(start + SAMPLE_BATCH, count)
            images += ldm_sample_batch(ldm, ae, masks[start:stop], gen_seeds[start:stop])
    elif method == "inpaint":
        for src, mask, s in zip(chosen, masks, gen_seeds):
            images.append(ldm_inpaint(ldm, ae, src.image, mask, src.instances > 0, seed=s))
    else:
        images = [gan_generate(gan, mask, s) for mask, s in zip(masks, gen_seeds)]

    items = []
    for i, (src, mask, image, s) in enumerate(zip(chosen, masks, images, gen_seeds)):
        image_name = f"items/{i:05d}_image.png"
        mask_name = f"items/{i:05d}_mask.png"
        save_image_png(out_dir / image_name, image)
        save_mask_png(out_dir / mask_name, mask)
        items.append(
            {
                "index": i,
                "image": image_name,
                "mask": mask_name,
                "method": method,
                "source_patch": f"{src.slide_id}:{src.origin[0]},{src.origin[1]}",
                "seed": s,
                "mask_hash": _mask_hash(mask),
            }
        )

    manifest = {"method": method, "seed": seed, "count": count, "items": items}
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info("wrote %s pool of %d items to %s", method, count, out_dir)
    return manifest


def load_pool(root: str | Path) -> list[GeneratedSample]:
    """Read a pool directory back; verifies each mask against its hash."""
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise ValidationError(f"no pool manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for item in manifest["items"]:
        mask = load_mask_png(root / item["mask"])
        if _mask_hash(mask) != item["mask_hash"]:
            raise ValidationError(f"mask hash mismatch for pool item {item['index']}")
        samples.append(
            GeneratedSample(
                image=load_image_png(root / item["image"]),
                mask=mask,
                method=item["method"],
                seed=item["seed"],
                source_patch=item["source_patch"],
            ).validate()
        )
    if len(samples) != manifest["count"]:
        raise ValidationError(
            f"pool manifest promises {manifest['count']} items, found {len(samples)}"
        )
    return samples
