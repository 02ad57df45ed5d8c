"""Shared torch helpers: tensor conversions, seeding, deterministic batching."""

from __future__ import annotations

import json

import numpy as np
import torch

from histobalance.subtypes import NUM_CLASSES


def group_norm(channels: int) -> torch.nn.GroupNorm:
    """GroupNorm with the largest group count <=8 that divides `channels`."""
    groups = next(g for g in (8, 4, 2, 1) if channels % g == 0)
    return torch.nn.GroupNorm(groups, channels)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 H×W×3 -> float32 (3,H,W) in [-1, 1]."""
    t = torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1)
    return t / 127.5 - 1.0


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """float (3,H,W) in [-1, 1] -> uint8 H×W×3, clamped."""
    arr = ((t.detach().clamp(-1, 1) + 1.0) * 127.5).round().byte()
    return arr.permute(1, 2, 0).cpu().numpy()


def mask_to_onehot(mask: np.ndarray | torch.Tensor, num_classes: int = NUM_CLASSES) -> torch.Tensor:
    """H×W codes -> float32 (num_classes,H,W) one-hot."""
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(mask.astype(np.int64))  # astype copies; PNG-loaded arrays may be read-only
    return torch.nn.functional.one_hot(mask.long(), num_classes).permute(2, 0, 1).float()


def batch_indices(n_items: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Yield `steps` index arrays, reshuffling each epoch; deterministic from rng."""
    if steps <= 0:
        return  # leave rng untouched so a zero-step resume is a no-op
    order = rng.permutation(n_items)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n_items:
            order = rng.permutation(n_items)
            pos = 0
        if batch_size >= n_items:
            yield rng.permutation(n_items)
        else:
            yield order[pos : pos + batch_size]
            pos += batch_size


def capture_rng(rng: np.random.Generator | None = None) -> dict:
    state = {"torch": torch.get_rng_state()}
    if rng is not None:
        state["numpy"] = json.dumps(rng.bit_generator.state)
    return state


def restore_rng(state: dict) -> np.random.Generator | None:
    torch.set_rng_state(state["torch"].cpu() if torch.is_tensor(state["torch"]) else state["torch"])
    if "numpy" in state:
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(state["numpy"])
        return rng
    return None


def item_generator(seed: int) -> torch.Generator:
    """Dedicated torch generator so per-item noise ignores batch composition."""
    g = torch.Generator()
    g.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return g
