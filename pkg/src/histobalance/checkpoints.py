"""Single-file checkpoint containers shared by every trainer.

A checkpoint is one torch.save file holding a flat dict of primitives,
tensors, and state dicts, so it always loads under weights_only=True. The
`kind` field prevents feeding one trainer's file to another.
"""

from __future__ import annotations

from pathlib import Path

import torch

from histobalance.errors import ValidationError

FORMAT_VERSION = 1


def make_checkpoint(kind: str, config: dict, step: int, modules: dict, rng: dict | None = None,
                    extras: dict | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": dict(config),
        "step": int(step),
        "modules": modules,
        "rng": rng or {},
        "extras": extras or {},
    }


def save_checkpoint(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for key in ("format_version", "kind", "config", "step", "modules"):
        if key not in payload:
            raise ValidationError(f"checkpoint payload missing {key!r}")
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"no checkpoint at {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint format {version!r}")
    if expect_kind is not None and payload.get("kind") != expect_kind:
        raise ValidationError(
            f"checkpoint kind {payload.get('kind')!r} where {expect_kind!r} expected"
        )
    return payload
