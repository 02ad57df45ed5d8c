"""Stable seed derivation: equal inputs give equal seeds on every platform,
and adding new conditions never shifts the seeds of existing ones."""

from __future__ import annotations

import hashlib


def stable_seed(*parts) -> int:
    """Deterministic 63-bit integer from the string forms of `parts`."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFFFFFFFFFFFFFF
