"""Segmentation metrics: tumor Dice, per-subtype recall, subtype variance.

The segmenter is binary (tumor vs background) but the ground-truth masks
carry subtype codes, so recall can be broken out per subtype. The variance
of the four HER2 recalls measures how evenly the segmenter treats the
subtypes; lower is better. Metrics pool pixels across patches by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from histobalance.errors import ValidationError
from histobalance.subtypes import HER2_SUBTYPES, TUMOR_SUBTYPES

HER2_CODES = tuple(c.code for c in HER2_SUBTYPES)
TUMOR_CODES = tuple(c.code for c in TUMOR_SUBTYPES)


def _check_binary(arr: np.ndarray, name: str):
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise ValidationError(f"{name} must be binary, found values {vals[:8]}")


def dice_score(pred: np.ndarray, target: np.ndarray) -> float:
    """2|P∩T| / (|P|+|T|); two empty masks count as a perfect 1.0."""
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {target.shape}")
    _check_binary(pred, "pred")
    _check_binary(target, "target")
    p = pred.astype(bool)
    t = target.astype(bool)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def per_subtype_recall(pred: np.ndarray, mask: np.ndarray) -> dict[int, float]:
    """Fraction of each subtype's pixels predicted tumor.

    Subtypes with zero pixels in the mask are absent from the result rather
    than reported as 0.
    """
    if pred.shape != mask.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {mask.shape}")
    _check_binary(pred, "pred")
    out = {}
    for code in TUMOR_CODES:
        region = mask == code
        support = int(region.sum())
        if support:
            out[code] = int(pred[region].sum()) / support
    return out


def subtype_variance(
    recalls: Mapping[int, float],
    codes: Sequence[int] = HER2_CODES,
    sample: bool = False,
) -> float:
    """Variance of the per-subtype recalls (population by default).

    Defaults to the four HER2 codes with cis excluded; every requested code
    must be present in `recalls`.
    """
    missing = [c for c in codes if c not in recalls]
    if missing:
        raise ValidationError(f"recalls missing for subtype codes {missing}")
    values = np.array([recalls[c] for c in codes], dtype=np.float64)
    return float(np.var(values, ddof=1 if sample else 0))


def confusion_rows(pred: np.ndarray, mask: np.ndarray) -> dict[int, tuple[float, float]]:
    """Per-subtype (fraction predicted tumor, fraction predicted background)."""
    return {code: (r, 1.0 - r) for code, r in per_subtype_recall(pred, mask).items()}


def subtype_support(mask: np.ndarray) -> dict[int, int]:
    return {
        code: int((mask == code).sum())
        for code in TUMOR_CODES
        if (mask == code).sum() > 0
    }


@dataclass
class EvalReport:
    """Metrics of one segmenter evaluation over a set of patches."""

    dice: float
    recalls: dict[int, float]
    subtype_variance: float | None
    confusion_rows: dict[int, tuple[float, float]]
    support: dict[int, int]
    extras: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "dice": self.dice,
            "recalls": {str(k): v for k, v in self.recalls.items()},
            "subtype_variance": self.subtype_variance,
            "confusion_rows": {str(k): list(v) for k, v in self.confusion_rows.items()},
            "support": {str(k): v for k, v in self.support.items()},
            "extras": self.extras,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "EvalReport":
        return cls(
            dice=payload["dice"],
            recalls={int(k): v for k, v in payload["recalls"].items()},
            subtype_variance=payload["subtype_variance"],
            confusion_rows={int(k): tuple(v) for k, v in payload["confusion_rows"].items()},
            support={int(k): v for k, v in payload["support"].items()},
            extras=payload.get("extras", {}),
        )


def evaluate_predictions(
    preds: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    pooled: bool = True,
    variance_codes: Sequence[int] = HER2_CODES,
) -> EvalReport:
    """Score binary predictions against subtype masks.

    pooled=True concatenates all pixels before computing metrics (micro);
    pooled=False averages per-patch Dice instead. Subtype variance is None
    when any of `variance_codes` has no pixels anywhere.
    """
    if len(preds) != len(masks) or not preds:
        raise ValidationError("need equally many predictions and masks, at least one")
    flat_pred = np.concatenate([np.asarray(p).ravel() for p in preds])
    flat_mask = np.concatenate([np.asarray(m).ravel() for m in masks])
    if pooled:
        dice = dice_score(flat_pred, (flat_mask > 0).astype(np.uint8))
    else:
        dice = float(
            np.mean([dice_score(np.asarray(p), (np.asarray(m) > 0).astype(np.uint8))
                     for p, m in zip(preds, masks)])
        )
    recalls = per_subtype_recall(flat_pred, flat_mask)
    try:
        variance = subtype_variance(recalls, codes=variance_codes)
    except ValidationError:
        variance = None
    return EvalReport(
        dice=dice,
        recalls=recalls,
        subtype_variance=variance,
        confusion_rows=confusion_rows(flat_pred, flat_mask),
        support=subtype_support(flat_mask),
    )


def _stat(values: Sequence[float]) -> dict[str, float]:
    arr = np.array(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        "min": float(arr.min()),
        "max": float(arr.max()),
    }


@dataclass
class RunAggregate:
    """Several repeated runs of one condition, with summary statistics."""

    reports: list[EvalReport]
    seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.reports:
            raise ValidationError("aggregate needs at least one report")

    @property
    def dice(self) -> dict[str, float]:
        return _stat([r.dice for r in self.reports])

    @property
    def variance(self) -> dict[str, float] | None:
        values = [r.subtype_variance for r in self.reports]
        if any(v is None for v in values):
            return None
        return _stat(values)

    def recall_means(self) -> dict[int, float]:
        codes = sorted({c for r in self.reports for c in r.recalls})
        return {
            c: float(np.mean([r.recalls[c] for r in self.reports if c in r.recalls]))
            for c in codes
        }

    def confusion_row_means(self) -> dict[int, tuple[float, float]]:
        return {c: (m, 1.0 - m) for c, m in self.recall_means().items()}

    def to_json(self) -> dict:
        return {
            "reports": [r.to_json() for r in self.reports],
            "seeds": list(self.seeds),
            "dice": self.dice,
            "subtype_variance": self.variance,
            "recall_means": {str(k): v for k, v in self.recall_means().items()},
        }


def aggregate_runs(reports: Sequence[EvalReport], seeds: Sequence[int] = ()) -> RunAggregate:
    return RunAggregate(reports=list(reports), seeds=list(seeds))
