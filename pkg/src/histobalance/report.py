"""Render an experiment's RunRecords into a comparison report.

Outputs land next to each other in one directory: a delimited summary
(CSV + JSON), a plain-text table, and matplotlib figures (Dice and
subtype-variance boxplots, per-subtype recall bars, confusion rows for
the reference and the strongest condition).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np

from histobalance.errors import ValidationError
from histobalance.evaluation import RunAggregate, aggregate_runs
from histobalance.subtypes import by_code

TEXT_COLUMNS = (
    "condition", "runs", "dice_mean", "dice_std", "delta_dice",
    "variance_mean", "variance_change_pct",
)


def group_records(records: Sequence) -> dict[str, RunAggregate]:
    """RunRecords → {label: RunAggregate}, preserving first-seen order."""
    if not records:
        raise ValidationError("cannot report on zero run records")
    by_label: dict[str, list] = {}
    for rec in records:
        by_label.setdefault(rec.label, []).append(rec)
    return {
        label: aggregate_runs([r.report for r in recs], [r.seed for r in recs])
        for label, recs in by_label.items()
    }


def _pick_reference(groups: dict[str, RunAggregate], reference: str | None) -> str:
    if reference is not None:
        if reference not in groups:
            raise ValidationError(
                f"reference {reference!r} has no runs; have {sorted(groups)}"
            )
        return reference
    return next(iter(groups))


def summarize(groups: dict[str, RunAggregate], reference: str) -> list[dict]:
    """One summary row per condition, with deltas against the reference."""
    ref = groups[reference]
    ref_dice = ref.dice["mean"]
    ref_var = ref.variance["mean"] if ref.variance else None
    rows = []
    for label, agg in groups.items():
        var = agg.variance
        if var is None or ref_var in (None, 0.0):
            change = None
        else:
            change = 100.0 * (var["mean"] - ref_var) / ref_var
        rows.append(
            {
                "condition": label,
                "runs": len(agg.reports),
                "dice_mean": agg.dice["mean"],
                "dice_std": agg.dice["std"],
                "delta_dice": agg.dice["mean"] - ref_dice,
                "variance_mean": var["mean"] if var else None,
                "variance_change_pct": change,
                "recall_means": agg.recall_means(),
            }
        )
    return rows


def _fmt(value, width: int) -> str:
    if value is None:
        return "-".rjust(width)
    if isinstance(value, float):
        return f"{value:+.4f}".rjust(width) if width else f"{value:.4f}"
    return str(value).rjust(width)


def _text_table(rows: list[dict], reference: str) -> str:
    widths = {c: max(len(c), 12) for c in TEXT_COLUMNS}
    widths["condition"] = max(len(r["condition"]) for r in rows) + 2
    lines = ["  ".join(c.rjust(widths[c]) for c in TEXT_COLUMNS)]
    for r in rows:
        cells = []
        for c in TEXT_COLUMNS:
            v = r[c]
            if c == "condition":
                cells.append(str(v).rjust(widths[c]))
            elif isinstance(v, float):
                cells.append(_fmt(v, widths[c]))
            else:
                cells.append(_fmt(v, widths[c]))
        lines.append("  ".join(cells))
    lines.append("")
    lines.append(f"reference condition: {reference}")
    return "\n".join(lines) + "\n"


def _boxplot(ax, groups: dict[str, RunAggregate], values_of, title: str, ylabel: str):
    labels, data = [], []
    for label, agg in groups.items():
        vals = values_of(agg)
        if vals is None:
            continue
        labels.append(label)
        data.append(vals)
    if not data:
        return False
    ax.boxplot(data, tick_labels=labels, whis=(0, 100))
    ax.set_title(title)
    ax.set_ylabel(ylabel)
    ax.tick_params(axis="x", rotation=45)
    return True


def _save_fig(fig, path: Path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def emit_report(records: Sequence, output_dir: str | Path, *, reference: str | None = None) -> dict:
    """Write report.{txt,csv,json} plus figures; returns the file paths.

    `reference` defaults to "subtype_sampled" when present, otherwise the
    first condition seen.
    """
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups = group_records(records)
    if reference is None and "subtype_sampled" in groups:
        reference = "subtype_sampled"
    reference = _pick_reference(groups, reference)
    groups = {reference: groups[reference],
              **{k: v for k, v in groups.items() if k != reference}}
    rows = summarize(groups, reference)

    csv_path = out / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TEXT_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({c: r[c] for c in TEXT_COLUMNS})

    # Confusion rows for the reference and the strongest other condition
    # (largest variance drop, falling back to largest Dice gain).
    others = [r for r in rows if r["condition"] != reference]
    best = None
    if others:
        with_change = [r for r in others if r["variance_change_pct"] is not None]
        if with_change:
            best = min(with_change, key=lambda r: r["variance_change_pct"])
        else:
            best = max(others, key=lambda r: r["delta_dice"])
    selected = [reference] + ([best["condition"]] if best else [])
    confusion = {
        label: {
            str(code): list(row)
            for code, row in groups[label].confusion_row_means().items()
        }
        for label in selected
    }

    json_path = out / "report.json"
    json_path.write_text(
        json.dumps(
            {
                "reference": reference,
                "rows": [
                    {**{c: r[c] for c in TEXT_COLUMNS},
                     "recall_means": {str(k): v for k, v in r["recall_means"].items()}}
                    for r in rows
                ],
                "confusion_rows": confusion,
                "conditions": {label: agg.to_json() for label, agg in groups.items()},
            },
            indent=2,
            sort_keys=True,
        )
    )

    text_path = out / "report.txt"
    text = _text_table(rows, reference)
    text += "\nconfusion rows (fraction of subtype pixels predicted tumor / background):\n"
    for label in selected:
        text += f"  {label}:\n"
        for code, (tumor, background) in sorted(confusion[label].items()):
            name = by_code(int(code)).name
            text += f"    {name:>14}: {float(tumor):.4f} / {float(background):.4f}\n"
    text_path.write_text(text)

    figures = []
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(groups)), 4))
    _boxplot(ax, groups, lambda a: [r.dice for r in a.reports],
             "Dice by condition", "Dice")
    path = out / "dice_boxplot.png"
    _save_fig(fig, path)
    plt.close(fig)
    figures.append(str(path))

    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(groups)), 4))
    drew = _boxplot(
        ax, groups,
        lambda a: None if a.variance is None else [r.subtype_variance for r in a.reports],
        "Per-subtype recall variance by condition", "variance",
    )
    if drew:
        path = out / "variance_boxplot.png"
        _save_fig(fig, path)
        figures.append(str(path))
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(max(6, 1.4 * len(groups)), 4))
    codes = sorted({c for a in groups.values() for c in a.recall_means()})
    width = 0.8 / max(len(codes), 1)
    xs = np.arange(len(groups))
    for j, code in enumerate(codes):
        means = [groups[label].recall_means().get(code, np.nan) for label in groups]
        ax.bar(xs + j * width, means, width, label=by_code(code).name)
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(list(groups), rotation=45, ha="right")
    ax.set_ylabel("recall")
    ax.set_title("Per-subtype recall by condition")
    ax.legend(fontsize=8)
    path = out / "subtype_recall.png"
    _save_fig(fig, path)
    plt.close(fig)
    figures.append(str(path))

    return {
        "csv": str(csv_path),
        "json": str(json_path),
        "text": str(text_path),
        "figures": figures,
    }
