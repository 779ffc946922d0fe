"""Confusion-matrix accumulation, grouped mIoU, and report emission.

Group conventions follow the benchmark tables: the "base" group includes the
background class alongside the first step's classes, the "new" group is
background-free, and "all" covers background plus every seen class. Classes
absent from both ground truth and prediction are excluded from the means
(and flagged), never scored as 0 or 1.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class ConfusionMatrix:
    """(n_cls+1) x (n_cls+1) pixel counts; rows ground truth, cols prediction."""

    n_classes: int  # foreground classes; index 0 is background
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            side = self.n_classes + 1
            self.counts = np.zeros((side, side), dtype=np.int64)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    """Add one prediction/ground-truth pair; returns cm for chaining."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    side = cm.n_classes + 1
    if pred.min() < 0 or pred.max() >= side or gt.min() < 0 or gt.max() >= side:
        raise ShapeError(f"class ids outside [0, {cm.n_classes}]")
    flat = side * gt.reshape(-1).astype(np.int64) + pred.reshape(-1)
    cm.counts += np.bincount(flat, minlength=side * side).reshape(side, side)
    return cm


def iou_per_class(cm: ConfusionMatrix) -> dict[int, float | None]:
    """IoU per class id; None when the class is absent from gt and pred."""
    diag = np.diag(cm.counts).astype(np.float64)
    rows = cm.counts.sum(axis=1).astype(np.float64)
    cols = cm.counts.sum(axis=0).astype(np.float64)
    union = rows + cols - diag
    out: dict[int, float | None] = {}
    for c in range(cm.n_classes + 1):
        out[c] = None if union[c] == 0 else float(diag[c] / union[c])
    return out


@dataclass
class MetricReport:
    step: int
    per_class_iou: dict[int, float | None]
    base_miou: float | None
    new_miou: float | None
    all_miou: float | None
    groups: dict[str, list[int]]
    absent_classes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "base_miou": self.base_miou,
            "new_miou": self.new_miou,
            "all_miou": self.all_miou,
            "groups": {k: sorted(v) for k, v in self.groups.items()},
            "absent_classes": sorted(self.absent_classes),
        }

    @staticmethod
    def from_dict(doc: dict) -> "MetricReport":
        return MetricReport(
            step=doc["step"],
            per_class_iou={int(k): v for k, v in doc["per_class_iou"].items()},
            base_miou=doc["base_miou"],
            new_miou=doc["new_miou"],
            all_miou=doc["all_miou"],
            groups={k: list(v) for k, v in doc["groups"].items()},
            absent_classes=list(doc.get("absent_classes", [])),
        )


def _mean_over(per_class: dict[int, float | None], ids: list[int]) -> float | None:
    vals = [per_class[c] for c in ids if per_class.get(c) is not None]
    if not vals:
        return None
    return float(sum(vals) / len(vals))


def grouped_miou(
    per_class: dict[int, float | None],
    groups: dict[str, list[int]],
    step: int = 0,
) -> MetricReport:
    """Aggregate per-class IoU into base / new / all means.

    `groups` holds disjoint foreground id lists "base" and "new"; background
    joins the base and all means per the table header convention ("0-15" is
    sixteen classes).
    """
    base_ids = sorted(groups.get("base", []))
    new_ids = sorted(groups.get("new", []))
    if set(base_ids) & set(new_ids):
        raise ConfigError(f"groups overlap: {sorted(set(base_ids) & set(new_ids))}")
    scored = [0] + base_ids + new_ids
    report = MetricReport(
        step=step,
        per_class_iou=dict(per_class),
        base_miou=_mean_over(per_class, [0] + base_ids),
        new_miou=_mean_over(per_class, new_ids),
        all_miou=_mean_over(per_class, scored),
        groups={"base": base_ids, "new": new_ids},
        absent_classes=[c for c in scored if per_class.get(c) is None],
    )
    return report


def _fmt(x: float | None) -> str:
    return "  --" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{100 * x:5.1f}"


def format_table(reports: list[MetricReport], name: str = "run") -> str:
    """Benchmark-style text rows: one per step, mIoU in percent."""
    if not reports:
        raise ConfigError("no reports to format")
    final = reports[-1]
    base_ids = final.groups["base"]
    new_ids = final.groups["new"]
    base_label = f"0-{max(base_ids)}" if base_ids else "base"
    new_label = (
        f"{min(new_ids)}-{max(new_ids)}" if len(new_ids) > 1
        else (str(new_ids[0]) if new_ids else "new")
    )
    lines = [f"{'step':>4}  {base_label:>6}  {new_label:>6}  {'all':>6}   ({name})"]
    for r in reports:
        lines.append(
            f"{r.step:>4}  {_fmt(r.base_miou):>6}  {_fmt(r.new_miou):>6}  {_fmt(r.all_miou):>6}"
        )
    return "\n".join(lines)


def emit_report(
    reports: list[MetricReport],
    fmt: str,
    out_dir: str | Path,
    name: str = "run",
) -> Path:
    """Write the step-wise reports as a table, raw JSON, or a step-mIoU plot."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path = out_dir / "report.json"
        path.write_text(json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True))
        return path
    if fmt == "table":
        path = out_dir / "report.txt"
        path.write_text(format_table(reports, name) + "\n")
        return path
    if fmt == "plot":
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        path = out_dir / "stepwise_miou.png"
        fig, ax = plt.subplots(figsize=(5, 3.5))
        steps = [r.step for r in reports]
        vals = [None if r.all_miou is None else 100 * r.all_miou for r in reports]
        ax.plot(steps, vals, marker="o", label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("mIoU (%)")
        ax.set_xticks(steps)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path
    raise ConfigError(f"unknown report format {fmt!r}")
