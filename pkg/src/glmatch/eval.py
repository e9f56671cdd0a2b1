"""Precision/recall/F-measure, robustness sweeps and the ablation table."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import cv2
import numpy as np

from .datagen import ImagePairRecord
from .geometry import rotation_about_center, scaling, transform_pair
from .losses import MatchGroundTruth
from .transport import MatchSet

Matcher = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], MatchSet]

FIG3_BLUR = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
FIG3_SCALE = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
FIG3_ROTATION = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0)
TABLE2_ROWS = (
    {"feature_loss": True, "topk_graph_learning": True, "glpooling": True},
    {"feature_loss": True, "topk_graph_learning": True, "glpooling": False},
    {"feature_loss": True, "topk_graph_learning": False, "glpooling": False},
    {"feature_loss": False, "topk_graph_learning": False, "glpooling": False},
)


@dataclass
class MatchMetrics:
    """Percentages plus the raw counts they came from.

    ``recall_defined`` is False when the ground truth has no pairs;
    ``precision_defined`` is False when nothing was predicted (precision reported as 0).
    """

    precision: float
    recall: float
    f_measure: float
    true_positives: int
    predicted: int
    gt_matches: int
    precision_defined: bool = True
    recall_defined: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def f_measure(precision: float, recall: float) -> float:
    return 2 * recall * precision / (recall + precision) if recall + precision > 0 else 0.0


def metrics_from_counts(tp: int, predicted: int, gt_matches: int) -> MatchMetrics:
    p = 100.0 * tp / predicted if predicted else 0.0
    r = 100.0 * tp / gt_matches if gt_matches else 0.0
    return MatchMetrics(p, r, f_measure(p, r), tp, predicted, gt_matches, predicted > 0, gt_matches > 0)


def precision_recall_f(predicted: MatchSet | Iterable, gt: MatchGroundTruth) -> MatchMetrics:
    """Exact index-pair agreement between predicted matches and ground-truth pairs."""
    pred = predicted.pairs if isinstance(predicted, MatchSet) else {(int(p[0]), int(p[1])) for p in predicted}
    truth = {(int(i), int(j)) for i, j in gt.pairs}
    return metrics_from_counts(len(pred & truth), len(pred), len(truth))


def aggregate(metrics: Iterable[MatchMetrics]) -> MatchMetrics:
    """Micro-average: pool counts over records. Records without ground-truth pairs are skipped."""
    tp = pred = gtm = 0
    for m in metrics:
        if not m.recall_defined:
            continue
        tp += m.true_positives
        pred += m.predicted
        gtm += m.gt_matches
    return metrics_from_counts(tp, pred, gtm)


# ---------------------------------------------------------------- robustness sweeps


@dataclass
class SweepResult:
    axis: str
    points: list[tuple[float, MatchMetrics | None]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"axis": self.axis, "points": [[v, None if m is None else m.to_dict()] for v, m in self.points]}


def transform_record(record: ImagePairRecord, axis: str, value: float) -> ImagePairRecord:
    """Apply one sweep transform to both images and remap lines and ground truth exactly.

    rotation: A by +value/2 and B by -value/2 degrees about the centre;
    blur: Gaussian blur with sigma ``value`` (0 = none); scale: isotropic resize.
    """
    a, b = record.image_a, record.image_b
    if axis == "blur":
        if value <= 0:
            return record
        blur = lambda img: cv2.GaussianBlur(img, (0, 0), value)  # noqa: E731
        return ImagePairRecord(blur(a), blur(b), record.lines_a, record.lines_b, record.gt, dict(record.meta))
    if axis == "rotation":
        ha = rotation_about_center(value / 2, a.shape[1], a.shape[0])
        hb = rotation_about_center(-value / 2, b.shape[1], b.shape[0])
        out = transform_pair(a, b, record.lines_a, record.lines_b, record.gt, ha, hb)
    elif axis == "scale":
        size_a = (round(a.shape[1] * value), round(a.shape[0] * value))
        size_b = (round(b.shape[1] * value), round(b.shape[0] * value))
        out = transform_pair(a, b, record.lines_a, record.lines_b, record.gt, scaling(value), scaling(value), size_a, size_b, min_length=4.0)
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")
    return ImagePairRecord(*out, meta=dict(record.meta))


def evaluate_record(matcher: Matcher, record: ImagePairRecord) -> MatchMetrics:
    pred = matcher(record.image_a, record.image_b, record.lines_a, record.lines_b)
    return precision_recall_f(pred, record.gt)


def robustness_sweep(matcher: Matcher, record: ImagePairRecord | Sequence[ImagePairRecord], axis: str, values: Sequence[float]) -> SweepResult:
    """Metrics at each transform strength. Several records are micro-averaged per point."""
    values = [float(v) for v in values]
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError("sweep values must be strictly increasing")
    records = [record] if isinstance(record, ImagePairRecord) else list(record)
    result = SweepResult(axis)
    for v in values:
        per = []
        for rec in records:
            moved = transform_record(rec, axis, v)
            if not moved.gt.pairs or len(moved.lines_a) == 0 or len(moved.lines_b) == 0:
                continue
            per.append(evaluate_record(matcher, moved))
        result.points.append((v, aggregate(per) if per else None))
    return result


def default_sweep_values(axis: str) -> tuple[float, ...]:
    return {"blur": FIG3_BLUR, "scale": FIG3_SCALE, "rotation": FIG3_ROTATION}[axis]


def plot_sweep(result: SweepResult, path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [v for v, m in result.points if m is not None]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, key in zip(axes, ("precision", "recall")):
        ax.plot(xs, [getattr(m, key) for _, m in result.points if m is not None], marker="o")
        ax.set_xlabel({"rotation": "relative angle (deg)", "blur": "sigma", "scale": "scale"}[result.axis])
        ax.set_ylabel(f"{key} (%)")
        ax.set_ylim(0, 100)
        if result.axis == "blur":
            ax.set_xlim(0.5, 3)
        elif result.axis == "scale":
            ax.set_xlim(0.4, 1)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------- ablation


def toggle_label(toggles: dict) -> str:
    return "".join("Y" if toggles[k] else "N" for k in ("feature_loss", "topk_graph_learning", "glpooling"))


def ablation_run(dataset: Sequence[ImagePairRecord], variants: dict, rows: Sequence[dict] = TABLE2_ROWS) -> list[dict]:
    """One metrics row per toggle combination, in the requested order.

    ``variants`` maps ``toggle_label(toggles)`` to a matcher; missing variants are skipped.
    """
    table = []
    for toggles in rows:
        key = toggle_label(toggles)
        matcher = variants.get(key)
        if matcher is None:
            warnings.warn(f"no trained variant for toggles {key}; row skipped", RuntimeWarning, stacklevel=2)
            continue
        agg = aggregate(evaluate_record(matcher, rec) for rec in dataset)
        table.append({**toggles, "P": agg.precision, "R": agg.recall, "F": agg.f_measure})
    return table


def write_metrics(metrics: MatchMetrics, json_path: str | Path, csv_path: str | Path | None = None) -> None:
    d = metrics.to_dict()
    Path(json_path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(d))
            w.writeheader()
            w.writerow(d)


def write_table(rows: list[dict], path: str | Path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)

