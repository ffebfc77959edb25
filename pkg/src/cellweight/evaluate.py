"""Detection matching, distance sweeps and classification metrics.

Detections match ground truth one-to-one if their centres are strictly
closer than the distance cap. Among all such matchings the one with the
most pairs is chosen, and among those the one with the smallest total
distance (optimal assignment, not greedy).

Empty-set conventions: precision is 1 when there are no detections and
recall is 1 when there is no ground truth; F1 is 0 when both are 0.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .annotations import CellClass, DotAnnotationSet
from .infer import DetectionResult

DEFAULT_CAPS = tuple(float(c) for c in range(1, 21))


@dataclass
class MatchReport:
    tp: int
    fp: int
    fn: int
    distance_cap_px: float
    pairs: list[tuple[int, int, float]] = field(default_factory=list)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    @property
    def total_distance(self) -> float:
        return float(sum(d for _, _, d in self.pairs))

    def summary(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "distance_cap_px": self.distance_cap_px,
        }


def combine_reports(reports: Iterable[MatchReport]) -> MatchReport:
    """Pool per-region reports by summing counts (pairs are dropped)."""
    reports = list(reports)
    caps = {r.distance_cap_px for r in reports}
    if len(caps) > 1:
        raise ValueError(f"cannot pool reports with different caps {sorted(caps)}")
    return MatchReport(
        tp=sum(r.tp for r in reports),
        fp=sum(r.fp for r in reports),
        fn=sum(r.fn for r in reports),
        distance_cap_px=caps.pop() if caps else 0.0,
    )


def _as_points(obj) -> np.ndarray:
    if isinstance(obj, (DetectionResult, DotAnnotationSet)):
        return obj.points()
    pts = np.asarray(obj, dtype=np.float64)
    return pts.reshape(-1, 2)


def match_points(dets: np.ndarray, gt: np.ndarray, cap_px: float) -> MatchReport:
    if not cap_px > 0:
        raise ValueError(f"cap_px must be > 0, got {cap_px}")
    n, m = len(dets), len(gt)
    if n == 0 or m == 0:
        return MatchReport(0, n, m, cap_px)
    dist = np.hypot(dets[:, None, 0] - gt[None, :, 0], dets[:, None, 1] - gt[None, :, 1])
    allowed = dist < cap_px
    # Forbidden pairs cost more than any full set of allowed pairs, so the
    # assignment maximises the number of allowed pairs first.
    big = cap_px * (min(n, m) + 1)
    rows, cols = linear_sum_assignment(np.where(allowed, dist, big))
    pairs = [(int(i), int(j), float(dist[i, j])) for i, j in zip(rows, cols) if allowed[i, j]]
    tp = len(pairs)
    return MatchReport(tp, n - tp, m - tp, cap_px, pairs)


def match_detections(dets, gt, cap_px: float = 10.0) -> MatchReport:
    """Capped optimal one-to-one matching of detections to ground-truth dots.

    ``dets`` and ``gt`` may be DetectionResult / DotAnnotationSet or (n, 2)
    arrays of (x, y).
    """
    return match_points(_as_points(dets), _as_points(gt), cap_px)


def sweep_distance(dets, gt, caps: Sequence[float] = DEFAULT_CAPS) -> tuple[float, dict[float, MatchReport]]:
    """Match at every cap; return the F1-maximising cap (smallest on ties) and all reports."""
    if not caps or any(c <= 0 for c in caps):
        raise ValueError("caps must be a nonempty list of positive distances")
    reports = {float(c): match_detections(dets, gt, float(c)) for c in caps}
    best = min(reports, key=lambda c: (-reports[c].f1, c))
    return best, reports


def sweep_regions(pairs: Sequence[tuple], caps: Sequence[float] = DEFAULT_CAPS) -> tuple[float, dict[float, MatchReport]]:
    """Like :func:`sweep_distance` but pooling counts over many (dets, gt) regions."""
    if not caps or any(c <= 0 for c in caps):
        raise ValueError("caps must be a nonempty list of positive distances")
    reports = {float(c): combine_reports(match_detections(d, g, float(c)) for d, g in pairs) for c in caps}
    best = min(reports, key=lambda c: (-reports[c].f1, c))
    return best, reports


def per_class_detection_report(dets: DetectionResult, gt: DotAnnotationSet, cap_px: float = 10.0) -> dict[CellClass, MatchReport]:
    """Match detections to ground truth separately within each class.

    Every detection must carry a class label.
    """
    if any(d.cell_class is None for d in dets.centers):
        raise ValueError("per-class matching needs classified detections")
    classes = sorted({d.cell_class for d in dets.centers} | gt.classes(), key=lambda c: c.index)
    out = {}
    for c in classes:
        dp = np.array([(d.x, d.y) for d in dets.centers if d.cell_class == c]).reshape(-1, 2)
        gp = np.array([(d.x, d.y) for d in gt.dots if d.cell_class == c]).reshape(-1, 2)
        out[c] = match_points(dp, gp, cap_px)
    return out


def recall_by_gt_class(dets, gt: DotAnnotationSet, cap_px: float = 10.0) -> dict[CellClass, tuple[int, int]]:
    """Class-agnostic matching, then (matched, total) ground-truth dots per class.

    This is how a detector that does not predict classes is scored per
    class: which of the annotated cells of each type did it find.
    """
    report = match_detections(dets, gt, cap_px)
    matched = {j for _, j, _ in report.pairs}
    counts: dict[CellClass, list[int]] = defaultdict(lambda: [0, 0])
    for j, d in enumerate(gt.dots):
        counts[d.cell_class][1] += 1
        counts[d.cell_class][0] += j in matched
    return {c: (v[0], v[1]) for c, v in sorted(counts.items(), key=lambda kv: kv[0].index)}


@dataclass
class ClassificationReport:
    confusion: np.ndarray
    roc: dict[int, tuple[np.ndarray, np.ndarray]]
    auc: dict[int, float | None]
    accuracy: float

    def summary(self, class_names: Sequence[str] | None = None) -> dict:
        name = (lambda k: class_names[k]) if class_names else str
        return {
            "accuracy": self.accuracy,
            "auc": {name(k): v for k, v in self.auc.items()},
            "confusion": self.confusion.tolist(),
        }


def roc_curve(scores: np.ndarray, positive: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) from (0, 0) to (1, 1), one point per distinct score threshold."""
    order = np.argsort(-scores, kind="stable")
    s, pos = scores[order], positive[order]
    distinct = np.flatnonzero(np.diff(s)) if len(s) > 1 else np.array([], dtype=int)
    cut = np.r_[distinct, len(s) - 1]
    tps = np.cumsum(pos)[cut]
    fps = (cut + 1) - tps
    tpr = np.r_[0.0, tps / pos.sum()]
    fpr = np.r_[0.0, fps / (~pos).sum()]
    return fpr, tpr


def classification_metrics(y_true: Sequence[int], probs: np.ndarray) -> ClassificationReport:
    """Confusion matrix (rows = truth), one-vs-rest ROC/AUC per class, argmax accuracy.

    A class with no positives or no negatives in ``y_true`` gets AUC ``None``
    and no ROC curve.
    """
    y = np.asarray(y_true, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or len(y) != len(probs):
        raise ValueError("probs must be (n, n_classes) with one row per label")
    if len(np.unique(y)) < 2:
        raise ValueError("classification metrics need at least two classes present")
    k = probs.shape[1]
    pred = probs.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    roc, auc = {}, {}
    for c in range(k):
        pos = y == c
        if pos.all() or not pos.any():
            auc[c] = None
            continue
        fpr, tpr = roc_curve(probs[:, c], pos)
        roc[c] = (fpr, tpr)
        auc[c] = float(np.trapezoid(tpr, fpr))
    return ClassificationReport(confusion, roc, auc, float((pred == y).mean()))


def format_table(rows: dict[str, MatchReport], title: str = "") -> str:
    """Plain-text Precision / Recall / F1 table, one row per model or class."""
    width = max([len(n) for n in rows] + [6])
    lines = [title] if title else []
    lines.append(f"{'Method':<{width}}  Precision  Recall  F1-score  Cap(px)")
    for name, r in rows.items():
        lines.append(f"{name:<{width}}  {r.precision:9.4f}  {r.recall:6.4f}  {r.f1:8.4f}  {r.distance_cap_px:7.1f}")
    return "\n".join(lines) + "\n"


def write_json(obj, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
