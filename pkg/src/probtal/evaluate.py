"""Temporal IoU, per-class average precision and mAP@IoU reports."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

AVERAGE_RANGES = {
    "0.1:0.7": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
    "0.1:0.5": [0.1, 0.2, 0.3, 0.4, 0.5],
    "0.3:0.7": [0.3, 0.4, 0.5, 0.6, 0.7],
    "0.5:0.95": [round(0.5 + 0.05 * i, 2) for i in range(10)],
}
DEFAULT_THRESHOLDS = sorted({t for r in AVERAGE_RANGES.values() for t in r})


def temporal_iou(a, b) -> float:
    """|a ∩ b| / |a ∪ b| for (start, end) intervals."""
    if a[1] <= a[0] or b[1] <= b[0]:
        raise ValueError("zero-length segment")
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def _interpolated_ap(prec: np.ndarray, rec: np.ndarray) -> float:
    mprec = np.concatenate([[0.0], prec, [0.0]])
    mrec = np.concatenate([[0.0], rec, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(proposals, gts: dict[str, list], iou_thr: float) -> float:
    """AP of one class.

    ``proposals``: (video_id, start, end, score) tuples ranked by descending
    score. ``gts``: video_id -> list of (start, end). Each ground truth is
    matched at most once, greedily in rank order, to the proposal's best
    unmatched overlap at or above ``iou_thr``.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        raise ValueError("class has no ground truth")
    if len(proposals) == 0:
        return 0.0
    used = {vid: np.zeros(len(segs), dtype=bool) for vid, segs in gts.items()}
    tp = np.zeros(len(proposals))
    for i, (vid, start, end, _score) in enumerate(proposals):
        segs = gts.get(vid, [])
        if not segs:
            continue
        ious = np.array([temporal_iou((start, end), g) for g in segs])
        for j in np.argsort(-ious, kind="stable"):
            if ious[j] < iou_thr:
                break
            if used[vid][j]:
                continue
            used[vid][j] = True
            tp[i] = 1.0
            break
    ctp = np.cumsum(tp)
    rec = ctp / n_gt
    prec = ctp / np.arange(1, len(proposals) + 1)
    return _interpolated_ap(prec, rec)


@dataclass
class EvalReport:
    thresholds: list[float]
    mAP: dict[float, float]
    per_class: dict[str, dict[float, float]]
    averages: dict[str, float] = field(default_factory=dict)
    skipped_classes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "mAP": {f"{t:.2f}": v for t, v in self.mAP.items()},
            "average": dict(self.averages),
            "per_class": {c: {f"{t:.2f}": v for t, v in aps.items()}
                          for c, aps in self.per_class.items()},
            "skipped_classes": list(self.skipped_classes),
        }

    def to_table(self) -> str:
        head = "".join(f"{t:>7.2f}" for t in self.thresholds)
        row = "".join(f"{100 * self.mAP[t]:>7.2f}" for t in self.thresholds)
        lines = [f"{'IoU':<10}{head}", f"{'mAP(%)':<10}{row}"]
        for name, value in self.averages.items():
            lines.append(f"{'avg ' + name:<16}{100 * value:>7.2f}")
        return "\n".join(lines)


def _rank(items: list[tuple]) -> list[tuple]:
    # score desc, then a content key so file order never matters
    return sorted(items, key=lambda r: (-r[3], r[0], r[1], r[2]))


def evaluate_detections(results: dict[str, list], database: dict[str, dict],
                        thresholds=None) -> EvalReport:
    """mAP over the classes present in the ground truth."""
    thresholds = [round(float(t), 2) for t in (thresholds or DEFAULT_THRESHOLDS)]
    gt_by_class: dict[str, dict[str, list]] = {}
    for vid, entry in database.items():
        for ann in entry.get("annotations", []):
            seg = (float(ann["segment"][0]), float(ann["segment"][1]))
            gt_by_class.setdefault(ann["label"], {}).setdefault(vid, []).append(seg)
    pred_by_class: dict[str, list] = {}
    for vid, items in results.items():
        for r in items:
            pred_by_class.setdefault(r["label"], []).append(
                (vid, float(r["segment"][0]), float(r["segment"][1]), float(r["score"])))
    skipped = sorted(set(pred_by_class) - set(gt_by_class))
    if skipped:
        log.info("classes without ground truth skipped: %s", skipped)

    per_class = {}
    for cls in sorted(gt_by_class):
        ranked = _rank(pred_by_class.get(cls, []))
        per_class[cls] = {t: average_precision(ranked, gt_by_class[cls], t) for t in thresholds}
    mAP = {t: float(np.mean([per_class[c][t] for c in per_class])) if per_class else 0.0
           for t in thresholds}
    averages = {name: float(np.mean([mAP[t] for t in members]))
                for name, members in AVERAGE_RANGES.items()
                if all(t in mAP for t in members)}
    return EvalReport(thresholds, mAP, per_class, averages, skipped)


def evaluate(results_path, gt_path, thresholds=None) -> EvalReport:
    with open(results_path) as fh:
        results = json.load(fh)
    with open(gt_path) as fh:
        gt = json.load(fh)
    if "results" not in results or "database" not in gt:
        raise ValueError("malformed results or ground-truth file")
    return evaluate_detections(results["results"], gt["database"], thresholds)
