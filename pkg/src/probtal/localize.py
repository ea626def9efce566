"""Inference: fuse activation sequences, extract scored proposals, soft-NMS."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .evaluate import temporal_iou
from .features import IndexMap


@dataclass(frozen=True)
class Proposal:
    video_id: str
    class_id: int
    start: float
    end: float
    score: float


@dataclass
class LocalizeConfig:
    fusion_weight: float = 0.5
    thresholds: list[float] = field(
        default_factory=lambda: [round(0.1 + 0.05 * i, 2) for i in range(17)])
    class_threshold: float = 0.2
    nms_sigma: float = 0.3
    inflation: float = 0.25
    min_score: float = 1e-4

    def __post_init__(self):
        th = list(self.thresholds)
        if any(not 0 < t < 1 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError("thresholds must be strictly increasing within (0, 1)")
        if not 0 <= self.fusion_weight <= 1:
            raise ValueError("fusion_weight must lie in [0, 1]")


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def fuse_scores(s_supp: np.ndarray, s_prob: np.ndarray, w: float) -> np.ndarray:
    """w * softmax(S_supp) + (1 - w) * softmax(S_prob), row-wise over classes."""
    s_supp = np.asarray(s_supp, dtype=np.float64)
    s_prob = np.asarray(s_prob, dtype=np.float64)
    return w * _softmax(s_supp) + (1.0 - w) * _softmax(s_prob)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive (first, last) index pairs of consecutive True runs."""
    padded = np.concatenate([[0], mask.astype(np.int8), [0]])
    diff = np.diff(padded)
    starts = np.flatnonzero(diff == 1)
    ends = np.flatnonzero(diff == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def _outer_inner_score(scores: np.ndarray, first: int, last: int, rho: float) -> float:
    T = len(scores)
    length = last - first + 1
    pad = max(1, int(round(rho * length)))
    lo, hi = max(0, first - pad), min(T - 1, last + pad)
    inner = scores[first:last + 1].mean()
    outer = np.concatenate([scores[lo:first], scores[last + 1:hi + 1]])
    return float(inner - (outer.mean() if len(outer) else 0.0))


def candidate_runs(s_final: np.ndarray, a: np.ndarray, selected: list[int],
                   threshold: float) -> dict[int, list[tuple[int, int]]]:
    """Runs where a > threshold and the class wins among the selected classes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    winner = np.asarray(selected)[np.argmax(s_final[:, selected], axis=1)]
    return {c: _runs((a > threshold) & (winner == c)) for c in selected}


def generate_proposals(video_id: str, s_final: np.ndarray, a: np.ndarray, p_supp: np.ndarray,
                       cfg: LocalizeConfig, index_map: IndexMap) -> list[Proposal]:
    """Multi-threshold proposals with outer-inner contrast scores (deduplicated)."""
    C = len(p_supp) - 1
    selected = [c for c in range(C) if p_supp[c] > cfg.class_threshold]
    if not selected:
        return []
    best: dict[tuple[int, int, int], float] = {}
    for th in cfg.thresholds:
        for c, runs in candidate_runs(s_final, a, selected, th).items():
            col = s_final[:, c]
            for first, last in runs:
                score = _outer_inner_score(col, first, last, cfg.inflation) + float(p_supp[c])
                key = (c, first, last)
                if score > best.get(key, -math.inf):
                    best[key] = score
    out = []
    for (c, first, last), score in best.items():
        start, end = index_map.segment_seconds(first, last)
        if end > start:
            out.append(Proposal(video_id, c, start, end, score))
    return out


def soft_nms(proposals: list[Proposal], sigma: float = 0.3,
             min_score: float = 1e-4) -> list[Proposal]:
    """Gaussian soft-NMS per (video, class); boundaries are never changed."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    groups: dict[tuple[str, int], list[Proposal]] = {}
    for p in proposals:
        groups.setdefault((p.video_id, p.class_id), []).append(p)
    kept = []
    for key in sorted(groups):
        pool = [[p.start, p.end, p.score] for p in groups[key]]
        while pool:
            i = max(range(len(pool)), key=lambda j: pool[j][2])
            s0, e0, sc = pool.pop(i)
            kept.append(Proposal(key[0], key[1], s0, e0, sc))
            for q in pool:
                iou = temporal_iou((s0, e0), (q[0], q[1]))
                q[2] *= math.exp(-iou * iou / sigma)
    return [p for p in kept if p.score >= min_score]


def canonical_order(proposals: list[Proposal]) -> list[Proposal]:
    return sorted(proposals, key=lambda p: (p.video_id, -p.score, p.class_id, p.start, p.end))


def results_to_json(proposals: list[Proposal], class_names: list[str]) -> dict:
    results: dict[str, list] = {}
    for p in canonical_order(proposals):
        results.setdefault(p.video_id, []).append(
            {"label": class_names[p.class_id], "score": float(p.score),
             "segment": [float(p.start), float(p.end)]})
    return {"version": "1.0", "results": results}


def write_results(proposals: list[Proposal], path, class_names: list[str]) -> None:
    with open(path, "w") as fh:
        json.dump(results_to_json(proposals, class_names), fh, indent=1)


def read_results(path, class_names: list[str]) -> list[Proposal]:
    with open(path) as fh:
        doc = json.load(fh)
    index = {c: i for i, c in enumerate(class_names)}
    out = []
    for vid, items in doc["results"].items():
        for r in items:
            out.append(Proposal(vid, index[r["label"]], float(r["segment"][0]),
                                float(r["segment"][1]), float(r["score"])))
    return canonical_order(out)
