"""Detection metrics: AP at an association distance, peak-F1 and EER."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class EvaluationError(ValueError):
    pass


@dataclass
class EvalResult:
    ap: float
    peak_f1: float
    eer: float
    # rows of (recall, precision, threshold), thresholds decreasing
    pr_curve: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def as_dict(self) -> dict:
        return {"ap": self.ap, "peak_f1": self.peak_f1, "eer": self.eer}


def _xy(items) -> np.ndarray:
    pts = []
    for it in items:
        p = getattr(it, "center", None) or getattr(it, "position", None) or it
        pts.append((float(p[0]), float(p[1])))
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def _confidences(dets) -> np.ndarray:
    return np.array([d.confidence for d in dets], dtype=np.float64)


def match_frame(dets: Sequence, gts: Sequence, d: float):
    """Greedy matching of confidence-sorted detections to ground truth.

    Each detection, in order, claims the nearest still-unmatched ground truth
    at distance <= ``d`` (ties go to the lower ground-truth index). Returns
    ``(tp_flags, num_unmatched_gt)``.
    """
    if d <= 0:
        raise ValueError("association distance must be positive")
    det_xy, gt_xy = _xy(dets), _xy(gts)
    taken = np.zeros(len(gt_xy), dtype=bool)
    tp = np.zeros(len(det_xy), dtype=bool)
    if len(gt_xy):
        dist = np.linalg.norm(det_xy[:, None, :] - gt_xy[None, :, :], axis=-1)
        for i in range(len(det_xy)):
            cand = np.where(~taken & (dist[i] <= d), dist[i], np.inf)
            j = int(np.argmin(cand)) if len(cand) else 0
            if np.isfinite(cand[j]):
                taken[j] = True
                tp[i] = True
    return tp, int((~taken).sum())


def _eer(recall: np.ndarray, precision: np.ndarray) -> float:
    """Point where precision and recall meet, interpolated linearly between the
    bracketing curve points; points with zero recall are ignored."""
    keep = recall > 0
    r, p = recall[keep], precision[keep]
    if len(r) == 0:
        return 0.0
    diff = p - r
    crossing = np.flatnonzero(diff <= 0)
    if len(crossing) and crossing[0] > 0:
        i = crossing[0]
        lam = diff[i - 1] / (diff[i - 1] - diff[i])
        return float(r[i - 1] + lam * (r[i] - r[i - 1]))
    i = int(np.argmin(np.abs(diff)))
    return float(0.5 * (p[i] + r[i]))


def curve_metrics(recall: np.ndarray, precision: np.ndarray, thresholds: np.ndarray) -> EvalResult:
    """AP, peak-F1 and EER from a PR curve ordered by decreasing threshold."""
    if len(recall) == 0:
        return EvalResult(0.0, 0.0, 0.0)
    prev = np.concatenate([[0.0], recall[:-1]])
    ap = float(np.sum((recall - prev) * precision))
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    return EvalResult(ap, float(f1.max()), _eer(recall, precision),
                      np.stack([recall, precision, thresholds], axis=1))


def evaluate(frames: Sequence[tuple[Sequence, Sequence]], d: float = 0.5) -> EvalResult:
    """Pool ``(detections, ground_truths)`` over frames and score them.

    Frames whose ground truth is ``None`` (unannotated) are skipped.
    """
    if d <= 0:
        raise ValueError("association distance must be positive")
    frames = [(dets, gts) for dets, gts in frames if gts is not None]
    num_gt = sum(len(g) for _, g in frames)
    if num_gt == 0:
        raise EvaluationError("no ground-truth annotations to evaluate against")
    conf, fid, pos = [], [], []
    for k, (dets, _) in enumerate(frames):
        conf.append(_confidences(dets))
        fid.append(np.full(len(dets), k))
        pos.append(np.arange(len(dets)))
    conf = np.concatenate(conf) if conf else np.zeros(0)
    fid = np.concatenate(fid).astype(int)
    pos = np.concatenate(pos).astype(int)
    order = np.lexsort((pos, fid, -conf))
    gt_xy = [_xy(g) for _, g in frames]
    det_xy = [_xy(dts) for dts, _ in frames]
    taken = [np.zeros(len(g), dtype=bool) for g in gt_xy]
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        k = fid[i]
        g = gt_xy[k]
        if not len(g):
            continue
        dist = np.linalg.norm(g - det_xy[k][pos[i]], axis=1)
        cand = np.where(~taken[k] & (dist <= d), dist, np.inf)
        j = int(np.argmin(cand))
        if np.isfinite(cand[j]):
            taken[k][j] = True
            tp[rank] = True
    if len(order) == 0:
        return EvalResult(0.0, 0.0, 0.0)
    ctp = np.cumsum(tp)
    n = np.arange(1, len(order) + 1)
    sorted_conf = conf[order]
    # one curve point per distinct threshold (the last detection of each tie group)
    last = np.append(sorted_conf[1:] != sorted_conf[:-1], True)
    recall = ctp[last] / num_gt
    precision = ctp[last] / n[last]
    return curve_metrics(recall, precision, sorted_conf[last])


def pr_curve_csv(result: EvalResult) -> str:
    rows = ["recall,precision,threshold"]
    rows += [f"{r:.6f},{p:.6f},{t:.6f}" for r, p, t in result.pr_curve]
    return "\n".join(rows) + "\n"
