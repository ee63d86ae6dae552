"""Turn per-beam predictions into person detections by grid voting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .detector import PointPredictions
from .nn import sigmoid
from .scan_data import LidarConfig, Scan, endpoints


@dataclass(frozen=True)
class VoteParams:
    grid_bin: float = 0.10
    grid_extent: float = 12.0
    min_confidence: float = 0.3
    nms_radius: int = 1

    def __post_init__(self):
        if self.grid_bin <= 0:
            raise ValueError("grid_bin must be positive")
        n = self.grid_extent / self.grid_bin
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ValueError("grid_extent must be a positive multiple of grid_bin")
        if self.nms_radius < 0:
            raise ValueError("nms_radius must be >= 0")

    @property
    def bins_per_axis(self) -> int:
        return 2 * int(round(self.grid_extent / self.grid_bin))


@dataclass(frozen=True)
class Detection:
    position: tuple[float, float]
    confidence: float
    supporting_points: tuple[int, ...] = ()


@dataclass
class Votes:
    positions: np.ndarray   # (V, 2)
    weights: np.ndarray     # (V,)
    beams: np.ndarray       # (V,)

    def __len__(self):
        return len(self.weights)


def local_to_sensor(offsets: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate (radial, tangential) offsets into the sensor frame."""
    c, s = np.cos(angles), np.sin(angles)
    return np.stack([c * offsets[..., 0] - s * offsets[..., 1],
                     s * offsets[..., 0] + c * offsets[..., 1]], axis=-1)


def sensor_to_local(vectors: np.ndarray, angles: np.ndarray) -> np.ndarray:
    c, s = np.cos(angles), np.sin(angles)
    return np.stack([c * vectors[..., 0] + s * vectors[..., 1],
                     -s * vectors[..., 0] + c * vectors[..., 1]], axis=-1)


def cast_votes(preds: PointPredictions, scan: Scan, config: LidarConfig,
               params: VoteParams) -> Votes:
    prob = sigmoid(np.asarray(preds.cls_logits, dtype=np.float64))
    keep = np.flatnonzero(prob >= params.min_confidence)
    pts = endpoints(scan.ranges, config)[keep]
    off = local_to_sensor(np.asarray(preds.offsets, dtype=np.float64)[keep],
                          config.beam_angles()[keep])
    return Votes(pts + off, prob[keep], keep)


def aggregate(votes: Votes, params: VoteParams) -> list[Detection]:
    """Hard-binned voting grid, strict-maximum NMS, centroid refinement."""
    if len(votes) == 0:
        return []
    # canonical order so the result depends only on the vote multiset
    order = np.lexsort((votes.beams, votes.weights, votes.positions[:, 1], votes.positions[:, 0]))
    pos, w, beams = votes.positions[order], votes.weights[order], votes.beams[order]
    ext = params.grid_extent
    inside = np.all((pos >= -ext) & (pos <= ext), axis=1)
    pos, w, beams = pos[inside], w[inside], beams[inside]
    if len(w) == 0:
        return []
    nb = params.bins_per_axis
    cell = np.minimum(np.floor((pos + ext) / params.grid_bin).astype(np.int64), nb - 1)
    flat = cell[:, 0] * nb + cell[:, 1]
    occupied, inverse = np.unique(flat, return_inverse=True)
    mass = np.zeros(len(occupied))
    np.add.at(mass, inverse, w)
    mass_of = dict(zip(occupied.tolist(), mass.tolist()))
    r = params.nms_radius
    seeds = []
    for b, m in mass_of.items():
        bx, by = divmod(b, nb)
        is_seed = True
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                if dx == 0 and dy == 0:
                    continue
                x, y = bx + dx, by + dy
                if not (0 <= x < nb and 0 <= y < nb):
                    continue
                other = x * nb + y
                mo = mass_of.get(other)
                if mo is not None and (mo > m or (mo == m and other < b)):
                    is_seed = False
                    break
            if not is_seed:
                break
        if is_seed:
            seeds.append(b)
    dets = []
    for b in sorted(seeds):
        bx, by = divmod(b, nb)
        sel = (np.abs(cell[:, 0] - bx) <= r) & (np.abs(cell[:, 1] - by) <= r)
        ws = w[sel]
        centroid = (ws[:, None] * pos[sel]).sum(axis=0) / ws.sum()
        dets.append(Detection((float(centroid[0]), float(centroid[1])), float(ws.mean()),
                              tuple(sorted(int(i) for i in beams[sel]))))
    dets.sort(key=lambda d: -d.confidence)
    return dets


def detect(preds: PointPredictions, scan: Scan, config: LidarConfig,
           params: VoteParams = VoteParams()) -> list[Detection]:
    return aggregate(cast_votes(preds, scan, config, params), params)


def detections_to_jsonl(frames: list[list[Detection]]) -> str:
    lines = []
    for k, dets in enumerate(frames):
        for d in dets:
            lines.append(json.dumps({"frame": k, "x": d.position[0], "y": d.position[1],
                                     "conf": d.confidence}))
    return "\n".join(lines) + ("\n" if lines else "")


def detections_from_jsonl(text: str, num_frames: int | None = None) -> list[list[Detection]]:
    by_frame: dict[int, list[Detection]] = {}
    for ln in text.splitlines():
        if ln.strip():
            rec = json.loads(ln)
            by_frame.setdefault(int(rec["frame"]), []).append(
                Detection((float(rec["x"]), float(rec["y"])), float(rec["conf"])))
    n = num_frames if num_frames is not None else (max(by_frame) + 1 if by_frame else 0)
    return [by_frame.get(k, []) for k in range(n)]
