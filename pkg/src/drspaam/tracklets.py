"""Link detections across frames using the attention correspondences.

For every beam the detector reports which beam of the previous template it
found most similar. A detection follows the majority of its supporting
beams back to a detection of the previous frame and joins that detection's
tracklet if the two are closer than ``link_dist``.
"""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .detector import StateError
from .vote import Detection


@dataclass
class Tracklet:
    detections: list[tuple[int, Detection]] = field(default_factory=list)

    @property
    def confidence(self) -> float:
        return float(np.mean([d.confidence for _, d in self.detections]))

    @property
    def frames(self) -> list[int]:
        return [f for f, _ in self.detections]

    @property
    def positions(self) -> np.ndarray:
        return np.array([d.position for _, d in self.detections], dtype=np.float64).reshape(-1, 2)

    def __len__(self):
        return len(self.detections)

    def velocities(self, frame_rate: float) -> np.ndarray:
        """Finite-difference velocity between consecutive members (m/s)."""
        if len(self) < 2:
            return np.zeros((0, 2))
        dt = np.diff(self.frames)[:, None] / frame_rate
        return np.diff(self.positions, axis=0) / dt


def associate(stream: Iterable[tuple[int, Sequence[Detection], np.ndarray | None]],
              link_dist: float = 0.5) -> list[Tracklet]:
    """Group detections into tracklets.

    ``stream`` yields ``(frame, detections, correspondence)`` in time order,
    where ``correspondence[n]`` is the previous-frame beam most similar to
    beam ``n`` (-1 for none). Only the first frame may omit it.
    """
    tracklets: list[Tracklet] = []
    prev: list[tuple[Detection, int]] = []
    last_frame = None
    for frame, dets, corr in stream:
        if last_frame is not None and frame <= last_frame:
            raise ValueError("frames must be strictly increasing")
        if prev and corr is None:
            raise StateError(f"frame {frame}: no attention correspondences available")
        owners: dict[int, list[int]] = {}
        for j, (d, _) in enumerate(prev):
            for b in d.supporting_points:
                owners.setdefault(b, []).append(j)
        claimed: set[int] = set()
        current = []
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
        for i in order:
            det = dets[i]
            target = None
            if prev:
                back = [int(corr[b]) for b in det.supporting_points if corr[b] >= 0]
                votes = Counter(j for c in back for j in owners.get(c, ()))
                if votes:
                    j, count = min(votes.items(), key=lambda kv: (-kv[1], kv[0]))
                    pd, tid = prev[j]
                    close = np.hypot(det.position[0] - pd.position[0],
                                     det.position[1] - pd.position[1]) < link_dist
                    if 2 * count > len(back) and close and tid not in claimed:
                        target = tid
            if target is None:
                tracklets.append(Tracklet())
                target = len(tracklets) - 1
            claimed.add(target)
            tracklets[target].detections.append((frame, det))
            current.append((det, target))
        current.sort(key=lambda dt: -dt[0].confidence)
        prev = current
        last_frame = frame
    return tracklets


def filter_tracklets(tracklets: Sequence[Tracklet], min_conf: float = 0.35,
                     min_len: int = 5) -> list[Tracklet]:
    return [t for t in tracklets if len(t) >= min_len and t.confidence > min_conf]


def tracklets_to_json(tracklets: Sequence[Tracklet]) -> str:
    out = [{"id": i, "frames": t.frames, "positions": t.positions.tolist(),
            "confidence": t.confidence} for i, t in enumerate(tracklets)]
    return json.dumps(out, indent=1)


def tracklets_to_csv(tracklets: Sequence[Tracklet]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["id", "frame", "x", "y", "conf"])
    for i, t in enumerate(tracklets):
        for f, d in t.detections:
            w.writerow([i, f, f"{d.position[0]:.4f}", f"{d.position[1]:.4f}", f"{d.confidence:.4f}"])
    return buf.getvalue()
