"""LiDAR scans, annotations, sequences, and their file formats.

Two on-disk formats are supported:

``native``
    JSON lines. The first line is a header ``{"num_points", "fov", "max_range"}``,
    every following line one scan ``{"t", "seq", "ranges", "persons"}``.
    ``persons`` is a list of ``[x, y]`` centers; when the key is absent the scan
    is unannotated (``None``), which is different from an empty list.

``drow``
    ``<name>.csv`` with lines ``seq_index,timestamp,r_0,...,r_{N-1}`` plus an
    optional sibling ``<name>.wp`` with lines ``seq_index,[[r, phi], ...]``
    holding person centers in polar form.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class ParseError(ValueError):
    """A sequence file could not be parsed."""


class ValidationError(ValueError):
    """Parsed data violates a data-model invariant."""


@dataclass(frozen=True)
class LidarConfig:
    num_points: int
    fov: float
    max_range: float

    def __post_init__(self):
        if int(self.num_points) != self.num_points or self.num_points < 2:
            raise ValidationError(f"num_points must be an integer >= 2, got {self.num_points}")
        if not (0 < self.fov <= 2 * math.pi):
            raise ValidationError(f"fov must be in (0, 2pi], got {self.fov}")
        if not self.max_range > 0:
            raise ValidationError(f"max_range must be positive, got {self.max_range}")

    @property
    def angle_increment(self) -> float:
        return self.fov / (self.num_points - 1)

    def beam_angles(self) -> np.ndarray:
        """Beam angles in radians, counterclockwise from +x, symmetric about 0."""
        return -0.5 * self.fov + np.arange(self.num_points) * self.angle_increment

    def to_dict(self) -> dict:
        return {"num_points": self.num_points, "fov": self.fov, "max_range": self.max_range}


@dataclass(frozen=True)
class Annotation:
    center: tuple[float, float]
    cls: str = "person"

    def __post_init__(self):
        if self.cls != "person":
            raise ValidationError(f"unsupported annotation class {self.cls!r}")


@dataclass(frozen=True, eq=False)
class Scan:
    ranges: np.ndarray
    timestamp: float
    sequence_index: int

    def __post_init__(self):
        r = np.array(self.ranges, dtype=np.float64)
        r.flags.writeable = False
        object.__setattr__(self, "ranges", r)

    def __eq__(self, other):
        if not isinstance(other, Scan):
            return NotImplemented
        return (self.timestamp == other.timestamp
                and self.sequence_index == other.sequence_index
                and np.array_equal(self.ranges, other.ranges))

    __hash__ = None


Persons = Optional[tuple[Annotation, ...]]


@dataclass(frozen=True)
class ScanSequence:
    """Time-ordered scans of one sensor. ``annotations[i]`` is ``None`` when
    scan ``i`` was never annotated."""

    config: LidarConfig
    scans: tuple[Scan, ...]
    annotations: tuple[Persons, ...] = field(default=None)

    def __post_init__(self):
        scans = tuple(self.scans)
        anns = self.annotations
        anns = (None,) * len(scans) if anns is None else tuple(
            None if a is None else tuple(a) for a in anns)
        object.__setattr__(self, "scans", scans)
        object.__setattr__(self, "annotations", anns)
        self.validate()

    def validate(self) -> None:
        if not self.scans:
            raise ValidationError("sequence has no scans")
        if len(self.annotations) != len(self.scans):
            raise ValidationError("annotations and scans differ in length")
        cfg = self.config
        for i, s in enumerate(self.scans):
            r = s.ranges
            if r.shape != (cfg.num_points,):
                raise ValidationError(
                    f"scan {i}: expected {cfg.num_points} ranges, got {r.shape[0] if r.ndim else 0}")
            if not (np.all(np.isfinite(r)) and np.all(r > 0) and np.all(r <= cfg.max_range)):
                raise ValidationError(f"scan {i}: ranges must be finite and in (0, max_range]")
        ts = [s.timestamp for s in self.scans]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValidationError("timestamps must be strictly increasing")
        lim = cfg.max_range + 1.0
        for i, persons in enumerate(self.annotations):
            for a in persons or ():
                if math.hypot(*a.center) > lim:
                    raise ValidationError(f"scan {i}: annotation {a.center} beyond max_range + 1 m")

    def __len__(self):
        return len(self.scans)

    def annotated_indices(self) -> list[int]:
        return [i for i, a in enumerate(self.annotations) if a is not None]

    def __eq__(self, other):
        if not isinstance(other, ScanSequence):
            return NotImplemented
        return (self.config == other.config and self.scans == other.scans
                and self.annotations == other.annotations)

    __hash__ = None


def sanitize_scan(raw: Sequence[float], config: LidarConfig) -> np.ndarray:
    """Replace no-return readings (NaN, inf, <= 0, > max_range) with max_range."""
    r = np.asarray(raw, dtype=np.float64).copy()
    bad = ~np.isfinite(r) | (r <= 0) | (r > config.max_range)
    r[bad] = config.max_range
    return r


def subsample_temporal(seq: ScanSequence, stride: int) -> ScanSequence:
    """Keep every ``stride``-th scan starting at index 0."""
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    if stride == 1:
        return seq
    return ScanSequence(seq.config, seq.scans[::stride], seq.annotations[::stride])


def endpoints(ranges: np.ndarray, config: LidarConfig) -> np.ndarray:
    """Cartesian beam endpoints, shape (N, 2)."""
    ang = config.beam_angles()
    return np.stack([ranges * np.cos(ang), ranges * np.sin(ang)], axis=-1)


# ---------------------------------------------------------------------------
# native format
# ---------------------------------------------------------------------------

def save_sequence(seq: ScanSequence, path) -> None:
    lines = [json.dumps(seq.config.to_dict())]
    for scan, persons in zip(seq.scans, seq.annotations):
        rec = {"t": scan.timestamp, "seq": scan.sequence_index,
               "ranges": [float(x) for x in scan.ranges]}
        if persons is not None:
            rec["persons"] = [[float(a.center[0]), float(a.center[1])] for a in persons]
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n")


def _load_native(path: Path) -> ScanSequence:
    text = path.read_text()
    rows = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    if not rows:
        raise ValidationError(f"{path}: empty file")
    try:
        header = json.loads(rows[0][1])
        config = LidarConfig(int(header["num_points"]), float(header["fov"]),
                             float(header["max_range"]))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: line {rows[0][0]}: bad header ({exc})") from exc
    scans, anns = [], []
    for lineno, ln in rows[1:]:
        try:
            rec = json.loads(ln)
            ranges = np.asarray(rec["ranges"], dtype=np.float64)
            scan = Scan(ranges, float(rec["t"]), int(rec["seq"]))
            persons = rec.get("persons")
            if persons is not None:
                persons = tuple(Annotation((float(x), float(y))) for x, y in persons)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from exc
        if ranges.shape != (config.num_points,):
            raise ValidationError(
                f"{path}: line {lineno}: expected {config.num_points} ranges, got {ranges.size}")
        scans.append(scan)
        anns.append(persons)
    return ScanSequence(config, scans, anns)


# ---------------------------------------------------------------------------
# DROW format
# ---------------------------------------------------------------------------

def _load_drow(path: Path, fov: float, max_range: float) -> ScanSequence:
    text = path.read_text()
    rows = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    if not rows:
        raise ValidationError(f"{path}: empty file")
    seq_ids, stamps, raw = [], [], []
    for lineno, ln in rows:
        parts = ln.split(",")
        try:
            seq_ids.append(int(parts[0]))
            stamps.append(float(parts[1]))
            raw.append([float(x) for x in parts[2:]])
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from exc
        if len(raw[-1]) != len(raw[0]):
            raise ParseError(f"{path}: line {lineno}: expected {len(raw[0])} ranges, "
                             f"got {len(raw[-1])}")
    config = LidarConfig(len(raw[0]), fov, max_range)
    scans = [Scan(sanitize_scan(r, config), t, s) for s, t, r in zip(seq_ids, stamps, raw)]

    persons_by_seq = {}
    wp = path.with_suffix(".wp")
    if wp.exists():
        for lineno, ln in enumerate(wp.read_text().splitlines(), start=1):
            if not ln.strip():
                continue
            head, _, body = ln.partition(",")
            try:
                polar = json.loads(body)
                persons_by_seq[int(head)] = tuple(
                    Annotation((r * math.cos(phi), r * math.sin(phi))) for r, phi in polar)
            except (ValueError, TypeError) as exc:
                raise ParseError(f"{wp}: line {lineno}: {exc}") from exc
    anns = [persons_by_seq.get(s) for s in seq_ids]
    return ScanSequence(config, scans, anns)


def load_sequence(path, format: str = "native", *, fov: float | None = None,
                  max_range: float = 30.0) -> ScanSequence:
    """Load a sequence file. ``fov`` is required for the DROW format, whose
    files do not record it."""
    path = Path(path)
    if format == "native":
        return _load_native(path)
    if format == "drow":
        if fov is None:
            raise ValueError("the DROW format needs an explicit fov")
        return _load_drow(path, fov, max_range)
    raise ValueError(f"unknown sequence format {format!r}")
