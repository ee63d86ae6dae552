"""Distance-robust cutouts: one fixed-size, depth-normalized window per beam."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scan_data import LidarConfig, Scan


@dataclass(frozen=True)
class CutoutParams:
    width_bar: float = 1.0
    depth: float = 0.5
    num_samples: int = 56

    def __post_init__(self):
        if self.width_bar <= 0 or self.depth <= 0:
            raise ValueError("cutout width and depth must be positive")
        if self.num_samples < 2:
            raise ValueError("cutouts need at least 2 samples")


# the larger window used by the original DROW setup
DROW_PARAMS = CutoutParams(width_bar=1.66, depth=1.0, num_samples=48)


@dataclass(frozen=True)
class CutoutBatch:
    values: np.ndarray          # (N, M) in [-1, 1]
    center_ranges: np.ndarray   # (N,)
    center_angles: np.ndarray   # (N,)


def angular_opening(s, width_bar: float):
    """Angle subtended by a window of width ``width_bar`` at distance ``s``."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("angular_opening: range must be positive")
    out = 2.0 * np.arctan(0.5 * width_bar / s)
    return float(out) if out.ndim == 0 else out


def sample_profile(ranges: np.ndarray, config: LidarConfig, angles: np.ndarray) -> np.ndarray:
    """Linearly interpolate the range profile at arbitrary angles; angles
    outside the field of view take the edge beam's value."""
    pos = (angles + 0.5 * config.fov) / config.angle_increment
    pos = np.clip(pos, 0.0, config.num_points - 1)
    lo = np.minimum(np.floor(pos).astype(np.intp), config.num_points - 2)
    frac = pos - lo
    return ranges[lo] * (1.0 - frac) + ranges[lo + 1] * frac


def cutouts_at(ranges: np.ndarray, center_ranges: np.ndarray, config: LidarConfig,
               params: CutoutParams, dtype=np.float32, beams=None) -> np.ndarray:
    """Cutouts of the profile ``ranges`` centered at the current beam angles
    and at distances ``center_ranges``.

    With ``center_ranges`` equal to ``ranges`` this is the ordinary cutout;
    passing the ranges of another scan gives the fixed-location sampling used
    by backward-looking fusion. ``beams`` restricts the output to a subset
    of beam indices.
    """
    theta = config.beam_angles()
    if beams is not None:
        theta, center_ranges = theta[beams], center_ranges[beams]
    half = 0.5 * angular_opening(center_ranges, params.width_bar)
    unit = np.linspace(-1.0, 1.0, params.num_samples)
    targets = theta[:, None] + half[:, None] * unit[None, :]
    sampled = sample_profile(ranges, config, targets)
    centered = np.clip(sampled - center_ranges[:, None], -params.depth, params.depth)
    return (centered / params.depth).astype(dtype)


def build_cutouts(scan: Scan, config: LidarConfig, params: CutoutParams,
                  dtype=np.float32) -> CutoutBatch:
    r = scan.ranges
    values = cutouts_at(r, r, config, params, dtype=dtype)
    return CutoutBatch(values, np.array(r), config.beam_angles())
