"""Synthetic 2D LiDAR scenes with walking two-legged persons.

The sensor sits static at the origin looking along +x. Persons move on a
straight line at constant velocity and bounce off the room walls; since the
motion is evaluated in closed form at each frame time, rendering at twice the
frame rate reproduces the original frames as every second frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .scan_data import Annotation, LidarConfig, Scan, ScanSequence, ValidationError, sanitize_scan


@dataclass(frozen=True)
class Person:
    position: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    leg_radius: float = 0.07
    leg_separation: float = 0.3
    # peak displacement of each leg along the walking direction
    swing_amplitude: float = 0.12
    # meters travelled per full gait cycle
    stride_length: float = 1.2

    @property
    def extent(self) -> float:
        """Radius of a disk that contains both legs at any gait phase."""
        return math.hypot(0.5 * self.leg_separation, self.swing_amplitude) + self.leg_radius


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class SceneSpec:
    room: tuple[float, float] = (4.0, 4.0)
    persons: tuple[Person, ...] = ()
    static_obstacles: tuple[Obstacle, ...] = ()
    noise_sigma: float = 0.0
    leg_dropout_prob: float = 0.0
    frame_rate: float = 10.0
    duration: float = 1.0
    rng_seed: int = 0
    room_center: tuple[float, float] = (0.0, 0.0)
    # annotate frames k with (k + 1) % annotation_stride == 0; others stay unannotated
    annotation_stride: int = 1
    # when False, persons that no beam hits in a frame are left out of its annotations
    annotate_hidden: bool = False

    def __post_init__(self):
        object.__setattr__(self, "persons", tuple(self.persons))
        object.__setattr__(self, "static_obstacles", tuple(self.static_obstacles))
        self.validate()

    @property
    def num_frames(self) -> int:
        return int(round(self.frame_rate * self.duration))

    def bounds(self):
        cx, cy = self.room_center
        hx, hy = self.room
        return (cx - hx, cx + hx), (cy - hy, cy + hy)

    def validate(self) -> None:
        hx, hy = self.room
        if hx <= 0 or hy <= 0:
            raise ValidationError("room half-extents must be positive")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not (0 <= self.leg_dropout_prob < 1):
            raise ValidationError("leg_dropout_prob must be in [0, 1)")
        if self.frame_rate <= 0 or self.duration <= 0:
            raise ValidationError("frame_rate and duration must be positive")
        if self.annotation_stride < 1:
            raise ValidationError("annotation_stride must be >= 1")
        (x0, x1), (y0, y1) = self.bounds()
        for i, p in enumerate(self.persons):
            if p.leg_radius <= 0 or p.leg_separation < 0:
                raise ValidationError(f"person {i}: bad leg geometry")
            m = p.extent
            if x1 - x0 <= 2 * m or y1 - y0 <= 2 * m:
                raise ValidationError(f"person {i}: room too small for the person")
            px, py = p.position
            if not (x0 + m <= px <= x1 - m and y0 + m <= py <= y1 - m):
                raise ValidationError(f"person {i} starts outside the room at {p.position}")
        for o in self.static_obstacles:
            if o.radius <= 0:
                raise ValidationError("obstacle radius must be positive")

    # -- JSON ---------------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["persons"] = tuple(Person(**{k: tuple(v) if isinstance(v, list) else v
                                       for k, v in p.items()}) for p in d.get("persons", ()))
        d["static_obstacles"] = tuple(Obstacle(tuple(o["center"]), o["radius"])
                                      for o in d.get("static_obstacles", ()))
        for key in ("room", "room_center"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# motion
# ---------------------------------------------------------------------------

def _fold(x: float, lo: float, hi: float) -> tuple[float, float]:
    """Reflect ``x`` into [lo, hi]; returns the folded value and the sign of
    the velocity after reflection."""
    span = hi - lo
    if span <= 0:
        return lo, 1.0
    u = (x - lo) % (2 * span)
    if u <= span:
        return lo + u, 1.0
    return lo + 2 * span - u, -1.0


def person_state(p: Person, t: float, spec: SceneSpec):
    """Center, unit heading and leg centers of person ``p`` at time ``t``."""
    (x0, x1), (y0, y1) = spec.bounds()
    m = p.extent
    vx, vy = p.velocity
    cx, sx = _fold(p.position[0] + vx * t, x0 + m, x1 - m)
    cy, sy = _fold(p.position[1] + vy * t, y0 + m, y1 - m)
    speed = math.hypot(vx, vy)
    if speed > 0:
        hx, hy = sx * vx / speed, sy * vy / speed
    else:
        hx, hy = 1.0, 0.0
    px, py = -hy, hx
    phase = 2 * math.pi * speed * t / p.stride_length
    swing = p.swing_amplitude * math.sin(phase)
    half = 0.5 * p.leg_separation
    legs = (
        (cx + half * px + swing * hx, cy + half * py + swing * hy),
        (cx - half * px - swing * hx, cy - half * py - swing * hy),
    )
    return (cx, cy), (hx, hy), legs


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------

def _ray_box(dirs: np.ndarray, bounds) -> np.ndarray:
    """Distance from the origin to the walls along each unit direction."""
    (x0, x1), (y0, y1) = bounds
    dx, dy = dirs[:, 0], dirs[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(dx > 0, x1 / dx, np.where(dx < 0, x0 / dx, np.inf))
        ty = np.where(dy > 0, y1 / dy, np.where(dy < 0, y0 / dy, np.inf))
    t = np.minimum(tx, ty)
    t[t <= 0] = np.inf
    return t


def _ray_circles(dirs: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Positive hit distance of each ray against each circle, shape (N, K)."""
    b = dirs @ centers.T
    c = np.sum(centers ** 2, axis=1) - radii ** 2
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t_near = b - sq
    t_far = b + sq
    t = np.where(t_near > 0, t_near, np.where(t_far > 0, t_far, np.inf))
    return np.where(disc >= 0, t, np.inf)


def cast_rays(config: LidarConfig, bounds, circles: np.ndarray):
    """Noise-free ranges for one frame.

    ``circles`` rows are (x, y, radius). Returns ``(ranges, hit)`` where
    ``hit[n]`` is the index of the circle beam ``n`` hit, or -1 for a wall.
    """
    ang = config.beam_angles()
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    walls = _ray_box(dirs, bounds)
    if len(circles) == 0:
        return walls, np.full(config.num_points, -1)
    tc = _ray_circles(dirs, circles[:, :2], circles[:, 2])
    best = tc.argmin(axis=1)
    tbest = tc[np.arange(len(dirs)), best]
    hit = np.where(tbest < walls, best, -1)
    return np.minimum(walls, tbest), hit


def render_sequence(spec: SceneSpec, config: LidarConfig) -> ScanSequence:
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    bounds = spec.bounds()
    static = [(o.center[0], o.center[1], o.radius) for o in spec.static_obstacles]
    scans, anns = [], []
    for k in range(spec.num_frames):
        t = k / spec.frame_rate
        circles = list(static)
        owner = [-1] * len(static)
        centers = []
        drop = rng.random((len(spec.persons), 2)) < spec.leg_dropout_prob
        for i, p in enumerate(spec.persons):
            center, _, legs = person_state(p, t, spec)
            centers.append(center)
            for j, (lx, ly) in enumerate(legs):
                if not drop[i, j]:
                    circles.append((lx, ly, p.leg_radius))
                    owner.append(i)
        ranges, hit = cast_rays(config, bounds, np.array(circles, dtype=np.float64).reshape(-1, 3))
        noise = rng.normal(0.0, 1.0, size=config.num_points)
        if spec.noise_sigma > 0:
            ranges = ranges + spec.noise_sigma * noise
        ranges = sanitize_scan(ranges, config)
        scans.append(Scan(ranges, t, k))
        if (k + 1) % spec.annotation_stride == 0:
            owners = np.asarray(owner)
            seen = set(owners[hit[hit >= 0]].tolist()) if len(owner) else set()
            anns.append(tuple(Annotation((float(cx), float(cy)))
                              for i, (cx, cy) in enumerate(centers)
                              if spec.annotate_hidden or i in seen))
        else:
            anns.append(None)
    return ScanSequence(config, scans, anns)


def render_dual_resolution(spec: SceneSpec, config_a: LidarConfig, config_b: LidarConfig):
    if (config_a.fov, config_a.max_range) != (config_b.fov, config_b.max_range):
        raise ValidationError("configs may differ only in num_points")
    return render_sequence(spec, config_a), render_sequence(spec, config_b)


# ---------------------------------------------------------------------------
# random scene generation for experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneDistribution:
    """Parameters for drawing random scenes."""

    num_persons: int = 2
    room: tuple[float, float] = (3.0, 3.5)
    room_center: tuple[float, float] = (2.5, 0.0)
    speed_range: tuple[float, float] = (0.4, 1.2)
    num_poles: int = 0
    pole_radius_range: tuple[float, float] = (0.05, 0.09)
    noise_sigma: float = 0.02
    leg_dropout_prob: float = 0.25
    frame_rate: float = 10.0
    duration: float = 3.0
    annotation_stride: int = 1
    min_person_spacing: float = 1.0
    extra: dict = field(default_factory=dict)


def random_scene(dist: SceneDistribution, seed: int) -> SceneSpec:
    rng = np.random.default_rng(seed)
    (cx, cy), (hx, hy) = dist.room_center, dist.room
    persons = []
    tries = 0
    while len(persons) < dist.num_persons:
        tries += 1
        if tries > 10_000:
            raise ValidationError("could not place persons; room too small")
        proto = Person((0.0, 0.0))
        m = proto.extent + 0.05
        pos = (float(rng.uniform(cx - hx + m, cx + hx - m)),
               float(rng.uniform(cy - hy + m, cy + hy - m)))
        if math.hypot(*pos) < 0.8:
            continue
        if any(math.dist(pos, q.position) < dist.min_person_spacing for q in persons):
            continue
        speed = rng.uniform(*dist.speed_range)
        heading = rng.uniform(-math.pi, math.pi)
        persons.append(Person(pos, (float(speed * math.cos(heading)),
                                    float(speed * math.sin(heading)))))
    poles = []
    while len(poles) < dist.num_poles:
        pos = (float(rng.uniform(cx - hx + 0.3, cx + hx - 0.3)),
               float(rng.uniform(cy - hy + 0.3, cy + hy - 0.3)))
        if math.hypot(*pos) < 0.8:
            continue
        poles.append(Obstacle(pos, float(rng.uniform(*dist.pole_radius_range))))
    return SceneSpec(room=dist.room, persons=tuple(persons), static_obstacles=tuple(poles),
                     noise_sigma=dist.noise_sigma, leg_dropout_prob=dist.leg_dropout_prob,
                     frame_rate=dist.frame_rate, duration=dist.duration,
                     rng_seed=int(rng.integers(2 ** 31)), room_center=dist.room_center,
                     annotation_stride=dist.annotation_stride)
