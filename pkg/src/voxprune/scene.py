"""Synthetic Lidar-like scenes: radial ground and clutter plus box-shaped objects."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .boxes import GroundTruthBox
from .errors import ConfigError
from .voxel import VoxelGridSpec

GROUND, CLUTTER, OBJECT = 0, 1, 2


@dataclass(frozen=True)
class SceneBox:
    """Object footprint in meters: center, full length/width, height, yaw, point count."""

    x: float
    y: float
    length: float = 4.0
    width: float = 1.8
    height: float = 1.5
    yaw: float = 0.0
    points: int = 500

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ConfigError("box dimensions must be positive")
        if self.points < 0:
            raise ConfigError("box point count must be non-negative")

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [hl, -hw], [-hl, hw], [-hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])


@dataclass(frozen=True)
class SceneSpec:
    """A square scene of side ``extent`` meters centered on the sensor.

    Ground and clutter are drawn with areal density proportional to
    ``r ** -exponent`` (``ground_exponent`` for the ground) between
    ``r_min`` and the far corner of the square.
    """

    extent: float = 51.2
    clutter_points: int = 15000
    ground_points: int = 40000
    boxes: tuple = ()
    exponent: float = 2.0
    ground_exponent: float = 2.0
    r_min: float = 2.0
    clutter_height: float = 2.5
    seed: int = 0

    def __post_init__(self):
        boxes = tuple(b if isinstance(b, SceneBox) else SceneBox(**b) for b in self.boxes)
        object.__setattr__(self, "boxes", boxes)
        if self.extent <= 0 or self.r_min < 0:
            raise ConfigError("extent must be positive and r_min non-negative")
        if self.clutter_points < 0 or self.ground_points < 0:
            raise ConfigError("point counts must be non-negative")
        half = self.extent / 2
        for b in boxes:
            if np.abs(b.corners()).max() > half:
                raise ConfigError(f"box at ({b.x}, {b.y}) leaves the scene extent")

    def to_dict(self):
        d = asdict(self)
        d["boxes"] = [asdict(b) for b in self.boxes]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class Scene:
    points: np.ndarray
    labels: np.ndarray
    boxes: tuple
    spec: SceneSpec = field(repr=False, default=None)


def radial_sample(rng, n: int, exponent: float, r_min: float, half: float) -> np.ndarray:
    """``n`` points in the square ``[-half, half)^2`` with areal density ``~ r ** -exponent``.

    Radii come from the inverse CDF on ``[r_min, half * sqrt(2)]``; points
    falling outside the square are redrawn.
    """
    r_max = half * math.sqrt(2.0)
    lo = max(r_min, 1e-6)
    a = 2.0 - exponent
    out = np.zeros((0, 2))
    while len(out) < n:
        m = max(16, int((n - len(out)) * 1.6))
        u = rng.random(m)
        if abs(a) < 1e-12:
            r = lo * (r_max / lo) ** u
        else:
            r = (lo**a + u * (r_max**a - lo**a)) ** (1.0 / a)
        th = rng.random(m) * 2.0 * math.pi
        xy = np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
        xy = xy[(np.abs(xy) < half).all(axis=1)]
        out = np.concatenate([out, xy])
    return out[:n]


def _box_points(rng, b: SceneBox) -> np.ndarray:
    n = b.points
    local = np.stack(
        [
            (rng.random(n) - 0.5) * b.length,
            (rng.random(n) - 0.5) * b.width,
            0.2 + rng.random(n) * (b.height - 0.2),
        ],
        axis=1,
    )
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    x = b.x + c * local[:, 0] - s * local[:, 1]
    y = b.y + s * local[:, 0] + c * local[:, 1]
    r = 0.5 + 0.5 * rng.random(n)
    return np.stack([x, y, local[:, 2], r], axis=1)


def generate_scene(spec: SceneSpec) -> Scene:
    """Seeded point cloud ``(N, 4)`` with per-point labels (ground, clutter, object)."""
    rng = np.random.default_rng(spec.seed)
    half = spec.extent / 2
    parts, labels = [], []

    g = radial_sample(rng, spec.ground_points, spec.ground_exponent, spec.r_min, half)
    gz = rng.normal(0.0, 0.02, len(g))
    parts.append(np.column_stack([g, gz, 0.2 * rng.random(len(g))]))
    labels.append(np.full(len(g), GROUND))

    c = radial_sample(rng, spec.clutter_points, spec.exponent, spec.r_min, half)
    cz = rng.random(len(c)) * spec.clutter_height
    parts.append(np.column_stack([c, cz, 0.4 * rng.random(len(c))]))
    labels.append(np.full(len(c), CLUTTER))

    for b in spec.boxes:
        parts.append(_box_points(rng, b))
        labels.append(np.full(b.points, OBJECT))

    points = np.concatenate(parts)
    # keep strictly inside the square so the floor convention maps every point to a cell
    points[:, :2] = np.clip(points[:, :2], -half, np.nextafter(half, 0.0))
    return Scene(points, np.concatenate(labels), spec.boxes, spec)


def boxes_on_grid(boxes, grid: VoxelGridSpec) -> list:
    """Scene boxes as BEV boxes in continuous cell units of ``grid`` (cell centers are integers)."""
    out = []
    for b in boxes:
        u, v = grid.to_cell_units(np.array([b.x, b.y]))
        out.append(GroundTruthBox(float(u), float(v), b.length / 2 / grid.voxel_size[0],
                                  b.width / 2 / grid.voxel_size[1], b.yaw))
    return out


def ground_density(spec: "SceneSpec", r: float) -> float:
    """Expected ground points per square meter at range ``r`` (ignoring the square's corners)."""
    r_max = spec.extent / 2 * math.sqrt(2.0)
    lo = max(spec.r_min, 1e-6)
    a = 2.0 - spec.ground_exponent
    norm = math.log(r_max / lo) if abs(a) < 1e-12 else (r_max**a - lo**a) / a
    return spec.ground_points * r ** (1.0 - spec.ground_exponent) / norm / (2.0 * math.pi * max(r, lo))


def box_point_count(spec: "SceneSpec", x: float, y: float, length: float, width: float,
                    contrast: float = 2.0, floor: int = 8) -> int:
    """Points on an object: ``contrast`` times the ground density at its range, over its footprint."""
    return max(floor, int(round(contrast * ground_density(spec, math.hypot(x, y)) * length * width)))


# x, y, yaw, length, width, height
CANONICAL_BOXES = (
    (6.0, 3.0, 0.0, 4.0, 1.8, 1.5),
    (-8.0, 9.0, 0.6, 4.0, 1.8, 1.5),
    (12.0, -10.0, 1.2, 4.2, 1.8, 1.6),
    (-15.0, -6.0, 0.3, 3.8, 1.7, 1.5),
    (19.0, 8.0, -0.4, 4.0, 1.8, 1.5),
    (-4.0, -17.0, 1.5708, 4.5, 1.9, 1.7),
    (3.0, 21.0, 0.9, 4.0, 1.8, 1.5),
    (-20.0, 16.0, 0.0, 4.0, 1.8, 1.5),
    (9.0, -4.0, 0.0, 0.8, 0.8, 1.7),
    (-23.0, -3.0, 0.4, 0.7, 0.7, 1.8),
    (23.0, -21.0, 0.0, 0.8, 0.8, 1.7),
)


def canonical_scene_spec(seed: int = 7) -> SceneSpec:
    """Fixed scene with eight cars and three pedestrians, used by the acceptance checks and CLI defaults."""
    base = SceneSpec(seed=seed)
    boxes = tuple(
        SceneBox(x, y, l, w, h, yaw, box_point_count(base, x, y, l, w)) for x, y, yaw, l, w, h in CANONICAL_BOXES
    )
    return replace(base, boxes=boxes)


CAR = ((3.5, 4.8), (1.6, 2.0), (1.3, 1.8))
PEDESTRIAN = ((0.6, 0.9), (0.6, 0.9), (1.5, 1.9))


def random_scene_spec(seed: int, n_boxes=(4, 10), r_range=(4.0, 34.0), min_gap: float = 4.0,
                      contrast: float = 2.0, small_fraction: float = 0.4, **kw) -> SceneSpec:
    """A scene from the seeded random family.

    Object count, placement, yaw and size vary; ``small_fraction`` of the
    objects are pedestrian-sized, the rest car-sized.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    n = int(rng.integers(n_boxes[0], n_boxes[1] + 1))
    base = SceneSpec(seed=seed, **kw)
    half = base.extent / 2
    boxes = []
    tries = 0
    while len(boxes) < n and tries < 1000:
        tries += 1
        r = rng.uniform(*r_range)
        th = rng.uniform(0, 2 * math.pi)
        x, y = r * math.cos(th), r * math.sin(th)
        kind = PEDESTRIAN if rng.random() < small_fraction else CAR
        length, width, height = (rng.uniform(*lim) for lim in kind)
        box = SceneBox(x, y, length, width, height, rng.uniform(-math.pi, math.pi),
                       box_point_count(base, x, y, length, width, contrast))
        if np.abs(box.corners()).max() > half - 0.5:
            continue
        if any(math.hypot(x - o.x, y - o.y) < min_gap for o in boxes):
            continue
        boxes.append(box)
    return replace(base, boxes=tuple(boxes))
