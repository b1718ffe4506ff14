"""Angle conventions, circular metrics, box algebra, mask rasterization and
pinhole projection plumbing.

Conventions used throughout the package:
  * angles are radians, normalized to [0, 2pi); theta=0 means the object
    faces screen-right
  * pixel boxes use a top-left origin, x right, y down, and serialize as
    JSON arrays [x0, y0, x1, y1]
  * spatial masks are additive logit offsets: 0 inside the admissible
    region, -inf outside
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, PlacementError, ProjectionError

TWO_PI = 2.0 * math.pi

DEFAULT_BOX_PADDING = 1.2  # loose-box padding factor, > 1 loosens the box


def wrap_angle(theta: float) -> float:
    """Wrap a finite angle into [0, 2pi)."""
    if not math.isfinite(theta):
        raise DomainError(f"angle must be finite, got {theta!r}")
    r = math.fmod(theta, TWO_PI)
    if r < 0.0:
        r += TWO_PI
    if r >= TWO_PI:  # fmod(-eps) + 2pi can round up to exactly 2pi
        r -= TWO_PI
    return r


def circular_distance(a: float, b: float) -> float:
    """Shortest arc between two angles, in [0, pi]."""
    if not (math.isfinite(a) and math.isfinite(b)):
        raise DomainError(f"angles must be finite, got {a!r}, {b!r}")
    # abs before any 2pi correction: fmod and negation are exact, so this
    # path is bitwise symmetric in (a, b)
    d = abs(math.fmod(a - b, TWO_PI))
    return min(d, TWO_PI - d)


def flip_adjusted_distance(a: float, b: float) -> float:
    """Circular distance identifying theta with theta+pi, in [0, pi/2].

    Used when the reference orientation is only defined up to a 180-degree
    flip (a flipped box induces the same loose conditioning signal).
    """
    if not (math.isfinite(a) and math.isfinite(b)):
        raise DomainError(f"angles must be finite, got {a!r}, {b!r}")
    d = math.fmod(a - b, math.pi)
    if d < 0.0:
        d += math.pi
    if d >= math.pi:
        d -= math.pi
    return min(d, math.pi - d)


@dataclass(frozen=True)
class Orientation:
    """Per-object orientation: one yaw angle, or three angles in the
    generalized mode. Angles are stored normalized to [0, 2pi)."""

    angles: tuple[float, ...]

    def __post_init__(self):
        if len(self.angles) not in (1, 3):
            raise DomainError(
                f"orientation must have 1 or 3 angles, got {len(self.angles)}"
            )
        object.__setattr__(self, "angles", tuple(wrap_angle(a) for a in self.angles))

    @classmethod
    def yaw(cls, theta: float) -> "Orientation":
        return cls((theta,))

    @property
    def theta(self) -> float:
        return self.angles[0]

    def to_json(self):
        return self.theta if len(self.angles) == 1 else list(self.angles)

    @classmethod
    def from_json(cls, value) -> "Orientation":
        if isinstance(value, (int, float)):
            return cls.yaw(float(value))
        return cls(tuple(float(v) for v in value))


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned pixel box, top-left origin."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(v) for v in vals):
            raise DomainError(f"box coordinates must be finite: {vals}")
        if min(vals) < 0:
            raise DomainError(f"box coordinates must be >= 0: {vals}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise DomainError(f"box must have positive extent: {vals}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def contains_box(self, other: "Box2D") -> bool:
        return (
            self.x0 <= other.x0
            and self.y0 <= other.y0
            and self.x1 >= other.x1
            and self.y1 >= other.y1
        )

    def contains_point(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def to_json(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_json(cls, arr) -> "Box2D":
        x0, y0, x1, y1 = (float(v) for v in arr)
        return cls(x0, y0, x1, y1)


def iou(a: Box2D, b: Box2D) -> float:
    """Intersection area over union area, in [0, 1]."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class LooseBox:
    """Square admissible region around a tight object box.

    ``side`` is the pre-clipping side length (padding * max(h, w) of the
    source box); ``box`` is the square centered on the source box, clipped
    to the image extent.
    """

    box: Box2D
    side: float
    padding: float
    source: Box2D


def loose_box(
    b: Box2D, padding: float, image_w: float, image_h: float
) -> LooseBox:
    """Build the loose square box around a tight box, clipped to the image.

    The square has side padding * max(height, width) and shares the tight
    box's center before clipping; clipping never shifts the center back in,
    so the loose box always contains the tight one when padding >= 1.
    """
    if padding < 1.0:
        raise ConfigError(f"loose-box padding must be >= 1, got {padding}")
    image = Box2D(0.0, 0.0, float(image_w), float(image_h))
    if not image.contains_box(b):
        raise DomainError(f"tight box {b.to_json()} outside image {image_w}x{image_h}")
    side = padding * max(b.height, b.width)
    cx, cy = b.center
    half = 0.5 * side
    clipped = Box2D(
        max(0.0, cx - half),
        max(0.0, cy - half),
        min(float(image_w), cx + half),
        min(float(image_h), cy + half),
    )
    return LooseBox(box=clipped, side=side, padding=padding, source=b)


@dataclass(frozen=True)
class SpatialMask:
    """Additive logit mask over an attention grid: 0 inside, -inf outside."""

    grid_w: int
    grid_h: int
    values: np.ndarray = field(repr=False)  # (grid_h, grid_w), float32

    def __post_init__(self):
        v = self.values
        if v.shape != (self.grid_h, self.grid_w):
            raise DomainError(f"mask shape {v.shape} != grid {self.grid_h}x{self.grid_w}")
        finite_zero = v == 0.0
        neg_inf = np.isneginf(v)
        if not np.all(finite_zero | neg_inf):
            raise DomainError("mask cells must be exactly 0 or -inf")
        if not finite_zero.any():
            raise DomainError("mask must keep at least one open cell")

    @property
    def open_fraction(self) -> float:
        return float((self.values == 0.0).mean())

    def flat(self) -> np.ndarray:
        """Row-major (cell,) view matching flattened spatial queries."""
        return self.values.reshape(-1)


def rasterize_mask(
    lb: LooseBox, grid_w: int, grid_h: int, image_w: float, image_h: float
) -> SpatialMask:
    """Rasterize a loose box onto an attention grid by cell-center sampling.

    A cell is open (0) iff its center, mapped to pixel space, lies inside
    the box, boundary inclusive. A box smaller than one cell still opens
    the single cell whose center is nearest the box center, so the bound
    token is never fully suppressed.
    """
    if grid_w < 1 or grid_h < 1:
        raise DomainError(f"grid dims must be >= 1, got {grid_w}x{grid_h}")
    cx = (np.arange(grid_w, dtype=np.float64) + 0.5) * (image_w / grid_w)
    cy = (np.arange(grid_h, dtype=np.float64) + 0.5) * (image_h / grid_h)
    inside_x = (cx >= lb.box.x0) & (cx <= lb.box.x1)
    inside_y = (cy >= lb.box.y0) & (cy <= lb.box.y1)
    inside = inside_y[:, None] & inside_x[None, :]
    values = np.where(inside, 0.0, -np.inf).astype(np.float32)
    if not inside.any():
        bx, by = lb.box.center
        d2 = (cx[None, :] - bx) ** 2 + (cy[:, None] - by) ** 2
        j, i = np.unravel_index(int(np.argmin(d2)), d2.shape)
        values[j, i] = 0.0
    return SpatialMask(grid_w=grid_w, grid_h=grid_h, values=values)


@dataclass(frozen=True)
class CameraModel:
    """Minimal pinhole camera: world frame has z up, floor on the x-y plane.

    The camera sits at ``position`` looking along world +y, pitched down
    by ``tilt`` radians. Camera axes: x right (world +x), y down in the
    image, z forward.
    """

    focal_px: float
    cx: float
    cy: float
    position: tuple[float, float, float]
    tilt: float

    def __post_init__(self):
        if self.focal_px <= 0:
            raise DomainError(f"focal length must be > 0, got {self.focal_px}")

    def project(self, point: tuple[float, float, float]) -> tuple[float, float]:
        """World point -> pixel coordinates. Raises if behind the camera."""
        px, py, pz = self.position
        dx = point[0] - px
        dy = point[1] - py
        dz = point[2] - pz
        ct, st = math.cos(self.tilt), math.sin(self.tilt)
        # rotate about camera x-axis: forward = (0, cos t, -sin t)
        x_cam = dx
        z_cam = dy * ct - dz * st
        y_cam = -(dy * st + dz * ct)
        if z_cam <= 0.0:
            raise ProjectionError(f"point {point} behind camera (z_cam={z_cam:.4f})")
        u = self.focal_px * x_cam / z_cam + self.cx
        v = self.focal_px * y_cam / z_cam + self.cy
        if not (math.isfinite(u) and math.isfinite(v)):
            raise ProjectionError(f"projection of {point} is not finite")
        return (u, v)


def aabb_corners(aabb: tuple[tuple[float, float, float], tuple[float, float, float]]):
    """The 8 corners of a world-space axis-aligned box ((min), (max))."""
    (x0, y0, z0), (x1, y1, z1) = aabb
    return [
        (x, y, z)
        for x in (x0, x1)
        for y in (y0, y1)
        for z in (z0, z1)
    ]


def project_bounds(
    aabb: tuple[tuple[float, float, float], tuple[float, float, float]],
    cam: CameraModel,
) -> Box2D:
    """Tight pixel box over the projected corners of a world-space AABB."""
    us, vs = [], []
    for corner in aabb_corners(aabb):
        u, v = cam.project(corner)
        us.append(u)
        vs.append(v)
    return Box2D(min(us), min(vs), max(us), max(vs))


def spawn_boxes(
    n: int,
    image_w: float,
    image_h: float,
    seed: int,
    size_range: tuple[float, float] = (0.25, 0.45),
    existing: list[Box2D] | None = None,
    max_attempts: int = 1000,
) -> list[Box2D]:
    """Spawn n pairwise-disjoint boxes inside the image, deterministically.

    Box sides are drawn as fractions of min(image_w, image_h) from
    size_range. Candidates overlapping any already-placed (or ``existing``)
    box are rejected; exhausting the attempt budget raises PlacementError.
    """
    if not (1 <= n <= 6):
        raise DomainError(f"box count must be in [1, 6], got {n}")
    lo, hi = size_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ConfigError(f"size_range must satisfy 0 < lo <= hi <= 1, got {size_range}")
    rng = np.random.Generator(np.random.PCG64(seed))
    base = min(image_w, image_h)
    placed: list[Box2D] = list(existing or [])
    spawned: list[Box2D] = []
    attempts = 0
    while len(spawned) < n:
        if attempts >= max_attempts:
            raise PlacementError(
                f"could not place {n} disjoint boxes in {max_attempts} attempts "
                f"({len(spawned)} placed)"
            )
        attempts += 1
        w = float(rng.uniform(lo, hi) * base)
        h = float(rng.uniform(lo, hi) * base)
        if w >= image_w or h >= image_h:
            continue
        x0 = float(rng.uniform(0.0, image_w - w))
        y0 = float(rng.uniform(0.0, image_h - h))
        cand = Box2D(x0, y0, x0 + w, y0 + h)
        if all(iou(cand, p) == 0.0 for p in placed):
            placed.append(cand)
            spawned.append(cand)
    return spawned
