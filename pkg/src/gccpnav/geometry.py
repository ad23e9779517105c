"""Pose algebra, ego-frame transforms and oriented-box overlap tests (SAT)."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

DEFAULT_LENGTH = 4.0
DEFAULT_WIDTH = 1.8


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


def normalize_angles(a: np.ndarray) -> np.ndarray:
    """Vectorised :func:`normalize_angle`."""
    a = np.fmod(np.asarray(a, dtype=float), 2.0 * np.pi)
    a = np.where(a <= -np.pi, a + 2.0 * np.pi, a)
    return np.where(a > np.pi, a - 2.0 * np.pi, a)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float
    speed: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_angle(float(self.heading)))
        if self.speed is not None and self.speed < 0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, 0.0 if self.speed is None else self.speed])

    def distance_to(self, other: "Pose") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def heading_diff(self, other: "Pose") -> float:
        return abs(normalize_angle(self.heading - other.heading))

    def with_speed(self, speed: Optional[float]) -> "Pose":
        return replace(self, speed=speed)


def to_ego_frame(ego: Pose, p: Pose) -> Pose:
    """Express ``p`` in the frame centred on ``ego`` with x along the ego heading."""
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    dx, dy = p.x - ego.x, p.y - ego.y
    return Pose(c * dx + s * dy, -s * dx + c * dy, p.heading - ego.heading, p.speed)


def from_ego_frame(ego: Pose, p: Pose) -> Pose:
    """Inverse of :func:`to_ego_frame`."""
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    return Pose(ego.x + c * p.x - s * p.y, ego.y + s * p.x + c * p.y, p.heading + ego.heading, p.speed)


def to_ego_frame_array(ego_x: float, ego_y: float, ego_h: float, xyh: np.ndarray) -> np.ndarray:
    """Array form of :func:`to_ego_frame` for ``(..., >=3)`` arrays of (x, y, heading, ...).

    Columns past the third are copied unchanged.
    """
    xyh = np.asarray(xyh, dtype=float)
    out = xyh.copy()
    c, s = math.cos(ego_h), math.sin(ego_h)
    dx = xyh[..., 0] - ego_x
    dy = xyh[..., 1] - ego_y
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = normalize_angles(xyh[..., 2] - ego_h)
    return out


def from_ego_frame_array(ego_x: float, ego_y: float, ego_h: float, xyh: np.ndarray) -> np.ndarray:
    xyh = np.asarray(xyh, dtype=float)
    out = xyh.copy()
    c, s = math.cos(ego_h), math.sin(ego_h)
    out[..., 0] = ego_x + c * xyh[..., 0] - s * xyh[..., 1]
    out[..., 1] = ego_y + s * xyh[..., 0] + c * xyh[..., 1]
    out[..., 2] = normalize_angles(xyh[..., 2] + ego_h)
    return out


@dataclass(frozen=True)
class OrientedBox:
    center: Pose
    length: float = DEFAULT_LENGTH
    width: float = DEFAULT_WIDTH

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("box dimensions must be positive")

    @property
    def area(self) -> float:
        return self.length * self.width

    def corners(self) -> np.ndarray:
        """Corners as a (4, 2) array, counter-clockwise starting front-left."""
        return box_corners(self.center.x, self.center.y, self.center.heading, self.length, self.width)


def box_corners(x, y, heading, length, width) -> np.ndarray:
    """Corners of one or many boxes; trailing shape (4, 2)."""
    x, y, heading = np.asarray(x, float), np.asarray(y, float), np.asarray(heading, float)
    c, s = np.cos(heading)[..., None], np.sin(heading)[..., None]
    hl = np.asarray(length, float)[..., None] / 2.0
    hw = np.asarray(width, float)[..., None] / 2.0
    lx = np.array([1.0, -1.0, -1.0, 1.0]) * hl
    ly = np.array([1.0, 1.0, -1.0, -1.0]) * hw
    cx = x[..., None] + c * lx - s * ly
    cy = y[..., None] + s * lx + c * ly
    return np.stack([cx, cy], axis=-1)


def _separated_on(axis: np.ndarray, ca: np.ndarray, cb: np.ndarray) -> bool:
    pa = ca @ axis
    pb = cb @ axis
    return pa.max() < pb.min() or pb.max() < pa.min()


def sat_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """True iff the closed rectangles intersect. Touching counts as overlap."""
    ca, cb = a.corners(), b.corners()
    for h in (a.center.heading, b.center.heading):
        c, s = math.cos(h), math.sin(h)
        for axis in (np.array([c, s]), np.array([-s, c])):
            if _separated_on(axis, ca, cb):
                return False
    return True


def sat_overlap_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorised SAT over broadcastable arrays of boxes ``(..., 5)`` = (x, y, heading, length, width)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    a, b = np.broadcast_arrays(a, b)
    ca = box_corners(a[..., 0], a[..., 1], a[..., 2], a[..., 3], a[..., 4])
    cb = box_corners(b[..., 0], b[..., 1], b[..., 2], b[..., 3], b[..., 4])
    overlap = np.ones(a.shape[:-1], dtype=bool)
    for h in (a[..., 2], b[..., 2]):
        c, s = np.cos(h), np.sin(h)
        for ax, ay in ((c, s), (-s, c)):
            pa = ca[..., 0] * ax[..., None] + ca[..., 1] * ay[..., None]
            pb = cb[..., 0] * ax[..., None] + cb[..., 1] * ay[..., None]
            sep = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
            overlap &= ~sep
    return overlap


class TrajectoryLengthError(ValueError):
    """Raised when two trajectories compared step-by-step differ in length."""


def _as_xyh(traj) -> np.ndarray:
    if isinstance(traj, np.ndarray):
        return np.asarray(traj, float)[:, :3]
    return np.array([[p.x, p.y, p.heading] for p in traj], dtype=float).reshape(-1, 3)


def trajectories_collide(
    ego_traj: Sequence[Pose] | np.ndarray,
    other_traj: Sequence[Pose] | np.ndarray,
    ego_dims: tuple[float, float] = (DEFAULT_LENGTH, DEFAULT_WIDTH),
    other_dims: tuple[float, float] = (DEFAULT_LENGTH, DEFAULT_WIDTH),
) -> bool:
    """True iff the boxes overlap at any shared timestep index (no interpolation)."""
    e = _as_xyh(ego_traj)
    o = _as_xyh(other_traj)
    if e.shape[0] != o.shape[0]:
        raise TrajectoryLengthError(
            f"malformed prediction: trajectory lengths differ ({e.shape[0]} vs {o.shape[0]})"
        )
    a = np.column_stack([e, np.full(len(e), ego_dims[0]), np.full(len(e), ego_dims[1])])
    b = np.column_stack([o, np.full(len(o), other_dims[0]), np.full(len(o), other_dims[1])])
    return bool(sat_overlap_many(a, b).any())
