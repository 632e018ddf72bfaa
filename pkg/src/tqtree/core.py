"""Geometric primitives and domain entities."""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Hashable, NamedTuple, Sequence

import numpy as np

from . import _kernels as K


class Point(NamedTuple):
    x: float
    y: float


class ServiceMode(str, enum.Enum):
    """How a facility's service to one user trajectory is measured."""

    BINARY = "binary"
    POINT_COUNT = "point-count"
    LENGTH = "length"

    @property
    def code(self) -> int:
        return {"binary": K.BINARY, "point-count": K.POINT_COUNT, "length": K.LENGTH}[self.value]


def _as_points(points, min_len: int, what: str) -> np.ndarray:
    arr = np.array(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{what}: expected a sequence of (x, y) pairs, got shape {arr.shape}")
    if arr.shape[0] < min_len:
        raise ValueError(f"{what}: needs at least {min_len} points, got {arr.shape[0]}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{what}: coordinates must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class UserTrajectory:
    id: Hashable
    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _as_points(self.points, 2, f"user trajectory {self.id!r}"))

    def __len__(self) -> int:
        return self.points.shape[0]

    def __repr__(self) -> str:
        return f"UserTrajectory(id={self.id!r}, n={len(self)})"


@dataclass(frozen=True, eq=False)
class FacilityTrajectory:
    id: Hashable
    stops: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "stops", _as_points(self.stops, 1, f"facility {self.id!r}"))

    def __len__(self) -> int:
        return self.stops.shape[0]

    def __repr__(self) -> str:
        return f"FacilityTrajectory(id={self.id!r}, stops={len(self)})"


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 <= self.x1 and self.y0 <= self.y1):
            raise ValueError(f"degenerate rectangle {self}")

    @property
    def min(self) -> Point:
        return Point(self.x0, self.y0)

    @property
    def max(self) -> Point:
        return Point(self.x1, self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def contains_rect(self, other: "Rect") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def intersects(self, other: "Rect") -> bool:
        return not (other.x1 < self.x0 or other.x0 > self.x1
                    or other.y1 < self.y0 or other.y0 > self.y1)

    def quadrants(self) -> tuple["Rect", "Rect", "Rect", "Rect"]:
        """Children in z-order: low-x/low-y, high-x/low-y, low-x/high-y, high-x/high-y."""
        mx = (self.x0 + self.x1) / 2.0
        my = (self.y0 + self.y1) / 2.0
        return (Rect(self.x0, self.y0, mx, my), Rect(mx, self.y0, self.x1, my),
                Rect(self.x0, my, mx, self.y1), Rect(mx, my, self.x1, self.y1))

    def expand(self, d: float) -> "Rect":
        return Rect(self.x0 - d, self.y0 - d, self.x1 + d, self.y1 + d)

    def min_dist2(self, x: float, y: float) -> float:
        dx = max(self.x0 - x, 0.0, x - self.x1)
        dy = max(self.y0 - y, 0.0, y - self.y1)
        return dx * dx + dy * dy


@dataclass(frozen=True)
class ServiceParams:
    psi: float
    mode: ServiceMode = ServiceMode.BINARY

    def __post_init__(self):
        if not (self.psi > 0 and math.isfinite(self.psi)):
            raise ValueError(f"psi must be a positive finite distance, got {self.psi}")
        object.__setattr__(self, "mode", ServiceMode(self.mode))

    @property
    def psi2(self) -> float:
        return self.psi * self.psi


_component_ids = itertools.count()


@dataclass(frozen=True, eq=False)
class FacilityComponent:
    """The stops of one facility that can serve users inside ``cell``."""

    facility_id: Hashable
    stops: np.ndarray
    cell: Rect
    component_id: int = field(default_factory=lambda: next(_component_ids))
    # row numbers of ``stops`` in the parent facility's stop array
    stop_index: np.ndarray | None = None

    def __len__(self) -> int:
        return self.stops.shape[0]

    @property
    def empty(self) -> bool:
        return self.stops.shape[0] == 0


def id_sort_key(fid: Hashable):
    """Total order on facility ids used for tie-breaking (lower id wins)."""
    if isinstance(fid, bool):
        return (1, "bool", fid)
    if isinstance(fid, (int, float)):
        return (0, "", fid)
    return (1, type(fid).__name__, fid)


def slack(psi: float, rect: Rect | None = None) -> float:
    """Range used when testing stops against cells.

    Cells are rebuilt from integer grid coordinates, so a point on a cell edge
    can sit a rounding error outside the float rectangle. Widening by a tiny
    margin keeps cell-level pruning conservative; final decisions always use
    the exact point test.
    """
    scale = psi
    if rect is not None:
        scale += abs(rect.x0) + abs(rect.y0) + abs(rect.x1) + abs(rect.y1)
    return psi + 1e-9 * scale


def dist(p, q) -> float:
    return math.hypot(p[0] - q[0], p[1] - q[1])


def within(p, q, psi: float) -> bool:
    """The single proximity predicate used everywhere: squared distance <= psi**2."""
    dx = p[0] - q[0]
    dy = p[1] - q[1]
    return dx * dx + dy * dy <= psi * psi


def point_served(p, stops, psi: float) -> bool:
    for s in stops:
        if within(p, s, psi):
            return True
    return False


def embr(f: FacilityTrajectory, psi: float) -> Rect:
    """Bounding rectangle of ``f``'s stops grown by ``psi`` on every side."""
    s = f.stops
    return Rect(float(s[:, 0].min()) - psi, float(s[:, 1].min()) - psi,
                float(s[:, 0].max()) + psi, float(s[:, 1].max()) + psi)


def whole_component(f: FacilityTrajectory, cell: Rect) -> FacilityComponent:
    return FacilityComponent(f.id, f.stops, cell, stop_index=np.arange(len(f), dtype=np.int64))


def intersecting_components(cells: Sequence[Rect], f: FacilityComponent,
                            psi: float) -> list[FacilityComponent | None]:
    """Split ``f`` over child cells.

    Returns one entry per cell, in the order given: the component holding
    every stop within ``psi`` of that cell, or None when no stop qualifies.
    A stop near a split line is copied into each child it can serve.
    """
    out: list[FacilityComponent | None] = []
    sx = np.ascontiguousarray(f.stops[:, 0])
    sy = np.ascontiguousarray(f.stops[:, 1])
    for cell in cells:
        lim = slack(psi, cell)
        keep = K.stops_near_rect(sx, sy, cell.as_tuple(), lim * lim)
        if not keep.any():
            out.append(None)
            continue
        idx = None if f.stop_index is None else f.stop_index[keep]
        out.append(FacilityComponent(f.facility_id, f.stops[keep], cell, stop_index=idx))
    return out


def segment_lengths(points: np.ndarray) -> np.ndarray:
    d = np.diff(points, axis=0)
    return np.hypot(d[:, 0], d[:, 1])


def trajectory_length(u: UserTrajectory) -> float:
    return math.fsum(segment_lengths(u.points))
