"""Metric 3D index over anchor points linked to entry ids.

One anchor per entry (its latest centroid). Queries: radius, k-nearest,
axis-aligned box, and directional filtering relative to an ego pose. The
backing structure is a uniform grid hash sized to the spatial match
threshold; every query mode returns exactly what an exhaustive scan would.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import EgoState, InvalidKeyError, UnknownEntryError, as_vec3

RELATIONS = ("ahead", "behind", "left", "right", "above", "below")

_QUARTER = math.pi / 4.0
_THREE_QUARTER = 3.0 * math.pi / 4.0


@dataclass
class SpatialKey:
    """One spatial constraint; build via the radius/knn/box/directional helpers."""

    mode: str
    center: np.ndarray | None = None
    r: float | None = None
    k: int | None = None
    box_min: np.ndarray | None = None
    box_max: np.ndarray | None = None
    relation: str | None = None
    max_range: float | None = None
    ego: EgoState | None = field(default=None, repr=False)

    @classmethod
    def radius(cls, center, r: float) -> "SpatialKey":
        key = cls(mode="radius", center=as_vec3(center), r=float(r))
        key.validate()
        return key

    @classmethod
    def knn(cls, center, k: int) -> "SpatialKey":
        key = cls(mode="knn", center=as_vec3(center), k=int(k))
        key.validate()
        return key

    @classmethod
    def box(cls, box_min, box_max) -> "SpatialKey":
        key = cls(mode="box", box_min=as_vec3(box_min), box_max=as_vec3(box_max))
        key.validate()
        return key

    @classmethod
    def directional(cls, relation: str, max_range: float,
                    ego: EgoState | None = None) -> "SpatialKey":
        key = cls(mode="directional", relation=relation, max_range=float(max_range),
                  ego=ego)
        key.validate()
        return key

    def validate(self) -> None:
        if self.mode == "radius":
            if self.center is None or self.r is None or not self.r > 0:
                raise InvalidKeyError("radius key requires a center and r > 0")
        elif self.mode == "knn":
            if self.center is None or self.k is None or self.k < 1:
                raise InvalidKeyError("knn key requires a center and k >= 1")
        elif self.mode == "box":
            if self.box_min is None or self.box_max is None:
                raise InvalidKeyError("box key requires min and max corners")
            if np.any(self.box_min > self.box_max):
                raise InvalidKeyError("box min must be <= max componentwise")
        elif self.mode == "directional":
            if self.relation not in RELATIONS:
                raise InvalidKeyError(f"unknown relation {self.relation!r}")
            if self.max_range is None or not self.max_range > 0:
                raise InvalidKeyError("directional key requires max_range > 0")
        else:
            raise InvalidKeyError(f"unknown spatial key mode {self.mode!r}")

    def with_ego(self, ego: EgoState | None) -> "SpatialKey":
        if self.mode != "directional" or ego is None:
            return self
        return SpatialKey(mode="directional", relation=self.relation,
                          max_range=self.max_range, ego=ego)


def to_ego(point_world, ego: EgoState) -> np.ndarray:
    """World point expressed in the ego frame (+x forward, +y left, +z up)."""
    return ego.rotation().T @ (as_vec3(point_world) - ego.position)


def from_ego(point_ego, ego: EgoState) -> np.ndarray:
    return ego.rotation() @ as_vec3(point_ego) + ego.position


def in_sector(point_ego, relation: str) -> bool:
    """Sector membership by ego-frame azimuth/elevation with 45-degree half-angles.

    Sectors are closed, so boundary directions belong to both adjacent
    sectors; together ahead/behind/left/right cover every azimuth.
    """
    x, y, z = float(point_ego[0]), float(point_ego[1]), float(point_ego[2])
    if relation in ("above", "below"):
        elev = math.atan2(z, math.hypot(x, y))
        return elev >= _QUARTER if relation == "above" else elev <= -_QUARTER
    az = math.atan2(y, x)
    if relation == "ahead":
        return abs(az) <= _QUARTER
    if relation == "behind":
        return abs(az) >= _THREE_QUARTER
    if relation == "left":
        return _QUARTER <= az <= _THREE_QUARTER
    if relation == "right":
        return -_THREE_QUARTER <= az <= -_QUARTER
    raise InvalidKeyError(f"unknown relation {relation!r}")


class GridIndex:
    """Uniform grid hash over anchor points; re-insertion replaces the point."""

    def __init__(self, cell_size: float = 0.5):
        if not cell_size > 0:
            raise ValueError("cell_size must be > 0")
        self._cell = float(cell_size)
        self._points: dict[str, np.ndarray] = {}
        self._grid: dict[tuple[int, int, int], set[str]] = {}

    def __len__(self) -> int:
        return len(self._points)

    def ids(self) -> set[str]:
        return set(self._points)

    def point(self, entry_id: str) -> np.ndarray:
        return self._points[entry_id]

    def _key(self, point: np.ndarray) -> tuple[int, int, int]:
        return tuple(int(math.floor(c / self._cell)) for c in point)

    def insert(self, entry_id: str, point) -> None:
        p = as_vec3(point)
        if not np.all(np.isfinite(p)):
            raise ValueError("anchor point must be finite")
        self.remove(entry_id)
        self._points[entry_id] = p
        self._grid.setdefault(self._key(p), set()).add(entry_id)

    def remove(self, entry_id: str) -> None:
        old = self._points.pop(entry_id, None)
        if old is not None:
            cell = self._key(old)
            bucket = self._grid.get(cell)
            if bucket is not None:
                bucket.discard(entry_id)
                if not bucket:
                    del self._grid[cell]

    def candidates_near(self, center, r: float) -> list[str]:
        """Ids in every grid cell overlapping the ball; a superset of the
        radius result, with no distance filtering applied."""
        c = as_vec3(center)
        lo = [int(math.floor((c[i] - r) / self._cell)) for i in range(3)]
        hi = [int(math.floor((c[i] + r) / self._cell)) for i in range(3)]
        n_cells = (hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1) * (hi[2] - lo[2] + 1)
        if n_cells > max(64, len(self._points)):
            return list(self._points)
        out: list[str] = []
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                for k in range(lo[2], hi[2] + 1):
                    out.extend(self._grid.get((i, j, k), ()))
        return out

    def arrays(self) -> tuple[list[str], np.ndarray]:
        """Stable (ids, N x 3 matrix) view for vectorized scans."""
        ids = sorted(self._points)
        if not ids:
            return ids, np.zeros((0, 3))
        return ids, np.stack([self._points[i] for i in ids])


def insert_anchor(db, entry_id: str, point) -> None:
    """Anchor (or move) an entry's special point in the map."""
    with db.lock.write():
        if entry_id not in db.entries:
            raise UnknownEntryError(f"no entry {entry_id!r}")
        db.anchors.insert(entry_id, point)


def spatial_search(db, key: SpatialKey) -> list[tuple[str, float]]:
    """(entry_id, distance) pairs sorted ascending by distance, ties by id.

    Distance is measured from the query center (radius/knn), from the box
    center (box), or from the ego position (directional).
    """
    key.validate()
    with db.lock.read():
        ids, pts = db.anchors.arrays()
        if not ids:
            return []
        id_arr = np.asarray(ids)

        if key.mode == "radius":
            d = np.linalg.norm(pts - key.center, axis=1)
            mask = d <= key.r
        elif key.mode == "knn":
            d = np.linalg.norm(pts - key.center, axis=1)
            order = np.lexsort((id_arr, d))
            order = order[: key.k]
            return [(ids[i], float(d[i])) for i in order]
        elif key.mode == "box":
            center = (key.box_min + key.box_max) / 2.0
            d = np.linalg.norm(pts - center, axis=1)
            mask = np.all((pts >= key.box_min) & (pts <= key.box_max), axis=1)
        else:  # directional
            if key.ego is None:
                raise InvalidKeyError("directional key requires an ego state")
            rel = pts - key.ego.position
            d = np.linalg.norm(rel, axis=1)
            ego_pts = rel @ key.ego.rotation()
            sector = np.fromiter(
                (in_sector(p, key.relation) for p in ego_pts),
                dtype=bool,
                count=len(ego_pts),
            )
            mask = sector & (d <= key.max_range)

        idx = np.nonzero(mask)[0]
        order = idx[np.lexsort((id_arr[idx], d[idx]))]
        return [(ids[i], float(d[i])) for i in order]
