"""Multi-agent map fusion: rigid frame alignment and database merging.

Agents exchange database snapshots. A rigid transform (least-squares over
anchor correspondences, rotation + translation, no scale) maps the source
frame into the destination frame; every source entry is then folded into the
destination through the regular match-based integration, so shared objects
deduplicate and foreign knowledge is inherited.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    DegenerateCorrespondencesError,
    FrameMismatchError,
    ObjectEntry,
    as_vec3,
    matrix_to_quat,
    quat_to_matrix,
)
from .matcher import MatchDecider, MatchDecision, integrate


@dataclass
class FrameTransform:
    """Rigid transform taking points in `from_frame` to `to_frame`."""

    rotation: np.ndarray      # unit quaternion (w, x, y, z)
    translation: np.ndarray   # meters
    from_frame: str
    to_frame: str
    rms: float = 0.0          # residual of the alignment that produced it

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        norm = float(np.linalg.norm(self.rotation))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {norm} is not 1 within 1e-6")
        self.translation = as_vec3(self.translation)

    @classmethod
    def identity(cls, from_frame: str, to_frame: str) -> "FrameTransform":
        return cls(rotation=np.array([1.0, 0.0, 0.0, 0.0]),
                   translation=np.zeros(3), from_frame=from_frame,
                   to_frame=to_frame)

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, point) -> np.ndarray:
        return self.matrix() @ as_vec3(point) + self.translation

    def to_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation],
            "translation": [float(x) for x in self.translation],
            "from_frame": self.from_frame,
            "to_frame": self.to_frame,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FrameTransform":
        return cls(
            rotation=np.asarray(data["rotation"], dtype=np.float64),
            translation=np.asarray(data["translation"], dtype=np.float64),
            from_frame=str(data["from_frame"]),
            to_frame=str(data["to_frame"]),
        )


def align_frames(correspondences, from_frame: str = "src",
                 to_frame: str = "dst") -> FrameTransform:
    """Least-squares rigid alignment from point correspondences (a_i -> b_i).

    Classic SVD solution: rotate about the centroids, fix the determinant
    sign, recover translation. Needs at least three non-collinear pairs;
    the residual RMS is reported on the returned transform.
    """
    pairs = list(correspondences)
    if len(pairs) < 3:
        raise DegenerateCorrespondencesError(
            f"need at least 3 correspondences, got {len(pairs)}"
        )
    a = np.asarray([as_vec3(p[0]) for p in pairs], dtype=np.float64)
    b = np.asarray([as_vec3(p[1]) for p in pairs], dtype=np.float64)

    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    a0 = a - ca
    b0 = b - cb

    # Collinear (or coincident) source points leave the rotation about the
    # line unconstrained.
    svals = np.linalg.svd(a0, compute_uv=False)
    if svals[1] <= 1e-8 * max(svals[0], 1e-12):
        raise DegenerateCorrespondencesError("correspondences are collinear")

    h = a0.T @ b0
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = cb - rot @ ca

    residuals = (a @ rot.T + trans) - b
    rms = float(np.sqrt(np.mean(np.sum(residuals * residuals, axis=1))))
    return FrameTransform(rotation=matrix_to_quat(rot), translation=trans,
                          from_frame=from_frame, to_frame=to_frame, rms=rms)


@dataclass
class MergeReport:
    entries_examined: int = 0
    entries_updated: int = 0
    entries_inserted: int = 0
    decisions: list[MatchDecision] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "entries_examined": self.entries_examined,
            "entries_updated": self.entries_updated,
            "entries_inserted": self.entries_inserted,
            "decisions": [d.to_dict() for d in self.decisions],
        }


def _transformed_entry(entry: ObjectEntry, transform: FrameTransform) -> ObjectEntry:
    out = entry.clone()
    rot = transform.matrix()
    out.spa.centroid = transform.apply(entry.spa.centroid)
    # Axis-aligned extent of the rotated box: |R| maps half-sizes exactly.
    out.spa.extent = np.abs(rot) @ entry.spa.extent
    out.spa.frame_id = transform.to_frame
    return out


def merge(dst, src, transform: FrameTransform,
          decider: MatchDecider | None = None) -> MergeReport:
    """Fold every source entry into the destination database.

    Entries are processed in ascending id order, centroids (and extents)
    mapped through the transform, then integrated with the usual match
    policy; temporal intervals union in and provenance keeps the originating
    agent. Readers of dst see pre-merge or post-merge state, never between.
    """
    if transform.from_frame != src.frame_id:
        raise FrameMismatchError(
            f"transform maps from {transform.from_frame!r} but source frame is "
            f"{src.frame_id!r}"
        )
    if transform.to_frame != dst.frame_id:
        raise FrameMismatchError(
            f"transform maps to {transform.to_frame!r} but destination frame is "
            f"{dst.frame_id!r}"
        )

    report = MergeReport()
    with dst.lock.write():
        if src is dst:
            source_entries = [e.clone() for _, e in sorted(src.entries.items())]
        else:
            with src.lock.read():
                source_entries = [e.clone() for _, e in sorted(src.entries.items())]
        dst.emit("merge_marker", {"src_namespace": src.namespace,
                                  "src_frame": src.frame_id,
                                  "entry_count": len(source_entries)})
        for entry in source_entries:
            candidate = _transformed_entry(entry, transform)
            decision = integrate(dst, candidate, decider=decider)
            report.entries_examined += 1
            if decision.action == "update":
                report.entries_updated += 1
            else:
                report.entries_inserted += 1
            report.decisions.append(decision)
    return report
