"""Turns masked point sets into full 4D object entries.

An observation arrives pre-masked (segmentation and poses are trusted
inputs): a set of camera-frame points, the camera pose, a timestamp, and a
stable label the description provider may use. The spatial features are the
world-frame centroid and axis-aligned extent of the points; the temporal
record starts as the single instant of observation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import (
    EgoState,
    EmptyMaskError,
    ObjectEntry,
    ProviderError,
    Provenance,
    Revision,
    SemanticRecord,
    SpatialRecord,
    TemporalRecord,
    new_entry_id,
)


@dataclass
class CameraModel:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, data: dict) -> "CameraModel":
        return cls(fx=float(data["fx"]), fy=float(data["fy"]),
                   cx=float(data["cx"]), cy=float(data["cy"]),
                   width=int(data["width"]), height=int(data["height"]))


@dataclass
class MaskedObservation:
    """One segmented object at one instant, in the camera frame."""

    object_points: np.ndarray        # (N, 3) camera-frame points, meters
    mask_id: int
    timestamp: float
    camera_pose: EgoState            # world-from-camera transform
    label: str = ""                  # stable object label for mock providers

    def __post_init__(self):
        self.object_points = np.asarray(self.object_points, dtype=np.float64)
        if self.object_points.size == 0:
            # empty masks are structurally valid; they fail at build time
            self.object_points = self.object_points.reshape(0, 3)
        elif self.object_points.ndim != 2 or self.object_points.shape[1] != 3:
            raise ValueError("object_points must be an (N, 3) array")

    def to_dict(self) -> dict:
        return {
            "mask_id": self.mask_id,
            "timestamp": self.timestamp,
            "label": self.label,
            "points": [[float(c) for c in p] for p in self.object_points],
            "camera_pose": {
                "position": [float(c) for c in self.camera_pose.position],
                "orientation": [float(c) for c in self.camera_pose.orientation],
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MaskedObservation":
        pose = data["camera_pose"]
        return cls(
            object_points=np.asarray(data["points"], dtype=np.float64),
            mask_id=int(data["mask_id"]),
            timestamp=float(data["timestamp"]),
            camera_pose=EgoState(
                position=pose["position"],
                orientation=pose["orientation"],
                timestamp=float(data["timestamp"]),
            ),
            label=str(data.get("label", "")),
        )


class DescriptionProvider:
    """Produces a concise single-object description for an observation."""

    def describe(self, obs: MaskedObservation) -> str:
        raise NotImplementedError


@dataclass
class MockDescriptionProvider(DescriptionProvider):
    """Pure provider: a stable label always maps to the same sentence."""

    sentences: dict[str, str] = field(default_factory=dict)

    def describe(self, obs: MaskedObservation) -> str:
        if obs.label in self.sentences:
            return self.sentences[obs.label]
        return obs.label if obs.label else f"object {obs.mask_id}"


def project_points(points, cam: CameraModel) -> list[tuple[int, float, float]]:
    """Pinhole projection of camera-frame points into pixel coordinates.

    Returns (point index, u, v) for every point with positive depth whose
    pixel lands inside the image; everything else is silently omitted.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out: list[tuple[int, float, float]] = []
    for i, (x, y, z) in enumerate(pts):
        if z <= 0:
            continue
        u = cam.fx * x / z + cam.cx
        v = cam.fy * y / z + cam.cy
        if 0 <= u < cam.width and 0 <= v < cam.height:
            out.append((i, float(u), float(v)))
    return out


def compute_centroid(points) -> np.ndarray:
    """Arithmetic mean of the points, per axis."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyMaskError("cannot compute the centroid of zero points")
    return pts.mean(axis=0)


def compute_extent(points) -> np.ndarray:
    """Axis-aligned bounding-box size: max minus min per axis."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyMaskError("cannot compute the extent of zero points")
    return pts.max(axis=0) - pts.min(axis=0)


def build_entry(
    obs: MaskedObservation,
    provider: DescriptionProvider,
    embedder,
    agent_id: str = "agent-0",
    frame_id: str = "map",
    entry_id: str | None = None,
) -> ObjectEntry:
    """Assemble a fresh 4D entry from one masked observation.

    Points are moved into the world frame before the centroid/extent math,
    the temporal record is the single instant [timestamp, timestamp], and
    the description comes from the provider (failures carry the mask id so
    one bad mask never poisons the rest of a frame).
    """
    if obs.object_points.shape[0] == 0:
        raise EmptyMaskError(f"mask {obs.mask_id} has no points")
    rot = obs.camera_pose.rotation()
    world_pts = obs.object_points @ rot.T + obs.camera_pose.position
    centroid = compute_centroid(world_pts)
    extent = compute_extent(world_pts)
    try:
        description = provider.describe(obs)
    except Exception as exc:
        raise ProviderError(f"description failed for mask {obs.mask_id}: {exc}") from exc
    if not description:
        raise ProviderError(f"empty description for mask {obs.mask_id}")
    embedding = embedder.embed(description)
    t = float(obs.timestamp)
    return ObjectEntry(
        id=entry_id if entry_id is not None else new_entry_id(),
        sem=SemanticRecord(description=description, embedding=embedding),
        spa=SpatialRecord(centroid=centroid, extent=extent, frame_id=frame_id),
        tem=TemporalRecord(intervals=[(t, t)]),
        # One revision per observation folded in; the creation event is the first.
        provenance=Provenance(agent_id=agent_id,
                              revisions=[Revision(t, agent_id, "created")]),
    )


# ---------------------------------------------------------------------------
# Batch ingestion: JSONL with one header line followed by observation lines.
#
#   {"type": "header", "camera": {...}, "agent_id": "a1", "frame_id": "map"}
#   {"type": "observation", "mask_id": 0, "label": "checkpoint",
#    "timestamp": 17.0, "points": [[x, y, z], ...],
#    "camera_pose": {"position": [..3..], "orientation": [w, x, y, z]}}

@dataclass
class ObservationBatch:
    camera: CameraModel
    agent_id: str
    frame_id: str
    observations: list[MaskedObservation]


def read_observation_jsonl(lines) -> ObservationBatch:
    """Parse the batch format from an iterable of JSONL lines."""
    header = None
    observations: list[MaskedObservation] = []
    for lineno, raw in enumerate(lines, start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {lineno}: invalid JSON: {exc}") from exc
        kind = data.get("type")
        if kind == "header":
            if header is not None:
                raise ValueError(f"line {lineno}: duplicate header")
            header = data
        elif kind == "observation":
            if header is None:
                raise ValueError(f"line {lineno}: observation before header")
            observations.append(MaskedObservation.from_dict(data))
        else:
            raise ValueError(f"line {lineno}: unknown record type {kind!r}")
    if header is None:
        raise ValueError("missing header line")
    return ObservationBatch(
        camera=CameraModel.from_dict(header["camera"]),
        agent_id=str(header.get("agent_id", "agent-0")),
        frame_id=str(header.get("frame_id", "map")),
        observations=observations,
    )
