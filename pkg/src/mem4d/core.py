"""Domain types, identifiers, and conventions shared by every other module.

Conventions: right-handed coordinates in meters, time in seconds as float64,
quaternions in (w, x, y, z) order. An object entry is always fully 4D: it
carries a semantic record (description + unit embedding), a spatial record
(centroid/extent in a named map frame) and a temporal record (disjoint
observation intervals).
"""

from __future__ import annotations

import json
import math
import secrets
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

UNIT_NORM_TOL = 1e-6


# ---------------------------------------------------------------------------
# Errors. Every error carries a stable machine-readable code; the service
# layer surfaces these codes verbatim.

class Mem4DError(Exception):
    code = "internal"


class InvalidConfigError(Mem4DError):
    code = "invalid-config"


class EmptyMaskError(Mem4DError):
    code = "empty-mask"


class EmptyTextError(Mem4DError):
    code = "empty-text"


class ZeroVectorError(Mem4DError):
    code = "zero-vector"


class DimensionMismatchError(Mem4DError):
    code = "dimension-mismatch"


class UnknownEntryError(Mem4DError):
    code = "unknown-entry"


class DuplicateEntryError(Mem4DError):
    code = "duplicate-entry"


class InvalidKeyError(Mem4DError):
    code = "invalid-key"


class QuerySyntaxError(Mem4DError):
    code = "invalid-query"

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class MissingEgoError(Mem4DError):
    code = "missing-ego"


class NegativeOffsetError(Mem4DError):
    code = "negative-offset"


class ProviderError(Mem4DError):
    code = "provider-failure"


class DeciderError(Mem4DError):
    code = "decider-failure"


class ReasonerError(Mem4DError):
    code = "reasoner-failure"

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class DegenerateCorrespondencesError(Mem4DError):
    code = "degenerate-correspondences"


class FrameMismatchError(Mem4DError):
    code = "frame-mismatch"


class IoFailureError(Mem4DError):
    code = "io-failure"


class CorruptSnapshotError(Mem4DError):
    code = "corrupt-snapshot"


class CorruptEventError(Mem4DError):
    code = "corrupt-event"


class GapDetectedError(Mem4DError):
    code = "gap-detected"


class WriterBusyError(Mem4DError):
    code = "writer-busy"


# ---------------------------------------------------------------------------
# Identifiers and geometry helpers.

def new_entry_id() -> str:
    """128-bit random identifier, hex encoded (stable across revisions)."""
    return secrets.token_hex(16)


def as_vec3(value) -> np.ndarray:
    v = np.asarray(value, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {v.shape}")
    return v


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix for a (w, x, y, z) quaternion, normalized first."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if n == 0.0:
        raise ValueError("zero quaternion")
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a proper rotation matrix."""
    m = np.asarray(R, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# Records.

@dataclass
class SemanticRecord:
    """Natural-language description plus its unit-norm embedding."""

    description: str
    embedding: np.ndarray

    def __post_init__(self):
        if not self.description:
            raise ValueError("description must be non-empty")
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        norm = float(np.linalg.norm(self.embedding))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"embedding norm {norm} is not 1 within {UNIT_NORM_TOL}")

    def clone(self) -> "SemanticRecord":
        return SemanticRecord(self.description, self.embedding.copy())


@dataclass
class SpatialRecord:
    """World-frame centroid and axis-aligned extent, both in meters."""

    centroid: np.ndarray
    extent: np.ndarray
    frame_id: str = "map"

    def __post_init__(self):
        self.centroid = as_vec3(self.centroid)
        self.extent = as_vec3(self.extent)
        if not np.all(np.isfinite(self.centroid)):
            raise ValueError("centroid components must be finite")
        if np.any(self.extent < 0):
            raise ValueError("extent must be non-negative per axis")

    def clone(self) -> "SpatialRecord":
        return SpatialRecord(self.centroid.copy(), self.extent.copy(), self.frame_id)


def normalize_intervals(intervals) -> list[tuple[float, float]]:
    """Sort closed intervals and merge overlapping or touching ones.

    Preserves the covered point set exactly; used whenever records are
    constructed or unioned.
    """
    cleaned = []
    for pair in intervals:
        t0, t1 = float(pair[0]), float(pair[1])
        if t1 < t0:
            raise ValueError(f"interval start {t0} exceeds end {t1}")
        cleaned.append((t0, t1))
    cleaned.sort()
    merged: list[tuple[float, float]] = []
    for t0, t1 in cleaned:
        if merged and t0 <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], t1))
        else:
            merged.append((t0, t1))
    return merged


def coalesce_intervals(intervals, gap: float) -> list[tuple[float, float]]:
    """Like normalize_intervals but also bridges gaps of at most `gap` seconds."""
    merged: list[tuple[float, float]] = []
    for t0, t1 in normalize_intervals(intervals):
        if merged and t0 - merged[-1][1] <= gap:
            merged[-1] = (merged[-1][0], max(merged[-1][1], t1))
        else:
            merged.append((t0, t1))
    return merged


@dataclass
class TemporalRecord:
    """Disjoint, ascending closed observation intervals in seconds."""

    intervals: list[tuple[float, float]]

    def __post_init__(self):
        self.intervals = normalize_intervals(self.intervals)

    def clone(self) -> "TemporalRecord":
        return TemporalRecord(list(self.intervals))

    def covers(self, t: float) -> bool:
        return any(t0 <= t <= t1 for t0, t1 in self.intervals)

    def overlaps(self, t0: float, t1: float) -> bool:
        return any(a <= t1 and b >= t0 for a, b in self.intervals)

    def first_overlap(self, t0: float, t1: float) -> tuple[float, float] | None:
        for a, b in self.intervals:
            if a <= t1 and b >= t0:
                return (a, b)
        return None

    def latest(self) -> tuple[float, float]:
        return self.intervals[-1]


@dataclass
class EgoState:
    """Agent (or camera) pose: position, world-from-ego quaternion, timestamp."""

    position: np.ndarray
    orientation: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.position = as_vec3(self.position)
        self.orientation = np.asarray(self.orientation, dtype=np.float64)
        if self.orientation.shape != (4,):
            raise ValueError("orientation must be a (w, x, y, z) quaternion")
        norm = float(np.linalg.norm(self.orientation))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"quaternion norm {norm} is not 1 within {UNIT_NORM_TOL}")
        self.timestamp = float(self.timestamp)

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)


@dataclass
class Revision:
    timestamp: float
    agent_id: str
    summary: str


@dataclass
class Provenance:
    """Originating agent plus the ordered history of integration events.

    Each revision records one observation folded into the entry, so the
    revision count doubles as the entry's observation count.
    """

    agent_id: str
    revisions: list[Revision] = field(default_factory=list)

    def __post_init__(self):
        last = -math.inf
        for rev in self.revisions:
            if rev.timestamp <= last:
                raise ValueError("revision timestamps must be strictly increasing")
            last = rev.timestamp

    def agents(self) -> set[str]:
        return {self.agent_id} | {r.agent_id for r in self.revisions}

    def observation_count(self) -> int:
        return max(1, len(self.revisions))

    def append(self, timestamp: float, agent_id: str, summary: str) -> None:
        # Keep timestamps strictly increasing even when older data arrives
        # (e.g. merging an entry recorded before the last local revision).
        if self.revisions and timestamp <= self.revisions[-1].timestamp:
            timestamp = math.nextafter(self.revisions[-1].timestamp, math.inf)
        self.revisions.append(Revision(timestamp, agent_id, summary))

    def clone(self) -> "Provenance":
        return Provenance(
            self.agent_id,
            [Revision(r.timestamp, r.agent_id, r.summary) for r in self.revisions],
        )


@dataclass
class ObjectEntry:
    """One object's full 4D record."""

    id: str
    sem: SemanticRecord
    spa: SpatialRecord
    tem: TemporalRecord
    provenance: Provenance

    def clone(self) -> "ObjectEntry":
        return ObjectEntry(
            self.id,
            self.sem.clone(),
            self.spa.clone(),
            self.tem.clone(),
            self.provenance.clone(),
        )


# ---------------------------------------------------------------------------
# Canonical JSON encoding. This is the unit of persistence, wire transfer and
# context serialization; two entries are equal iff their canonical strings are.

def entry_to_dict(entry: ObjectEntry) -> dict:
    return {
        "id": entry.id,
        "sem": {
            "description": entry.sem.description,
            "embedding": [float(x) for x in entry.sem.embedding],
        },
        "spa": {
            "centroid": [float(x) for x in entry.spa.centroid],
            "extent": [float(x) for x in entry.spa.extent],
            "frame_id": entry.spa.frame_id,
        },
        "tem": {"intervals": [[a, b] for a, b in entry.tem.intervals]},
        "provenance": {
            "agent_id": entry.provenance.agent_id,
            "revisions": [
                {"timestamp": r.timestamp, "agent_id": r.agent_id, "summary": r.summary}
                for r in entry.provenance.revisions
            ],
        },
    }


def entry_from_dict(data: dict) -> ObjectEntry:
    try:
        return ObjectEntry(
            id=str(data["id"]),
            sem=SemanticRecord(
                description=data["sem"]["description"],
                embedding=np.asarray(data["sem"]["embedding"], dtype=np.float64),
            ),
            spa=SpatialRecord(
                centroid=data["spa"]["centroid"],
                extent=data["spa"]["extent"],
                frame_id=data["spa"]["frame_id"],
            ),
            tem=TemporalRecord(intervals=[tuple(p) for p in data["tem"]["intervals"]]),
            provenance=Provenance(
                agent_id=data["provenance"]["agent_id"],
                revisions=[
                    Revision(float(r["timestamp"]), str(r["agent_id"]), str(r["summary"]))
                    for r in data["provenance"]["revisions"]
                ],
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed entry encoding: {exc}") from exc


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace, round-trip floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def entry_canonical(entry: ObjectEntry) -> str:
    return canonical_json(entry_to_dict(entry))


def entries_equal(a: ObjectEntry, b: ObjectEntry) -> bool:
    return entry_canonical(a) == entry_canonical(b)


# ---------------------------------------------------------------------------
# Configuration.

@dataclass
class DatabaseConfig:
    """Integration thresholds and embedding dimension for one database."""

    epsilon_c: float = 0.5   # spatial match threshold, meters
    delta_s: float = 0.8     # semantic match threshold, cosine similarity
    delta_gap: float = 2.0   # max gap that still extends an interval, seconds
    dim: int = 256           # embedding dimension

    def validate(self) -> None:
        if not (self.epsilon_c > 0):
            raise InvalidConfigError(f"epsilon_c must be > 0, got {self.epsilon_c}")
        if not (0 < self.delta_s <= 1):
            raise InvalidConfigError(f"delta_s must be in (0, 1], got {self.delta_s}")
        if self.delta_gap < 0:
            raise InvalidConfigError(f"delta_gap must be >= 0, got {self.delta_gap}")
        if int(self.dim) < 2:
            raise InvalidConfigError(f"dim must be >= 2, got {self.dim}")
        self.dim = int(self.dim)

    def to_dict(self) -> dict:
        return {
            "epsilon_c": self.epsilon_c,
            "delta_s": self.delta_s,
            "delta_gap": self.delta_gap,
            "dim": self.dim,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatabaseConfig":
        cfg = cls(
            epsilon_c=float(data.get("epsilon_c", 0.5)),
            delta_s=float(data.get("delta_s", 0.8)),
            delta_gap=float(data.get("delta_gap", 2.0)),
            dim=int(data.get("dim", 256)),
        )
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# Readers-writer lock: many concurrent readers, one writer per database.
# Read acquisition is reentrant per thread, and the writing thread may read;
# readers never observe a half-applied mutation.

class RWLock:
    def __init__(self):
        self._cond = threading.Condition()
        self._readers: dict[int, int] = {}
        self._writer: int | None = None
        self._writer_depth = 0
        self._waiting_writers = 0

    @contextmanager
    def read(self):
        me = threading.get_ident()
        with self._cond:
            if self._writer == me:
                passthrough = True  # the writing thread may read its own state
            else:
                passthrough = False
                if me in self._readers:
                    self._readers[me] += 1
                else:
                    while self._writer is not None or self._waiting_writers > 0:
                        self._cond.wait()
                    self._readers[me] = 1
        try:
            yield
        finally:
            if not passthrough:
                with self._cond:
                    self._readers[me] -= 1
                    if self._readers[me] == 0:
                        del self._readers[me]
                        self._cond.notify_all()

    @contextmanager
    def write(self, timeout: float | None = None):
        me = threading.get_ident()
        with self._cond:
            if self._writer == me:
                self._writer_depth += 1
                acquired_here = False
            else:
                if me in self._readers:
                    raise RuntimeError("cannot upgrade a read lock to a write lock")
                deadline = None if timeout is None else time.monotonic() + timeout
                self._waiting_writers += 1
                try:
                    while self._writer is not None or self._readers:
                        remaining = None
                        if deadline is not None:
                            remaining = deadline - time.monotonic()
                            if remaining <= 0:
                                raise WriterBusyError("another writer holds the database")
                        self._cond.wait(timeout=remaining)
                finally:
                    self._waiting_writers -= 1
                self._writer = me
                self._writer_depth = 1
                acquired_here = True
        try:
            yield
        finally:
            with self._cond:
                if acquired_here:
                    self._writer = None
                    self._writer_depth = 0
                    self._cond.notify_all()
                else:
                    self._writer_depth -= 1
