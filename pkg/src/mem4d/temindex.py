"""Interval store over temporal records: instant, overlap, and relative queries.

Intervals are closed and kept disjoint/sorted per entry. A new observation
within `delta_gap` seconds of an existing interval extends it instead of
opening a new one, so frame-rate jitter does not fragment an object's
presence into many slivers.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import (
    InvalidKeyError,
    NegativeOffsetError,
    UnknownEntryError,
    coalesce_intervals,
)


@dataclass
class TemporalKey:
    """One temporal constraint; build via the at/during/before/relative helpers."""

    mode: str
    t: float | None = None
    t0: float | None = None
    t1: float | None = None
    now: float | None = None
    offset: float | None = None

    @classmethod
    def at(cls, t: float) -> "TemporalKey":
        return cls(mode="at", t=float(t))

    @classmethod
    def during(cls, t0: float, t1: float) -> "TemporalKey":
        key = cls(mode="during", t0=float(t0), t1=float(t1))
        key.validate()
        return key

    @classmethod
    def last_seen_before(cls, t: float) -> "TemporalKey":
        return cls(mode="before", t=float(t))

    @classmethod
    def relative(cls, offset: float, now: float | None = None) -> "TemporalKey":
        # `now` may be bound later, at execution time.
        key = cls(mode="relative", offset=float(offset),
                  now=None if now is None else float(now))
        key.validate()
        return key

    def validate(self) -> None:
        if self.mode == "at" or self.mode == "before":
            if self.t is None:
                raise InvalidKeyError(f"{self.mode} key requires t")
        elif self.mode == "during":
            if self.t0 is None or self.t1 is None or self.t0 > self.t1:
                raise InvalidKeyError("during key requires t0 <= t1")
        elif self.mode == "relative":
            if self.offset is None or self.offset < 0:
                raise NegativeOffsetError("relative key requires offset >= 0")
        else:
            raise InvalidKeyError(f"unknown temporal key mode {self.mode!r}")

    def with_now(self, now: float | None) -> "TemporalKey":
        if self.mode != "relative" or now is None:
            return self
        return TemporalKey(mode="relative", offset=self.offset, now=float(now))


class TemporalIndex:
    """Per-entry sorted interval lists, mirrored from the entry store."""

    def __init__(self):
        self._intervals: dict[str, list[tuple[float, float]]] = {}

    def __len__(self) -> int:
        return len(self._intervals)

    def ids(self) -> set[str]:
        return set(self._intervals)

    def upsert(self, entry_id: str, intervals) -> None:
        self._intervals[entry_id] = [(float(a), float(b)) for a, b in intervals]

    def remove(self, entry_id: str) -> None:
        self._intervals.pop(entry_id, None)

    def intervals(self, entry_id: str) -> list[tuple[float, float]]:
        return list(self._intervals[entry_id])

    def items(self):
        return self._intervals.items()

    def latest_time(self) -> float | None:
        ends = [iv[-1][1] for iv in self._intervals.values() if iv]
        return max(ends) if ends else None


def resolve_relative(now: float, offset: float) -> float:
    """Instant `offset` seconds before `now`."""
    if offset < 0:
        raise NegativeOffsetError(f"offset must be >= 0, got {offset}")
    return float(now) - float(offset)


def record_observation(db, entry_id: str, t: float) -> None:
    """Fold one observation instant into an entry's temporal record.

    The resulting intervals always equal the gap-clustering of every
    timestamp ever recorded: the instant joins an existing interval when it
    lies within delta_gap of it (bridging two intervals if both qualify) and
    opens a fresh [t, t] interval otherwise. Repeats are no-ops.
    """
    t = float(t)
    with db.lock.write():
        entry = db.entries.get(entry_id)
        if entry is None:
            raise UnknownEntryError(f"no entry {entry_id!r}")
        merged = coalesce_intervals(entry.tem.intervals + [(t, t)], db.config.delta_gap)
        entry.tem.intervals = merged
        db.tem_index.upsert(entry_id, merged)


def add_interval(db, entry_id: str, interval, *, _locked: bool = False) -> None:
    """Union a whole closed interval into an entry's record, gap-coalesced."""
    a, b = float(interval[0]), float(interval[1])
    if b < a:
        raise InvalidKeyError(f"interval start {a} exceeds end {b}")

    def _apply():
        entry = db.entries.get(entry_id)
        if entry is None:
            raise UnknownEntryError(f"no entry {entry_id!r}")
        merged = coalesce_intervals(entry.tem.intervals + [(a, b)], db.config.delta_gap)
        entry.tem.intervals = merged
        db.tem_index.upsert(entry_id, merged)

    if _locked:
        _apply()
    else:
        with db.lock.write():
            _apply()


def temporal_search(db, key: TemporalKey):
    """(entry_id, matched interval) pairs sorted by entry id."""
    key.validate()
    if key.mode == "relative":
        if key.now is None:
            raise InvalidKeyError("relative key has no reference time bound")
        return temporal_search(db, TemporalKey.at(resolve_relative(key.now, key.offset)))

    out: list[tuple[str, tuple[float, float]]] = []
    with db.lock.read():
        for entry_id, intervals in db.tem_index.items():
            if not intervals:
                continue
            if key.mode == "at":
                hit = next(((a, b) for a, b in intervals if a <= key.t <= b), None)
            elif key.mode == "during":
                hit = next(
                    ((a, b) for a, b in intervals if a <= key.t1 and b >= key.t0), None
                )
            else:  # before: latest interval already over by key.t
                hit = intervals[-1] if intervals[-1][1] <= key.t else None
            if hit is not None:
                out.append((entry_id, hit))
    out.sort(key=lambda pair: pair[0])
    return out
