"""Shared builders for randomized databases and entries."""

from __future__ import annotations

import numpy as np
import pytest

from mem4d import (
    DatabaseConfig,
    ObjectEntry,
    Provenance,
    Revision,
    SemanticRecord,
    SpatialRecord,
    TemporalRecord,
    new_database,
)

WORDS = [
    "red", "green", "blue", "white", "black", "yellow",
    "bus", "tree", "door", "table", "chair", "lamp", "crate", "sign",
    "cone", "barrel", "bench", "shelf", "bin", "cart",
    "tall", "small", "wooden", "metal", "plastic", "round", "open",
    "parked", "broken", "bright",
]


def random_description(rng: np.random.Generator) -> str:
    n = int(rng.integers(2, 5))
    return " ".join(rng.choice(WORDS, size=n, replace=True))


def random_intervals(rng: np.random.Generator, span: float = 1000.0):
    n = int(rng.integers(1, 4))
    out = []
    for _ in range(n):
        start = float(rng.uniform(0.0, span))
        out.append((start, start + float(rng.uniform(0.0, span / 20))))
    return out


def make_entry(embedder, description: str, centroid, intervals,
               agent: str = "agent-0", extent=(0.0, 0.0, 0.0),
               frame_id: str = "map", entry_id: str | None = None) -> ObjectEntry:
    from mem4d import new_entry_id

    tem = TemporalRecord(intervals=list(intervals))
    first = tem.intervals[0][0]
    return ObjectEntry(
        id=entry_id if entry_id is not None else new_entry_id(),
        sem=SemanticRecord(description=description,
                           embedding=embedder.embed(description)),
        spa=SpatialRecord(centroid=centroid, extent=extent, frame_id=frame_id),
        tem=tem,
        provenance=Provenance(agent_id=agent,
                              revisions=[Revision(first, agent, "created")]),
    )


def random_database(rng: np.random.Generator, n: int, dim: int = 32,
                    epsilon_c: float = 0.5, delta_s: float = 0.8,
                    delta_gap: float = 2.0, box: float = 50.0,
                    namespace: str = "default"):
    """Database of n random entries inserted directly (no match policy)."""
    db = new_database(
        DatabaseConfig(epsilon_c=epsilon_c, delta_s=delta_s,
                       delta_gap=delta_gap, dim=dim),
        namespace=namespace,
    )
    for i in range(n):
        entry = make_entry(
            db.embedder,
            random_description(rng),
            centroid=rng.uniform(-box, box, 3),
            intervals=random_intervals(rng),
            entry_id=f"{i:08d}" + rng.bytes(8).hex(),
        )
        db.insert_entry(entry)
    return db


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20260810)
