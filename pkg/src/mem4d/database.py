"""The knowledge database: entry store plus the three axis indexes.

A database owns one namespace and one map frame. All mutation goes through
the writer lock; the semantic, spatial, and temporal indexes are kept in
lockstep with the entry store, so the id sets of all four always agree.
"""

from __future__ import annotations

from typing import Callable

from .core import (
    DatabaseConfig,
    DimensionMismatchError,
    DuplicateEntryError,
    FrameMismatchError,
    ObjectEntry,
    RWLock,
    UnknownEntryError,
)
from .semindex import Embedder, MockEmbedder, SemanticIndex
from .spaindex import GridIndex
from .temindex import TemporalIndex


class KnowledgeDatabase:
    def __init__(
        self,
        config: DatabaseConfig,
        namespace: str = "default",
        frame_id: str = "map",
        embedder: Embedder | None = None,
    ):
        config.validate()
        if embedder is None:
            embedder = MockEmbedder(dim=config.dim)
        else:
            # Real providers fix the dimension at registration.
            config.dim = embedder.dimension()
            config.validate()
        self.config = config
        self.namespace = namespace
        self.frame_id = frame_id
        self.embedder = embedder
        self.entries: dict[str, ObjectEntry] = {}
        self.anchors = GridIndex(cell_size=config.epsilon_c)
        self.sem_index = SemanticIndex(dim=config.dim)
        self.tem_index = TemporalIndex()
        self.lock = RWLock()
        # Optional durability hook: called inside the write lock, in
        # application order, with (kind, payload) where payload is the entry
        # post-state for insert/update and a marker dict for merges.
        self.event_sink: Callable[[str, object], None] | None = None
        self.log = None               # EventLog when directory-backed
        self.snapshot_last_seq = 0    # last seq covered by the loaded snapshot

    def __len__(self) -> int:
        return len(self.entries)

    def emit(self, kind: str, payload) -> None:
        if self.event_sink is not None:
            self.event_sink(kind, payload)

    def get_entry(self, entry_id: str) -> ObjectEntry:
        with self.lock.read():
            entry = self.entries.get(entry_id)
            if entry is None:
                raise UnknownEntryError(f"no entry {entry_id!r}")
            return entry.clone()

    def insert_entry(self, entry: ObjectEntry, *, emit: bool = True) -> None:
        """Store a new entry and index it along all three axes."""
        with self.lock.write():
            if entry.id in self.entries:
                raise DuplicateEntryError(f"entry {entry.id!r} already exists")
            if entry.spa.frame_id != self.frame_id:
                raise FrameMismatchError(
                    f"entry frame {entry.spa.frame_id!r} != database frame "
                    f"{self.frame_id!r}"
                )
            self._index(entry)
            if emit:
                self.emit("insert", entry)

    def upsert_entry(self, entry: ObjectEntry) -> None:
        """Replace-or-insert without emitting events; used by replay and load."""
        with self.lock.write():
            self._index(entry)

    def _index(self, entry: ObjectEntry) -> None:
        # validate before mutating anything so a bad entry cannot leave the
        # store and the indexes disagreeing
        if entry.sem.embedding.shape != (self.config.dim,):
            raise DimensionMismatchError(
                f"entry embedding has shape {entry.sem.embedding.shape}, "
                f"database dimension is {self.config.dim}"
            )
        self.entries[entry.id] = entry
        self.sem_index.upsert(entry.id, entry.sem.embedding)
        self.anchors.insert(entry.id, entry.spa.centroid)
        self.tem_index.upsert(entry.id, entry.tem.intervals)

    def reindex_entry(self, entry_id: str) -> None:
        """Refresh every index from an entry mutated in place (writer only)."""
        entry = self.entries.get(entry_id)
        if entry is None:
            raise UnknownEntryError(f"no entry {entry_id!r}")
        self.sem_index.upsert(entry.id, entry.sem.embedding)
        self.anchors.insert(entry.id, entry.spa.centroid)
        self.tem_index.upsert(entry.id, entry.tem.intervals)

    def latest_time(self) -> float:
        """Most recent observation instant in the database (0.0 when empty)."""
        with self.lock.read():
            latest = self.tem_index.latest_time()
            return 0.0 if latest is None else latest

    def stats(self) -> dict:
        with self.lock.read():
            return {
                "namespace": self.namespace,
                "frame_id": self.frame_id,
                "entries": len(self.entries),
                "semantic_index": len(self.sem_index),
                "spatial_index": len(self.anchors),
                "temporal_index": len(self.tem_index),
            }

    def check_consistency(self) -> None:
        """Raise if any index id set disagrees with the entry store."""
        with self.lock.read():
            ids = set(self.entries)
            for name, got in (
                ("semantic", self.sem_index.ids()),
                ("spatial", self.anchors.ids()),
                ("temporal", self.tem_index.ids()),
            ):
                if got != ids:
                    raise AssertionError(
                        f"{name} index ids diverge from entry store: "
                        f"{sorted(got ^ ids)[:5]}"
                    )


def new_database(
    config: DatabaseConfig | None = None,
    namespace: str = "default",
    frame_id: str = "map",
    embedder: Embedder | None = None,
) -> KnowledgeDatabase:
    """Empty database with consistent empty indexes."""
    return KnowledgeDatabase(
        config=config if config is not None else DatabaseConfig(),
        namespace=namespace,
        frame_id=frame_id,
        embedder=embedder,
    )
