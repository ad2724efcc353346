"""Durable storage: an append-only event log plus full snapshots.

Log format: framed records of `>II` (payload length, CRC32) + JSON payload +
newline. The first record is a file header (version, namespace, frame,
config); every following record is one integration event carrying the
affected entry's post-state, so replay never needs the matcher. A torn tail
from a crash is truncated on reopen; a CRC mismatch on a complete record is
corruption and raises.

Snapshot format: gzip of one canonical JSON document with a version, the
database config, the id-sorted entry array, and a CRC32 checksum over the
canonical entry array. A snapshot doubles as the merge-exchange and CLI
export format.
"""

from __future__ import annotations

import gzip
import json
import os
import struct
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

from .core import (
    CorruptEventError,
    CorruptSnapshotError,
    DatabaseConfig,
    GapDetectedError,
    IoFailureError,
    canonical_json,
    entry_from_dict,
    entry_to_dict,
)
from .database import KnowledgeDatabase, new_database

LOG_MAGIC = "mem4d-log"
SNAPSHOT_MAGIC = "mem4d-snapshot"
FORMAT_VERSION = 1

_FRAME = struct.Struct(">II")
EVENT_KINDS = ("insert", "update", "merge_marker")


@dataclass
class LogEvent:
    seq: int
    kind: str
    payload: dict | None
    timestamp: float


def _encode_record(obj: dict) -> bytes:
    data = canonical_json(obj).encode("utf-8")
    return _FRAME.pack(len(data), zlib.crc32(data)) + data + b"\n"


class EventLog:
    """Append-only log of integration events with strictly increasing seqs."""

    def __init__(self, path, namespace: str = "default", frame_id: str = "map",
                 config: DatabaseConfig | None = None):
        self.path = Path(path)
        self._header: dict | None = None
        self._last_seq = 0
        if self.path.exists() and self.path.stat().st_size > 0:
            self._recover()
        else:
            cfg = config if config is not None else DatabaseConfig()
            cfg.validate()
            self._header = {
                "type": LOG_MAGIC,
                "version": FORMAT_VERSION,
                "namespace": namespace,
                "frame_id": frame_id,
                "config": cfg.to_dict(),
            }
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "wb") as fh:
                fh.write(_encode_record(self._header))
                fh.flush()
                os.fsync(fh.fileno())
        self._fh = open(self.path, "ab")

    # -- file scanning ------------------------------------------------------

    def _read_records(self, fh):
        """Yield (record dict, end offset); stop before a torn tail.

        A complete record with a bad CRC or malformed JSON is corruption.
        """
        while True:
            start = fh.tell()
            head = fh.read(_FRAME.size)
            if not head:
                return
            if len(head) < _FRAME.size:
                yield None, start  # torn tail
                return
            length, crc = _FRAME.unpack(head)
            body = fh.read(length + 1)
            if len(body) < length + 1:
                yield None, start
                return
            data, terminator = body[:length], body[length:]
            if zlib.crc32(data) != crc:
                raise CorruptEventError(f"CRC mismatch at offset {start}")
            if terminator != b"\n":
                raise CorruptEventError(f"missing record terminator at offset {start}")
            try:
                yield json.loads(data.decode("utf-8")), fh.tell()
            except ValueError as exc:
                raise CorruptEventError(f"bad JSON at offset {start}: {exc}") from exc

    def _recover(self):
        truncate_at = None
        with open(self.path, "rb") as fh:
            for record, offset in self._read_records(fh):
                if record is None:
                    truncate_at = offset
                    break
                if self._header is None:
                    if record.get("type") != LOG_MAGIC:
                        raise CorruptEventError("not an event log file")
                    self._header = record
                else:
                    self._last_seq = int(record["seq"])
        if self._header is None:
            raise CorruptEventError("log has no header record")
        if truncate_at is not None:
            with open(self.path, "r+b") as fh:
                fh.truncate(truncate_at)

    # -- public API ---------------------------------------------------------

    @property
    def last_seq(self) -> int:
        return self._last_seq

    @property
    def header(self) -> dict:
        return dict(self._header)

    def append(self, kind: str, payload: dict | None) -> int:
        """Write one event durably; returns its sequence number."""
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        if self._fh is None:
            raise IoFailureError("event log is closed")
        seq = self._last_seq + 1
        record = {"seq": seq, "kind": kind, "payload": payload,
                  "timestamp": time.time()}
        try:
            self._fh.write(_encode_record(record))
            self._fh.flush()
            os.fsync(self._fh.fileno())
        except OSError as exc:
            raise IoFailureError(f"append failed: {exc}") from exc
        self._last_seq = seq
        return seq

    def events(self, from_seq: int = 1):
        """Iterate LogEvents with seq >= from_seq, validating continuity."""
        expected = None
        with open(self.path, "rb") as fh:
            for record, offset in self._read_records(fh):
                if record is None:
                    return  # torn tail: nothing durable beyond here
                if record.get("type") == LOG_MAGIC:
                    continue
                seq = int(record["seq"])
                if expected is not None and seq != expected:
                    raise GapDetectedError(
                        f"expected seq {expected}, found {seq} at offset {offset}"
                    )
                expected = seq + 1
                if seq < from_seq:
                    continue
                kind = record.get("kind")
                if kind not in EVENT_KINDS:
                    raise CorruptEventError(f"unknown event kind {kind!r}")
                yield LogEvent(seq=seq, kind=kind, payload=record.get("payload"),
                               timestamp=float(record.get("timestamp", 0.0)))

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def attach_log(db: KnowledgeDatabase, log: EventLog) -> None:
    """Route the database's integration events into the log."""

    def sink(kind: str, payload) -> None:
        if kind in ("insert", "update"):
            log.append(kind, entry_to_dict(payload))
        else:
            log.append(kind, payload)

    db.event_sink = sink
    db.log = log


def replay(log: EventLog, from_seq: int = 1,
           into: KnowledgeDatabase | None = None,
           embedder=None) -> KnowledgeDatabase:
    """Rebuild database state by applying events in sequence order.

    Events carry post-state, so application is a plain upsert; two replays of
    the same log always produce canonically identical databases.
    """
    if into is None:
        header = log.header
        into = new_database(
            config=DatabaseConfig.from_dict(header.get("config", {})),
            namespace=str(header.get("namespace", "default")),
            frame_id=str(header.get("frame_id", "map")),
            embedder=embedder,
        )
    for event in log.events(from_seq=from_seq):
        if event.kind == "merge_marker":
            continue
        try:
            entry = entry_from_dict(event.payload)
        except ValueError as exc:
            raise CorruptEventError(f"event {event.seq}: {exc}") from exc
        into.upsert_entry(entry)
    return into


def _snapshot_doc(db: KnowledgeDatabase) -> dict:
    with db.lock.read():
        entries = [entry_to_dict(db.entries[i]) for i in sorted(db.entries)]
        return {
            "format": SNAPSHOT_MAGIC,
            "version": FORMAT_VERSION,
            "namespace": db.namespace,
            "frame_id": db.frame_id,
            "config": db.config.to_dict(),
            "last_seq": db.log.last_seq if db.log is not None else 0,
            "checksum": zlib.crc32(canonical_json(entries).encode("utf-8")),
            "entries": entries,
        }


def snapshot_bytes(db: KnowledgeDatabase) -> bytes:
    """In-memory snapshot in the exact on-disk format (for wire transfer)."""
    return gzip.compress(canonical_json(_snapshot_doc(db)).encode("utf-8"), mtime=0)


def snapshot(db: KnowledgeDatabase, path) -> dict:
    """Write a full consistent snapshot; returns its manifest."""
    path = Path(path)
    doc = _snapshot_doc(db)
    blob = gzip.compress(canonical_json(doc).encode("utf-8"), mtime=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailureError(f"snapshot write failed: {exc}") from exc
    return {
        "path": str(path),
        "entry_count": len(doc["entries"]),
        "checksum": doc["checksum"],
        "last_seq": doc["last_seq"],
        "namespace": doc["namespace"],
    }


def load_bytes(blob: bytes, embedder=None) -> KnowledgeDatabase:
    """Inverse of snapshot_bytes; validates version and checksum."""
    try:
        doc = json.loads(gzip.decompress(blob).decode("utf-8"))
    except (OSError, ValueError, EOFError) as exc:
        raise CorruptSnapshotError(f"unreadable snapshot: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != SNAPSHOT_MAGIC:
        raise CorruptSnapshotError("not a snapshot document")
    if doc.get("version") != FORMAT_VERSION:
        raise CorruptSnapshotError(f"unsupported version {doc.get('version')!r}")
    entries = doc.get("entries", [])
    checksum = zlib.crc32(canonical_json(entries).encode("utf-8"))
    if checksum != doc.get("checksum"):
        raise CorruptSnapshotError("checksum mismatch")
    db = new_database(
        config=DatabaseConfig.from_dict(doc.get("config", {})),
        namespace=str(doc.get("namespace", "default")),
        frame_id=str(doc.get("frame_id", "map")),
        embedder=embedder,
    )
    for raw in entries:
        try:
            db.upsert_entry(entry_from_dict(raw))
        except ValueError as exc:
            raise CorruptSnapshotError(str(exc)) from exc
    db.snapshot_last_seq = int(doc.get("last_seq", 0))
    return db


def load(path, embedder=None) -> KnowledgeDatabase:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoFailureError(f"cannot read snapshot: {exc}") from exc
    return load_bytes(blob, embedder=embedder)


# ---------------------------------------------------------------------------
# Directory layout used by the CLI: <dir>/events.log + <dir>/snapshot.bin.

LOG_NAME = "events.log"
SNAPSHOT_NAME = "snapshot.bin"


def open_directory(path, config: DatabaseConfig | None = None,
                   namespace: str = "default", frame_id: str = "map",
                   embedder=None) -> KnowledgeDatabase:
    """Open (or create) a durable database directory.

    Loads the newest snapshot if present, replays any log suffix past it,
    and attaches the log so future integrations are journaled. For an
    existing database the stored config wins over the one passed in.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    snap_path = root / SNAPSHOT_NAME
    log_path = root / LOG_NAME

    db: KnowledgeDatabase | None = None
    if snap_path.exists():
        db = load(snap_path, embedder=embedder)
    if log_path.exists() and log_path.stat().st_size > 0:
        log = EventLog(log_path)
        from_seq = db.snapshot_last_seq + 1 if db is not None else 1
        db = replay(log, from_seq=from_seq, into=db, embedder=embedder)
    else:
        if db is not None:
            log = EventLog(log_path, namespace=db.namespace, frame_id=db.frame_id,
                           config=db.config)
        else:
            log = EventLog(log_path, namespace=namespace, frame_id=frame_id,
                           config=config if config is not None else DatabaseConfig())
    if db is None:
        header = log.header
        db = new_database(
            config=DatabaseConfig.from_dict(header.get("config", {})),
            namespace=str(header.get("namespace", "default")),
            frame_id=str(header.get("frame_id", "map")),
            embedder=embedder,
        )
    attach_log(db, log)
    return db


def save_directory(db: KnowledgeDatabase, path) -> dict:
    """Snapshot a directory-backed database in place."""
    return snapshot(db, Path(path) / SNAPSHOT_NAME)
