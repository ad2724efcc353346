"""HTTP/JSON API over the database: ingestion, integration, query, the answer
loop, merging, export, and stats.

The service is a thin shell: every endpoint calls the same library functions
a local caller would, with errors mapped to stable codes in an ApiError body.
Handlers touching a database run in the threadpool, so readers proceed
concurrently while the per-namespace writer lock serializes mutation.
"""

from __future__ import annotations

import io
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse
from starlette.concurrency import run_in_threadpool

from .collab import FrameTransform, merge
from .core import (
    DatabaseConfig,
    EgoState,
    EmptyMaskError,
    Mem4DError,
    ProviderError,
    ReasonerError,
    entry_from_dict,
    entry_to_dict,
)
from .database import KnowledgeDatabase, new_database
from .featuregen import MockDescriptionProvider, build_entry, read_observation_jsonl
from .loopdriver import HttpReasoner, ReasonerReply, ScriptedReasoner, answer
from .matcher import integrate
from .persistence import load_bytes, open_directory, snapshot_bytes
from .query import execute, keys_from_dict, parse_query
from .semindex import MockEmbedder

MAX_UPLOAD_BYTES = 64 * 1024 * 1024
MERGE_LOCK_TIMEOUT = 60.0

_STATUS_BY_CODE = {
    "unknown-entry": 404,
    "writer-busy": 409,
    "internal": 500,
    "io-failure": 500,
    "reasoner-failure": 500,
}


def _api_error(code: str, message: str, detail=None, status: int | None = None):
    return JSONResponse(
        status_code=status if status is not None else _STATUS_BY_CODE.get(code, 400),
        content={"code": code, "message": message, "detail": detail},
    )


@dataclass
class NamespaceStore:
    """Lazily creates one database per namespace, optionally directory-backed."""

    config: DatabaseConfig = field(default_factory=DatabaseConfig)
    data_dir: Path | None = None
    embedder_factory: object = None
    provider: object = field(default_factory=MockDescriptionProvider)
    _dbs: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def _make_embedder(self):
        if self.embedder_factory is not None:
            return self.embedder_factory()
        return MockEmbedder(dim=self.config.dim)

    def get(self, namespace: str) -> KnowledgeDatabase:
        with self._lock:
            db = self._dbs.get(namespace)
            if db is None:
                if self.data_dir is not None:
                    db = open_directory(
                        Path(self.data_dir) / namespace,
                        config=DatabaseConfig(**self.config.to_dict()),
                        namespace=namespace,
                        embedder=self._make_embedder(),
                    )
                else:
                    db = new_database(
                        config=DatabaseConfig(**self.config.to_dict()),
                        namespace=namespace,
                        embedder=self._make_embedder(),
                    )
                self._dbs[namespace] = db
            return db

    def put(self, namespace: str, db: KnowledgeDatabase) -> None:
        with self._lock:
            self._dbs[namespace] = db


def _parse_ego(data) -> EgoState | None:
    if data is None:
        return None
    return EgoState(
        position=data["position"],
        orientation=data["orientation"],
        timestamp=float(data.get("timestamp", 0.0)),
    )


def _record_to_dict(record) -> dict:
    return {
        "entry": entry_to_dict(record.entry),
        "scores": {
            k: (bool(v) if isinstance(v, bool) else float(v))
            for k, v in record.scores.items()
        },
        "fused_score": record.fused_score,
    }


def create_app(store: NamespaceStore | None = None,
               auth_token: str | None = None) -> FastAPI:
    store = store if store is not None else NamespaceStore()
    app = FastAPI(title="mem4d", version="1")
    app.state.store = store

    @app.middleware("http")
    async def _auth(request: Request, call_next):
        if auth_token is not None:
            supplied = request.headers.get("authorization", "")
            if supplied != f"Bearer {auth_token}":
                return _api_error("unauthorized", "missing or bad bearer token",
                                  status=401)
        return await call_next(request)

    @app.exception_handler(Mem4DError)
    async def _mem4d_error(request: Request, exc: Mem4DError):
        detail = None
        if hasattr(exc, "position"):
            detail = {"position": exc.position}
        return _api_error(exc.code, str(exc), detail)

    @app.exception_handler(ValueError)
    async def _value_error(request: Request, exc: ValueError):
        return _api_error("invalid-request", str(exc))

    def _db(request: Request) -> KnowledgeDatabase:
        return store.get(request.query_params.get("namespace", "default"))

    # -- ingestion ----------------------------------------------------------

    @app.post("/v1/observations")
    async def post_observations(request: Request):
        raw = await request.body()
        if len(raw) > MAX_UPLOAD_BYTES:
            return _api_error("payload-too-large",
                              f"body exceeds {MAX_UPLOAD_BYTES} bytes")
        db = _db(request)

        def work():
            batch = read_observation_jsonl(io.StringIO(raw.decode("utf-8")))
            results = []
            for obs in batch.observations:
                # one bad mask must not poison the rest of the batch
                try:
                    entry = build_entry(obs, store.provider, db.embedder,
                                        agent_id=batch.agent_id,
                                        frame_id=batch.frame_id)
                except (ProviderError, EmptyMaskError) as exc:
                    results.append({"mask_id": obs.mask_id, "action": "error",
                                    "error": {"code": exc.code,
                                              "message": str(exc)}})
                    continue
                decision = integrate(db, entry)
                results.append(decision.to_dict())
            return {"count": len(results), "results": results}

        return await run_in_threadpool(work)

    @app.post("/v1/entries")
    async def post_entry(request: Request):
        body = await request.json()
        db = _db(request)

        def work():
            entry = entry_from_dict(body)
            decision = integrate(db, entry)
            return decision.to_dict()

        return await run_in_threadpool(work)

    @app.get("/v1/entries/{entry_id}")
    async def get_entry(entry_id: str, request: Request):
        db = _db(request)
        entry = await run_in_threadpool(db.get_entry, entry_id)
        return entry_to_dict(entry)

    # -- retrieval ----------------------------------------------------------

    @app.post("/v1/query")
    async def post_query(request: Request):
        body = await request.json()
        db = _db(request)

        def work():
            if "dsl" in body:
                keys = parse_query(body["dsl"])
                if "limit" in body:
                    keys.limit = int(body["limit"])
            else:
                keys = keys_from_dict(body)
            ego = _parse_ego(body.get("ego"))
            now = body.get("now")
            records = execute(db, keys, ego=ego,
                              now=None if now is None else float(now))
            return {"records": [_record_to_dict(r) for r in records]}

        return await run_in_threadpool(work)

    @app.post("/v1/answer")
    async def post_answer(request: Request):
        body = await request.json()
        db = _db(request)

        def work():
            question = body.get("question", "")
            spec = body.get("reasoner", {})
            if "scripted" in spec:
                reasoner = ScriptedReasoner(
                    [ReasonerReply.from_dict(r) for r in spec["scripted"]]
                )
            elif "url" in spec:
                reasoner = HttpReasoner(
                    spec["url"],
                    timeout=float(spec.get("timeout", 60.0)),
                    retries=int(spec.get("retries", 1)),
                )
            else:
                raise ValueError("reasoner must carry 'url' or 'scripted'")
            try:
                text, trace = answer(
                    db,
                    question,
                    reasoner,
                    live_context=body.get("live_context"),
                    ego=_parse_ego(body.get("ego")),
                    max_iterations=int(body.get("max_iterations", 5)),
                    now=None if body.get("now") is None else float(body["now"]),
                )
            except ReasonerError as exc:
                payload = {"code": exc.code, "message": str(exc),
                           "detail": None if exc.trace is None else exc.trace.to_dict()}
                return JSONResponse(status_code=500, content=payload)
            return {"answer": text, "trace": trace.to_dict()}

        return await run_in_threadpool(work)

    # -- collaboration ------------------------------------------------------

    @app.post("/v1/merge")
    async def post_merge(request: Request):
        raw = await request.body()
        if len(raw) > MAX_UPLOAD_BYTES:
            return _api_error("payload-too-large",
                              f"body exceeds {MAX_UPLOAD_BYTES} bytes")
        header = request.headers.get("x-frame-transform")
        if header is None:
            return _api_error("invalid-request",
                              "missing X-Frame-Transform header")
        db = _db(request)

        def work():
            transform = FrameTransform.from_dict(json.loads(header))
            src = load_bytes(raw)
            with db.lock.write(timeout=MERGE_LOCK_TIMEOUT):
                report = merge(db, src, transform)
            return report.to_dict()

        return await run_in_threadpool(work)

    # -- export / stats -----------------------------------------------------

    @app.get("/v1/export")
    async def get_export(request: Request):
        db = _db(request)
        blob = await run_in_threadpool(snapshot_bytes, db)

        def chunks(step: int = 1 << 20):
            for i in range(0, len(blob), step):
                yield blob[i : i + step]

        return StreamingResponse(chunks(), media_type="application/octet-stream")

    @app.get("/v1/stats")
    async def get_stats(request: Request):
        db = _db(request)
        return await run_in_threadpool(db.stats)

    return app


def serve(bind: str = "127.0.0.1:8640", store: NamespaceStore | None = None,
          auth_token: str | None = None) -> None:
    """Run the service until interrupted."""
    import uvicorn

    host, _, port = bind.rpartition(":")
    app = create_app(store=store, auth_token=auth_token)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="warning")
