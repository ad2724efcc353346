"""Operator command line.

Subcommands: ingest, query, answer, merge, serve, export, stats, report.
Configuration precedence is flags > MEM4D_* environment variables > config
file > defaults. Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .collab import FrameTransform, merge
from .core import (
    DatabaseConfig,
    EgoState,
    Mem4DError,
    canonical_json,
    entry_to_dict,
)
from .featuregen import MockDescriptionProvider, build_entry, read_observation_jsonl
from .loopdriver import HttpReasoner, ReasonerReply, ScriptedReasoner, answer
from .matcher import integrate
from .persistence import load, open_directory, snapshot
from .query import execute, parse_query
from .report import write_report
from .semindex import HttpEmbedder, MockEmbedder
from .service import NamespaceStore, serve

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

_RUNTIME_CODES = {
    "internal", "io-failure", "corrupt-snapshot", "corrupt-event",
    "gap-detected", "writer-busy", "reasoner-failure", "provider-failure",
}

ENV_PREFIX = "MEM4D_"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage by default; the contract here is 1.
    def error(self, message):
        raise _UsageError(message)


def _env(name: str) -> str | None:
    return os.environ.get(ENV_PREFIX + name)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        path = _env("CONFIG")
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _resolve(flag, env_name: str, file_cfg: dict, file_key: str, default,
             cast=None):
    value = flag
    if value is None:
        value = _env(env_name)
    if value is None:
        value = file_cfg.get(file_key)
    if value is None:
        value = default
    if cast is not None and value is not None:
        value = cast(value)
    return value


def _make_embedder(spec: str, dim: int):
    if spec.startswith(("http://", "https://")):
        return HttpEmbedder(spec)
    if spec == "mock":
        return MockEmbedder(dim=dim)
    if spec.startswith("mock:"):
        return MockEmbedder(dim=dim, seed=int(spec.split(":", 1)[1]))
    raise ValueError(f"unknown embedder spec {spec!r} (use mock, mock:SEED, or a URL)")


def _parse_ego(text: str | None, now: float | None) -> EgoState | None:
    if text is None:
        return None
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 7:
        raise ValueError("--ego expects x,y,z,qw,qx,qy,qz")
    return EgoState(position=parts[:3], orientation=parts[3:],
                    timestamp=0.0 if now is None else now)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mem4d", description=__doc__)
    parser.add_argument("--db", help="database directory (MEM4D_DB)")
    parser.add_argument("--config", help="JSON config file (MEM4D_CONFIG)")
    parser.add_argument("--epsilon-c", type=float, help="spatial match threshold, m")
    parser.add_argument("--delta-s", type=float, help="semantic match threshold")
    parser.add_argument("--delta-gap", type=float, help="interval merge gap, s")
    parser.add_argument("--dim", type=int, help="embedding dimension")
    parser.add_argument("--embedder", help="mock | mock:SEED | http(s)://...")
    parser.add_argument("--namespace", help="database namespace")
    parser.add_argument("--json", action="store_true", dest="as_json",
                        help="machine-readable JSON output")

    sub = parser.add_subparsers(dest="command", required=True)

    def add_parser(name, **kwargs):
        p = sub.add_parser(name, **kwargs)
        # accepted before or after the subcommand
        p.add_argument("--json", action="store_true", dest="as_json",
                       default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        return p

    p = add_parser("ingest", help="ingest an observation JSONL file")
    p.add_argument("path")

    p = add_parser("query", help="run a DSL query")
    p.add_argument("dsl")
    p.add_argument("--ego", help="x,y,z,qw,qx,qy,qz")
    p.add_argument("--now", type=float, help="reference time for ago()")
    p.add_argument("--limit", type=int)

    p = add_parser("answer", help="run the retrieval-reasoning loop")
    p.add_argument("question")
    p.add_argument("--reasoner", help="reasoner endpoint URL (MEM4D_REASONER)")
    p.add_argument("--scripted", help="JSON file with scripted reasoner replies")
    p.add_argument("--live-context")
    p.add_argument("--max-iterations", type=int, default=5)
    p.add_argument("--ego", help="x,y,z,qw,qx,qy,qz")
    p.add_argument("--now", type=float)

    p = add_parser("merge", help="merge a snapshot file into the database")
    p.add_argument("snapshot")
    p.add_argument("--transform", required=True,
                   help="frame transform JSON (inline or @file)")

    p = add_parser("serve", help="run the HTTP service")
    p.add_argument("--bind", default="127.0.0.1:8640")
    p.add_argument("--data-dir", help="directory holding one subdir per namespace")
    p.add_argument("--auth-token")

    p = add_parser("export", help="write a snapshot file")
    p.add_argument("path")

    add_parser("stats", help="print index counts")

    p = add_parser("report", help="write entries.csv and figures")
    p.add_argument("outdir")

    return parser


def _open_db(args, file_cfg: dict):
    db_path = _resolve(args.db, "DB", file_cfg, "db", "./mem4d-db")
    config = DatabaseConfig(
        epsilon_c=_resolve(args.epsilon_c, "EPSILON_C", file_cfg, "epsilon_c", 0.5, float),
        delta_s=_resolve(args.delta_s, "DELTA_S", file_cfg, "delta_s", 0.8, float),
        delta_gap=_resolve(args.delta_gap, "DELTA_GAP", file_cfg, "delta_gap", 2.0, float),
        dim=_resolve(args.dim, "DIM", file_cfg, "dim", 256, int),
    )
    config.validate()
    embedder_spec = _resolve(args.embedder, "EMBEDDER", file_cfg, "embedder", "mock")
    namespace = _resolve(args.namespace, "NAMESPACE", file_cfg, "namespace", "default")
    embedder = _make_embedder(embedder_spec, config.dim)
    return open_directory(db_path, config=config, namespace=namespace,
                          embedder=embedder), db_path


def _emit(args, payload: dict, human: str) -> None:
    if args.as_json:
        print(canonical_json(payload))
    else:
        print(human)


def _cmd_ingest(args, file_cfg) -> int:
    from .core import EmptyMaskError, ProviderError

    db, _ = _open_db(args, file_cfg)
    with open(args.path) as fh:
        batch = read_observation_jsonl(fh)
    provider = MockDescriptionProvider()
    inserted = updated = 0
    errors = []
    for obs in batch.observations:
        # a failed mask is reported but never aborts the batch
        try:
            entry = build_entry(obs, provider, db.embedder,
                                agent_id=batch.agent_id, frame_id=batch.frame_id)
        except (ProviderError, EmptyMaskError) as exc:
            errors.append({"mask_id": obs.mask_id, "code": exc.code,
                           "message": str(exc)})
            continue
        decision = integrate(db, entry)
        if decision.action == "insert":
            inserted += 1
        else:
            updated += 1
    _emit(args, {"observations": len(batch.observations),
                 "inserted": inserted, "updated": updated,
                 "errors": errors, "entries": len(db)},
          f"ingested {len(batch.observations)} observations: "
          f"{inserted} inserted, {updated} updated, {len(errors)} failed "
          f"({len(db)} entries total)")
    return EXIT_OK


def _cmd_query(args, file_cfg) -> int:
    db, _ = _open_db(args, file_cfg)
    keys = parse_query(args.dsl)
    if args.limit is not None:
        keys.limit = args.limit
    ego = _parse_ego(args.ego, args.now)
    records = execute(db, keys, ego=ego, now=args.now)
    if args.as_json:
        payload = {"records": [
            {"entry": entry_to_dict(r.entry),
             "scores": {k: (bool(v) if isinstance(v, bool) else float(v))
                        for k, v in r.scores.items()},
             "fused_score": r.fused_score}
            for r in records
        ]}
        print(canonical_json(payload))
    else:
        if not records:
            print("no results")
        for r in records:
            c = r.entry.spa.centroid
            spans = ", ".join(f"{a:g}..{b:g}" for a, b in r.entry.tem.intervals)
            print(f"{r.fused_score:6.3f}  {r.entry.id}  \"{r.entry.sem.description}\" "
                  f"at ({c[0]:.2f}, {c[1]:.2f}, {c[2]:.2f}) seen [{spans}]")
    return EXIT_OK


def _cmd_answer(args, file_cfg) -> int:
    db, _ = _open_db(args, file_cfg)
    if args.scripted:
        with open(args.scripted) as fh:
            replies = [ReasonerReply.from_dict(r) for r in json.load(fh)]
        reasoner = ScriptedReasoner(replies)
    else:
        url = _resolve(args.reasoner, "REASONER", file_cfg, "reasoner", None)
        if url is None:
            raise ValueError("answer requires --reasoner URL or --scripted FILE")
        reasoner = HttpReasoner(url)
    ego = _parse_ego(args.ego, args.now)
    text, trace = answer(db, args.question, reasoner,
                         live_context=args.live_context, ego=ego,
                         max_iterations=args.max_iterations, now=args.now)
    _emit(args, {"answer": text, "trace": trace.to_dict()},
          f"{text}\n({trace.termination} after {len(trace.iterations)} retrievals)")
    return EXIT_OK


def _cmd_merge(args, file_cfg) -> int:
    db, _ = _open_db(args, file_cfg)
    raw = args.transform
    if raw.startswith("@"):
        with open(raw[1:]) as fh:
            raw = fh.read()
    transform = FrameTransform.from_dict(json.loads(raw))
    src = load(args.snapshot)
    report = merge(db, src, transform)
    _emit(args, report.to_dict(),
          f"merged {report.entries_examined} entries: "
          f"{report.entries_updated} updated, {report.entries_inserted} inserted")
    return EXIT_OK


def _cmd_serve(args, file_cfg) -> int:
    config = DatabaseConfig(
        epsilon_c=_resolve(args.epsilon_c, "EPSILON_C", file_cfg, "epsilon_c", 0.5, float),
        delta_s=_resolve(args.delta_s, "DELTA_S", file_cfg, "delta_s", 0.8, float),
        delta_gap=_resolve(args.delta_gap, "DELTA_GAP", file_cfg, "delta_gap", 2.0, float),
        dim=_resolve(args.dim, "DIM", file_cfg, "dim", 256, int),
    )
    config.validate()
    data_dir = args.data_dir or _env("DATA_DIR")
    store = NamespaceStore(config=config,
                           data_dir=None if data_dir is None else Path(data_dir))
    serve(bind=args.bind, store=store, auth_token=args.auth_token)
    return EXIT_OK


def _cmd_export(args, file_cfg) -> int:
    db, _ = _open_db(args, file_cfg)
    manifest = snapshot(db, args.path)
    _emit(args, manifest,
          f"wrote {manifest['entry_count']} entries to {manifest['path']}")
    return EXIT_OK


def _cmd_stats(args, file_cfg) -> int:
    db, _ = _open_db(args, file_cfg)
    stats = db.stats()
    _emit(args, stats,
          "\n".join(f"{k}: {v}" for k, v in stats.items()))
    return EXIT_OK


def _cmd_report(args, file_cfg) -> int:
    db, _ = _open_db(args, file_cfg)
    manifest = write_report(db, args.outdir)
    _emit(args, manifest,
          f"report for {manifest['entry_count']} entries in {args.outdir}")
    return EXIT_OK


_COMMANDS = {
    "ingest": _cmd_ingest,
    "query": _cmd_query,
    "answer": _cmd_answer,
    "merge": _cmd_merge,
    "serve": _cmd_serve,
    "export": _cmd_export,
    "stats": _cmd_stats,
    "report": _cmd_report,
}


def _fail(args_json: bool, code: str, message: str, exit_code: int) -> int:
    if args_json:
        print(canonical_json({"code": code, "message": message}), file=sys.stderr)
    else:
        print(f"error ({code}): {message}", file=sys.stderr)
    return exit_code


def main(argv=None) -> int:
    parser = _build_parser()
    as_json = False
    try:
        args = parser.parse_args(argv)
        as_json = args.as_json
        file_cfg = _load_config_file(args.config)
        return _COMMANDS[args.command](args, file_cfg)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Mem4DError as exc:
        exit_code = EXIT_RUNTIME if exc.code in _RUNTIME_CODES else EXIT_VALIDATION
        return _fail(as_json, exc.code, str(exc), exit_code)
    except (ValueError, json.JSONDecodeError) as exc:
        return _fail(as_json, "invalid-request", str(exc), EXIT_VALIDATION)
    except OSError as exc:
        return _fail(as_json, "io-failure", str(exc), EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
