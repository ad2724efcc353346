"""Query keys, the textual query DSL, fused execution, and context building.

The DSL exists for CLI and reasoner ergonomics; it compiles to the same
QueryKeys structure the JSON wire format mirrors:

    QUERY  := CLAUSE ("AND" CLAUSE)*
    CLAUSE := SEM | SPA | TEM
    SEM    := sem("text" [, min=FLOAT])
    SPA    := near(X,Y,Z, r=FLOAT) | knn(X,Y,Z, k=INT)
            | box(X,Y,Z, X,Y,Z) | dir(RELATION, range=FLOAT)
    TEM    := at(T) | during(T0,T1) | ago(OFFSET) | before(T)

Whitespace never matters and each axis may appear at most once. Axes combine
by intersection; per-axis scores multiply into one fused score in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    EgoState,
    MissingEgoError,
    ObjectEntry,
    QuerySyntaxError,
)
from .semindex import cosine
from .spaindex import RELATIONS, SpatialKey, spatial_search
from .temindex import TemporalKey, temporal_search

DEFAULT_MIN_SIM = 0.5
DEFAULT_LIMIT = 10


@dataclass
class SemanticKey:
    text: str
    min_sim: float = DEFAULT_MIN_SIM


@dataclass
class QueryKeys:
    semantic: SemanticKey | None = None
    spatial: SpatialKey | None = None
    temporal: TemporalKey | None = None
    limit: int = DEFAULT_LIMIT

    def validate(self) -> None:
        if self.semantic is None and self.spatial is None and self.temporal is None:
            raise QuerySyntaxError("query has no keys", 0)
        if self.limit < 1:
            raise ValueError("limit must be >= 1")
        if self.spatial is not None:
            self.spatial.validate()
        if self.temporal is not None:
            self.temporal.validate()


@dataclass
class RetrievedRecord:
    entry: ObjectEntry
    scores: dict = field(default_factory=dict)
    fused_score: float = 0.0


# ---------------------------------------------------------------------------
# Tokenizer / parser.

_PUNCT = "(),="


class _Tokens:
    def __init__(self, text: str):
        self.text = text
        self.tokens: list[tuple[str, str, int]] = []  # (kind, value, pos)
        self._scan()
        self.i = 0

    def _scan(self):
        s, n, i = self.text, len(self.text), 0
        while i < n:
            c = s[i]
            if c.isspace():
                i += 1
            elif c in _PUNCT:
                self.tokens.append(("punct", c, i))
                i += 1
            elif c == '"':
                j = i + 1
                buf = []
                while j < n and s[j] != '"':
                    if s[j] == "\\" and j + 1 < n and s[j + 1] in ('"', "\\"):
                        buf.append(s[j + 1])
                        j += 2
                    else:
                        buf.append(s[j])
                        j += 1
                if j >= n:
                    raise QuerySyntaxError("unterminated string", i)
                self.tokens.append(("string", "".join(buf), i))
                i = j + 1
            elif c.isdigit() or c in "+-." and self._looks_numeric(i):
                j = i + 1
                while j < n and (s[j].isdigit() or s[j] in ".eE+-"):
                    # Allow +/- only right after an exponent marker.
                    if s[j] in "+-" and s[j - 1] not in "eE":
                        break
                    j += 1
                token = s[i:j]
                try:
                    float(token)
                except ValueError:
                    raise QuerySyntaxError(f"bad number {token!r}", i) from None
                self.tokens.append(("number", token, i))
                i = j
            elif c.isalpha() or c == "_":
                j = i + 1
                while j < n and (s[j].isalnum() or s[j] == "_"):
                    j += 1
                self.tokens.append(("name", s[i:j], i))
                i = j
            else:
                raise QuerySyntaxError(f"unexpected character {c!r}", i)

    def _looks_numeric(self, i: int) -> bool:
        s = self.text
        if s[i].isdigit():
            return True
        return i + 1 < len(s) and (s[i + 1].isdigit() or s[i + 1] == ".")

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else ("eof", "", len(self.text))

    def next(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, kind: str, value: str | None = None):
        tok = self.next()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            raise QuerySyntaxError(f"expected {want!r}, found {tok[1] or 'end of query'!r}",
                                   tok[2])
        return tok


def _number(tokens: _Tokens) -> float:
    tok = tokens.expect("number")
    return float(tok[1])


def _named_arg(tokens: _Tokens, name: str) -> float:
    tok = tokens.expect("name")
    if tok[1] != name:
        raise QuerySyntaxError(f"expected argument {name!r}, found {tok[1]!r}", tok[2])
    tokens.expect("punct", "=")
    return _number(tokens)


def parse_query(text: str) -> QueryKeys:
    """Compile a DSL string into QueryKeys.

    Raises QuerySyntaxError with the character position on any malformed
    input, including an axis appearing twice or an empty query.
    """
    if not text or not text.strip():
        raise QuerySyntaxError("empty query", 0)
    tokens = _Tokens(text)
    keys = QueryKeys(limit=DEFAULT_LIMIT)

    while True:
        tok = tokens.expect("name")
        name, pos = tok[1], tok[2]
        if name == "sem":
            if keys.semantic is not None:
                raise QuerySyntaxError("duplicate semantic clause", pos)
            tokens.expect("punct", "(")
            string_tok = tokens.expect("string")
            if not string_tok[1]:
                raise QuerySyntaxError("semantic text must be non-empty", string_tok[2])
            min_sim = DEFAULT_MIN_SIM
            if tokens.peek()[1] == ",":
                tokens.next()
                min_sim = _named_arg(tokens, "min")
            tokens.expect("punct", ")")
            keys.semantic = SemanticKey(text=string_tok[1], min_sim=min_sim)
        elif name in ("near", "knn", "box", "dir"):
            if keys.spatial is not None:
                raise QuerySyntaxError("duplicate spatial clause", pos)
            tokens.expect("punct", "(")
            if name == "near":
                x = _number(tokens)
                tokens.expect("punct", ",")
                y = _number(tokens)
                tokens.expect("punct", ",")
                z = _number(tokens)
                tokens.expect("punct", ",")
                r = _named_arg(tokens, "r")
                keys.spatial = SpatialKey.radius((x, y, z), r)
            elif name == "knn":
                x = _number(tokens)
                tokens.expect("punct", ",")
                y = _number(tokens)
                tokens.expect("punct", ",")
                z = _number(tokens)
                tokens.expect("punct", ",")
                k = _named_arg(tokens, "k")
                if k != int(k):
                    raise QuerySyntaxError("k must be an integer", pos)
                keys.spatial = SpatialKey.knn((x, y, z), int(k))
            elif name == "box":
                vals = [_number(tokens)]
                for _ in range(5):
                    tokens.expect("punct", ",")
                    vals.append(_number(tokens))
                keys.spatial = SpatialKey.box(vals[:3], vals[3:])
            else:  # dir
                rel_tok = tokens.expect("name")
                if rel_tok[1] not in RELATIONS:
                    raise QuerySyntaxError(f"unknown relation {rel_tok[1]!r}", rel_tok[2])
                tokens.expect("punct", ",")
                rng = _named_arg(tokens, "range")
                keys.spatial = SpatialKey.directional(rel_tok[1], rng)
            tokens.expect("punct", ")")
        elif name in ("at", "during", "ago", "before"):
            if keys.temporal is not None:
                raise QuerySyntaxError("duplicate temporal clause", pos)
            tokens.expect("punct", "(")
            if name == "at":
                keys.temporal = TemporalKey.at(_number(tokens))
            elif name == "during":
                t0 = _number(tokens)
                tokens.expect("punct", ",")
                t1 = _number(tokens)
                if t1 < t0:
                    raise QuerySyntaxError("during requires t0 <= t1", pos)
                keys.temporal = TemporalKey.during(t0, t1)
            elif name == "ago":
                offset = _number(tokens)
                if offset < 0:
                    raise QuerySyntaxError("ago requires a non-negative offset", pos)
                keys.temporal = TemporalKey.relative(offset)
            else:
                keys.temporal = TemporalKey.last_seen_before(_number(tokens))
            tokens.expect("punct", ")")
        else:
            raise QuerySyntaxError(f"unknown clause {name!r}", pos)

        nxt = tokens.peek()
        if nxt[0] == "eof":
            break
        if nxt[0] == "name" and nxt[1] == "AND":
            tokens.next()
            continue
        raise QuerySyntaxError(f"expected 'AND' or end of query, found {nxt[1]!r}",
                               nxt[2])

    keys.validate()
    return keys


def _fmt(x: float) -> str:
    return repr(float(x))


def unparse_query(keys: QueryKeys) -> str:
    """Render QueryKeys back to DSL text; parse(unparse(k)) is equivalent to k."""
    clauses: list[str] = []
    if keys.semantic is not None:
        text = keys.semantic.text.replace("\\", "\\\\").replace('"', '\\"')
        clauses.append(f'sem("{text}", min={_fmt(keys.semantic.min_sim)})')
    if keys.spatial is not None:
        s = keys.spatial
        if s.mode == "radius":
            clauses.append(
                f"near({_fmt(s.center[0])},{_fmt(s.center[1])},{_fmt(s.center[2])}, "
                f"r={_fmt(s.r)})"
            )
        elif s.mode == "knn":
            clauses.append(
                f"knn({_fmt(s.center[0])},{_fmt(s.center[1])},{_fmt(s.center[2])}, "
                f"k={s.k})"
            )
        elif s.mode == "box":
            lo, hi = s.box_min, s.box_max
            clauses.append(
                f"box({_fmt(lo[0])},{_fmt(lo[1])},{_fmt(lo[2])}, "
                f"{_fmt(hi[0])},{_fmt(hi[1])},{_fmt(hi[2])})"
            )
        else:
            clauses.append(f"dir({s.relation}, range={_fmt(s.max_range)})")
    if keys.temporal is not None:
        t = keys.temporal
        if t.mode == "at":
            clauses.append(f"at({_fmt(t.t)})")
        elif t.mode == "during":
            clauses.append(f"during({_fmt(t.t0)},{_fmt(t.t1)})")
        elif t.mode == "relative":
            clauses.append(f"ago({_fmt(t.offset)})")
        else:
            clauses.append(f"before({_fmt(t.t)})")
    return " AND ".join(clauses)


# ---------------------------------------------------------------------------
# JSON wire format (mirrors QueryKeys one-to-one).

def keys_to_dict(keys: QueryKeys) -> dict:
    out: dict = {"limit": keys.limit}
    if keys.semantic is not None:
        out["semantic"] = {"text": keys.semantic.text, "min_sim": keys.semantic.min_sim}
    if keys.spatial is not None:
        s = keys.spatial
        if s.mode == "radius":
            out["spatial"] = {"mode": "radius", "center": [float(c) for c in s.center],
                              "r": s.r}
        elif s.mode == "knn":
            out["spatial"] = {"mode": "knn", "center": [float(c) for c in s.center],
                              "k": s.k}
        elif s.mode == "box":
            out["spatial"] = {"mode": "box", "min": [float(c) for c in s.box_min],
                              "max": [float(c) for c in s.box_max]}
        else:
            out["spatial"] = {"mode": "directional", "relation": s.relation,
                              "max_range": s.max_range}
    if keys.temporal is not None:
        t = keys.temporal
        if t.mode == "at":
            out["temporal"] = {"mode": "at", "t": t.t}
        elif t.mode == "during":
            out["temporal"] = {"mode": "during", "t0": t.t0, "t1": t.t1}
        elif t.mode == "relative":
            tem = {"mode": "relative", "offset": t.offset}
            if t.now is not None:
                tem["now"] = t.now
            out["temporal"] = tem
        else:
            out["temporal"] = {"mode": "before", "t": t.t}
    return out


def keys_from_dict(data: dict) -> QueryKeys:
    keys = QueryKeys(limit=int(data.get("limit", DEFAULT_LIMIT)))
    sem = data.get("semantic")
    if sem is not None:
        keys.semantic = SemanticKey(text=str(sem["text"]),
                                    min_sim=float(sem.get("min_sim", DEFAULT_MIN_SIM)))
    spa = data.get("spatial")
    if spa is not None:
        mode = spa.get("mode")
        if mode == "radius":
            keys.spatial = SpatialKey.radius(spa["center"], float(spa["r"]))
        elif mode == "knn":
            keys.spatial = SpatialKey.knn(spa["center"], int(spa["k"]))
        elif mode == "box":
            keys.spatial = SpatialKey.box(spa["min"], spa["max"])
        elif mode == "directional":
            keys.spatial = SpatialKey.directional(str(spa["relation"]),
                                                  float(spa["max_range"]))
        else:
            raise ValueError(f"unknown spatial mode {mode!r}")
    tem = data.get("temporal")
    if tem is not None:
        mode = tem.get("mode")
        if mode == "at":
            keys.temporal = TemporalKey.at(float(tem["t"]))
        elif mode == "during":
            keys.temporal = TemporalKey.during(float(tem["t0"]), float(tem["t1"]))
        elif mode == "relative":
            now = tem.get("now")
            keys.temporal = TemporalKey.relative(float(tem["offset"]),
                                                 None if now is None else float(now))
        elif mode == "before":
            keys.temporal = TemporalKey.last_seen_before(float(tem["t"]))
        else:
            raise ValueError(f"unknown temporal mode {mode!r}")
    keys.validate()
    return keys


# ---------------------------------------------------------------------------
# Execution.

def _clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else (1.0 if x > 1.0 else x)


def execute(db, keys: QueryKeys, ego: EgoState | None = None,
            now: float | None = None) -> list[RetrievedRecord]:
    """Run a fused query: intersect the per-axis result sets, score each
    survivor per axis, multiply into a fused score, and rank.

    Directional spatial keys need `ego`. Relative temporal keys resolve
    against `now`, falling back to ego.timestamp and then to the latest
    observation instant stored in the database.
    """
    keys.validate()

    sem_hits: dict[str, float] | None = None
    spa_hits: dict[str, float] | None = None
    tem_hits: set[str] | None = None
    range_scale = 1.0

    with db.lock.read():
        if keys.semantic is not None:
            key_vec = db.embedder.embed(keys.semantic.text)
            sem_hits = {
                h.entry_id: h.similarity
                for h in db.sem_index.scan(key_vec)
                if h.similarity >= keys.semantic.min_sim
            }

        if keys.spatial is not None:
            skey = keys.spatial
            if skey.mode == "directional":
                if skey.ego is None and ego is None:
                    raise MissingEgoError("directional query requires an ego state")
                skey = skey.with_ego(ego)
            pairs = spatial_search(db, skey)
            spa_hits = {entry_id: dist for entry_id, dist in pairs}
            if skey.mode == "radius":
                range_scale = float(skey.r)
            elif skey.mode == "knn":
                range_scale = max((d for _, d in pairs), default=0.0)
            elif skey.mode == "box":
                range_scale = float(np.linalg.norm((skey.box_max - skey.box_min) / 2.0))
            else:
                range_scale = float(skey.max_range)

        if keys.temporal is not None:
            tkey = keys.temporal
            if tkey.mode == "relative" and tkey.now is None:
                if now is not None:
                    tkey = tkey.with_now(now)
                elif ego is not None:
                    tkey = tkey.with_now(ego.timestamp)
                else:
                    tkey = tkey.with_now(db.latest_time())
            tem_hits = {entry_id for entry_id, _ in temporal_search(db, tkey)}

        candidate_ids: set[str] | None = None
        for axis in (sem_hits, spa_hits, tem_hits):
            if axis is None:
                continue
            ids = set(axis) if not isinstance(axis, set) else axis
            candidate_ids = ids if candidate_ids is None else candidate_ids & ids

        records: list[RetrievedRecord] = []
        for entry_id in candidate_ids or ():
            scores: dict = {}
            fused = 1.0
            if sem_hits is not None:
                scores["similarity"] = sem_hits[entry_id]
                fused *= _clamp01(sem_hits[entry_id])
            if spa_hits is not None:
                dist = spa_hits[entry_id]
                scores["distance"] = dist
                fused *= 1.0 if range_scale <= 0.0 else _clamp01(1.0 - dist / range_scale)
            if tem_hits is not None:
                scores["temporal_match"] = True
                fused *= 1.0
            records.append(
                RetrievedRecord(entry=db.entries[entry_id].clone(), scores=scores,
                                fused_score=fused)
            )

    records.sort(key=lambda r: (-r.fused_score, r.entry.id))
    return records[: keys.limit]


# ---------------------------------------------------------------------------
# Context serialization.

EMPTY_CONTEXT = "no stored observations matched"
MIN_CONTEXT_BUDGET = 128


def _record_line(record: RetrievedRecord) -> str:
    e = record.entry
    c, x = e.spa.centroid, e.spa.extent
    spans = ", ".join(f"{a:g}..{b:g}" for a, b in e.tem.intervals)
    desc = " ".join(e.sem.description.split())  # keep one record per line
    return (
        f"- \"{desc}\" centroid=({c[0]:.2f}, {c[1]:.2f}, {c[2]:.2f}) "
        f"extent=({x[0]:.2f}, {x[1]:.2f}, {x[2]:.2f}) seen=[{spans}]"
    )


def build_context(records: list[RetrievedRecord], char_budget: int = 2048) -> str:
    """Serialize ranked records into the textual context handed to a reasoner.

    One line per record, rank order preserved. The output never exceeds the
    budget: trailing records are dropped whole and replaced by a single
    omission marker.
    """
    if char_budget < MIN_CONTEXT_BUDGET:
        raise ValueError(f"char_budget must be >= {MIN_CONTEXT_BUDGET}")
    if not records:
        return EMPTY_CONTEXT
    lines = [_record_line(r) for r in records]
    full = "\n".join(lines)
    if len(full) <= char_budget:
        return full
    for keep in range(len(lines) - 1, -1, -1):
        omitted = len(lines) - keep
        candidate = "\n".join(lines[:keep] + [f"... {omitted} records omitted"])
        if len(candidate) <= char_budget:
            return candidate
    return f"... {len(lines)} records omitted"
