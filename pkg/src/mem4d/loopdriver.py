"""The two-step retrieval-reasoning loop.

Step one asks the reasoner to answer outright; if its self-reported
confidence clears the gate the loop ends with zero retrievals. Otherwise the
reasoner's proposed query is parsed and executed, the retrieved records are
serialized into a context block, and the question plus context goes back to
the reasoner. Rounds without a fresh proposed query relax the previous keys
on a fixed schedule. Termination: confident answer, the iteration cap, or
two consecutive rounds retrieving the identical id set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .core import EgoState, QuerySyntaxError, ReasonerError, canonical_json
from .query import (
    QueryKeys,
    SemanticKey,
    build_context,
    execute,
    keys_to_dict,
    parse_query,
)
from .spaindex import SpatialKey
from .temindex import TemporalKey

CONFIDENCE_GATE = 0.7
FALLBACK_MIN_SIM = 0.25
DEFAULT_FALLBACK_LIMIT = 10


@dataclass
class ReasonerReply:
    """Structured reasoner output: an answer, a proposed query, or both."""

    confidence: float
    answer: str | None = None
    proposed_query: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.answer is None and self.proposed_query is None:
            raise ValueError("reply must carry an answer or a proposed query")

    def to_dict(self) -> dict:
        return {"answer": self.answer, "confidence": self.confidence,
                "proposed_query": self.proposed_query}

    @classmethod
    def from_dict(cls, data: dict) -> "ReasonerReply":
        return cls(
            confidence=float(data.get("confidence", 0.0)),
            answer=data.get("answer"),
            proposed_query=data.get("proposed_query"),
        )


class Reasoner:
    def respond(self, prompt: str) -> ReasonerReply:
        raise NotImplementedError


class ScriptedReasoner(Reasoner):
    """Replays a fixed reply sequence; repeats the last reply when exhausted.

    Records every prompt it sees, which the tests use to assert what context
    reached the reasoner.
    """

    def __init__(self, replies: list[ReasonerReply]):
        if not replies:
            raise ValueError("scripted reasoner needs at least one reply")
        self._replies = list(replies)
        self._i = 0
        self.prompts: list[str] = []

    def respond(self, prompt: str) -> ReasonerReply:
        self.prompts.append(prompt)
        reply = self._replies[min(self._i, len(self._replies) - 1)]
        self._i += 1
        return reply


class HttpReasoner(Reasoner):
    """Adapter for a real reasoner endpoint speaking the structured schema:
    POST {"prompt": ...} -> {"answer"?, "confidence", "proposed_query"?}."""

    def __init__(self, url: str, timeout: float = 60.0, retries: int = 1):
        self._url = url
        self._timeout = timeout
        self._retries = max(0, int(retries))

    def respond(self, prompt: str) -> ReasonerReply:
        import requests

        last_exc: Exception | None = None
        for _ in range(self._retries + 1):
            try:
                resp = requests.post(self._url, json={"prompt": prompt},
                                     timeout=self._timeout)
                resp.raise_for_status()
                return ReasonerReply.from_dict(resp.json())
            except Exception as exc:  # noqa: BLE001 - adapter boundary
                last_exc = exc
        raise ReasonerError(f"reasoner endpoint failed: {last_exc}")


def parse_free_text_reply(text: str, default_confidence: float = 0.5) -> ReasonerReply:
    """Extraction adapter for reasoners that answer in free text.

    Uses the first JSON object found in the text when present; otherwise the
    whole text becomes the answer at a default confidence.
    """
    start = text.find("{")
    while start != -1:
        depth = 0
        for i in range(start, len(text)):
            if text[i] == "{":
                depth += 1
            elif text[i] == "}":
                depth -= 1
                if depth == 0:
                    try:
                        data = json.loads(text[start : i + 1])
                        if isinstance(data, dict) and (
                            "answer" in data or "proposed_query" in data
                        ):
                            return ReasonerReply.from_dict(data)
                    except (ValueError, TypeError):
                        pass
                    break
        start = text.find("{", start + 1)
    return ReasonerReply(confidence=default_confidence, answer=text.strip() or None)


def assess_answerability(reply: ReasonerReply,
                         threshold: float = CONFIDENCE_GATE) -> str:
    """'answer_now' when an answer is present at or above the confidence gate,
    'retrieve' otherwise."""
    if reply.answer is not None and reply.confidence >= threshold:
        return "answer_now"
    return "retrieve"


def broaden(keys: QueryKeys, iteration: int) -> QueryKeys:
    """Deterministic scope relaxation for retrieval round `iteration` (>= 1).

    Semantic min_sim drops by 0.1 per iteration (floored at 0), radius and
    directional range scale by (1 + iteration), a during window widens by
    10 * iteration seconds each way, and the result limit doubles. Absent
    axes and parameters outside the schedule stay untouched.
    """
    if iteration < 1:
        raise ValueError("iteration must be >= 1")
    out = QueryKeys(limit=keys.limit * 2)
    if keys.semantic is not None:
        out.semantic = SemanticKey(
            text=keys.semantic.text,
            min_sim=max(0.0, keys.semantic.min_sim - 0.1 * iteration),
        )
    if keys.spatial is not None:
        s = keys.spatial
        if s.mode == "radius":
            out.spatial = SpatialKey.radius(s.center, s.r * (1 + iteration))
        elif s.mode == "directional":
            out.spatial = SpatialKey.directional(
                s.relation, s.max_range * (1 + iteration), ego=s.ego
            )
        else:
            out.spatial = s
    if keys.temporal is not None:
        t = keys.temporal
        if t.mode == "during":
            out.temporal = TemporalKey.during(
                t.t0 - 10.0 * iteration, t.t1 + 10.0 * iteration
            )
        else:
            out.temporal = t
    return out


@dataclass
class LoopIteration:
    prompt: str
    reply: ReasonerReply
    keys: QueryKeys
    record_ids: list[str]
    context: str

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "reply": self.reply.to_dict(),
            "keys": keys_to_dict(self.keys),
            "record_ids": list(self.record_ids),
            "context": self.context,
        }


@dataclass
class LoopTrace:
    question: str
    gate_prompt: str = ""
    gate_reply: ReasonerReply | None = None
    iterations: list[LoopIteration] = field(default_factory=list)
    repairs: list[dict] = field(default_factory=list)
    final_answer: str = ""
    termination: str = ""   # confident | max_iterations | no_new_evidence

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "gate_prompt": self.gate_prompt,
            "gate_reply": None if self.gate_reply is None else self.gate_reply.to_dict(),
            "iterations": [it.to_dict() for it in self.iterations],
            "repairs": list(self.repairs),
            "final_answer": self.final_answer,
            "termination": self.termination,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def _gate_prompt(question: str, live_context: str | None) -> str:
    if live_context:
        return f"{question}\n\nlive context:\n{live_context}"
    return question


def _context_prompt(question: str, context: str) -> str:
    return f"{question}\n\nretrieved context:\n{context}"


def _fallback_keys(question: str, limit: int) -> QueryKeys:
    return QueryKeys(semantic=SemanticKey(text=question, min_sim=FALLBACK_MIN_SIM),
                     limit=limit)


def answer(
    db,
    question: str,
    reasoner: Reasoner,
    live_context: str | None = None,
    ego: EgoState | None = None,
    max_iterations: int = 5,
    confidence_threshold: float = CONFIDENCE_GATE,
    char_budget: int = 2048,
    now: float | None = None,
) -> tuple[str, LoopTrace]:
    """Run the full answerability-gate + retrieval loop for one question."""
    if not question:
        raise ValueError("question must be non-empty")
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")

    trace = LoopTrace(question=question)

    def _respond(prompt: str) -> ReasonerReply:
        try:
            return reasoner.respond(prompt)
        except ReasonerError as exc:
            exc.trace = trace
            raise
        except Exception as exc:  # noqa: BLE001 - surface with trace attached
            raise ReasonerError(f"reasoner failed: {exc}", trace=trace) from exc

    trace.gate_prompt = _gate_prompt(question, live_context)
    reply = _respond(trace.gate_prompt)
    trace.gate_reply = reply
    if assess_answerability(reply, confidence_threshold) == "answer_now":
        trace.final_answer = reply.answer
        trace.termination = "confident"
        return reply.answer, trace

    keys: QueryKeys | None = None
    prev_ids: set[str] | None = None
    broaden_step = 0

    for round_no in range(1, max_iterations + 1):
        keys, broaden_step = _next_keys(reply, keys, broaden_step, round_no,
                                        question, trace, _respond)
        records = execute(db, keys, ego=ego, now=now)
        context = build_context(records, char_budget)
        prompt = _context_prompt(question, context)
        reply = _respond(prompt)
        ids = [r.entry.id for r in records]
        trace.iterations.append(
            LoopIteration(prompt=prompt, reply=reply, keys=keys,
                          record_ids=ids, context=context)
        )
        if assess_answerability(reply, confidence_threshold) == "answer_now":
            trace.termination = "confident"
            break
        if prev_ids is not None and set(ids) == prev_ids:
            trace.termination = "no_new_evidence"
            break
        prev_ids = set(ids)
    else:
        trace.termination = "max_iterations"

    trace.final_answer = _best_answer(trace)
    return trace.final_answer, trace


def _next_keys(reply, prev_keys, broaden_step, round_no, question, trace,
               respond) -> tuple[QueryKeys, int]:
    """Keys for the coming retrieval round plus the updated broaden counter.

    A parsing proposed query from the reasoner starts a fresh relaxation
    schedule; a syntax error earns one repair reprompt; with nothing usable
    the previous keys broaden one more step (or, with no previous keys at
    all, the question itself becomes a semantic key).
    """
    if reply.proposed_query is not None:
        try:
            return parse_query(reply.proposed_query), 0
        except QuerySyntaxError as exc:
            repair_prompt = (
                f"{question}\n\nyour query {reply.proposed_query!r} failed to "
                f"parse: {exc}. reply with a corrected query."
            )
            repaired = respond(repair_prompt)
            trace.repairs.append(
                {"round": round_no, "prompt": repair_prompt,
                 "reply": repaired.to_dict()}
            )
            if repaired.proposed_query is not None:
                try:
                    return parse_query(repaired.proposed_query), 0
                except QuerySyntaxError:
                    pass
    if prev_keys is not None:
        return broaden(prev_keys, broaden_step + 1), broaden_step + 1
    return _fallback_keys(question, DEFAULT_FALLBACK_LIMIT), broaden_step


def _best_answer(trace: LoopTrace) -> str:
    for it in reversed(trace.iterations):
        if it.reply.answer is not None:
            return it.reply.answer
    if trace.gate_reply is not None and trace.gate_reply.answer is not None:
        return trace.gate_reply.answer
    return "unanswered"
