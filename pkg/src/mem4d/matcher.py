"""Match predicate and the update-or-insert integration policy.

A new observation matches an existing entry when it is spatially close
(centroid distance strictly below epsilon_c) AND semantically similar
(description cosine similarity strictly above delta_s). Matching candidates
update the best existing entry; everything else inserts fresh.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DeciderError,
    DuplicateEntryError,
    FrameMismatchError,
    ObjectEntry,
    coalesce_intervals,
)
from .semindex import cosine

log = logging.getLogger(__name__)


@dataclass
class MatchCandidate:
    entry_id: str
    distance: float
    similarity: float
    description: str = ""

    def as_tuple(self) -> tuple[str, float, float]:
        return (self.entry_id, self.distance, self.similarity)


@dataclass
class MatchDecision:
    """Outcome of integrating one candidate entry."""

    candidate: ObjectEntry
    matches: list[MatchCandidate] = field(default_factory=list)
    action: str = "insert"            # "update" | "insert"
    target_id: str | None = None

    def to_dict(self) -> dict:
        return {
            "candidate_id": self.candidate.id,
            "action": self.action,
            "target_id": self.target_id,
            "matches": [
                {"entry_id": m.entry_id, "distance": m.distance,
                 "similarity": m.similarity}
                for m in self.matches
            ],
        }


class MatchDecider:
    """Chooses between updating a matched entry and inserting fresh, and
    produces the refined description on update."""

    def decide(self, candidate: ObjectEntry, matches: list[MatchCandidate],
               matched_entries: list[ObjectEntry]) -> tuple[str | None, str]:
        raise NotImplementedError


class DefaultDecider(MatchDecider):
    """Deterministic policy: accept the top-ranked match, keep the longer
    description (ties keep the existing one)."""

    def decide(self, candidate, matches, matched_entries):
        if not matches:
            return None, candidate.sem.description
        target = matched_entries[0]
        if len(candidate.sem.description) > len(target.sem.description):
            return matches[0].entry_id, candidate.sem.description
        return matches[0].entry_id, target.sem.description


def find_matches(db, candidate: ObjectEntry) -> list[MatchCandidate]:
    """Entries both spatially close and semantically similar to the candidate.

    Strict inequalities on both clauses: boundary equality is a non-match.
    Sorted by descending similarity, then ascending distance, then entry id.
    """
    eps = db.config.epsilon_c
    delta = db.config.delta_s
    out: list[MatchCandidate] = []
    with db.lock.read():
        for entry_id in db.anchors.candidates_near(candidate.spa.centroid, eps):
            entry = db.entries[entry_id]
            distance = float(np.linalg.norm(entry.spa.centroid - candidate.spa.centroid))
            if not distance < eps:
                continue
            similarity = cosine(candidate.sem.embedding, entry.sem.embedding)
            if not similarity > delta:
                continue
            out.append(MatchCandidate(entry_id, distance, similarity,
                                      entry.sem.description))
    out.sort(key=lambda m: (-m.similarity, m.distance, m.entry_id))
    return out


def propose_to_agent(matches: list[MatchCandidate], candidate: ObjectEntry) -> str:
    """Deterministic text block presenting the candidate and its match list,
    suitable for prompting a reasoner to arbitrate update-vs-insert."""
    if not matches:
        raise ValueError("propose_to_agent requires a non-empty match list")
    c = candidate.spa.centroid
    lines = [
        f"new observation: \"{candidate.sem.description}\" "
        f"at ({c[0]:.2f}, {c[1]:.2f}, {c[2]:.2f})",
        "possible existing entries:",
    ]
    for rank, m in enumerate(matches, start=1):
        lines.append(
            f"  {rank}. {m.entry_id} distance={m.distance:.3f}m "
            f"similarity={m.similarity:.3f} \"{m.description}\""
        )
    lines.append("reply with the entry id to update, or 'new' to insert.")
    return "\n".join(lines)


def integrate(db, candidate: ObjectEntry, decider: MatchDecider | None = None) -> MatchDecision:
    """Fold one candidate entry into the database.

    On update: the target gains the candidate's observation intervals, its
    centroid moves to the observation-count-weighted running mean, its extent
    grows to the componentwise max, its description is replaced by the
    decider's refinement (re-embedded when it changes), one revision is
    appended, and its anchor moves to the new centroid. On insert the
    candidate is stored verbatim. Decider failures fall back to insert.
    """
    if decider is None:
        decider = DefaultDecider()
    if candidate.spa.frame_id != db.frame_id:
        raise FrameMismatchError(
            f"candidate frame {candidate.spa.frame_id!r} != database frame "
            f"{db.frame_id!r}"
        )

    with db.lock.write():
        matches = find_matches(db, candidate)
        matched_entries = [db.entries[m.entry_id] for m in matches]
        try:
            target_id, description = decider.decide(candidate, matches, matched_entries)
            if target_id is not None and \
                    target_id not in {m.entry_id for m in matches}:
                raise DeciderError(f"decider chose {target_id!r}, not a match")
            if not description:
                raise DeciderError("decider produced an empty description")
        except Exception:
            log.exception("decider failed; falling back to insert")
            target_id, description = None, candidate.sem.description

        if target_id is None:
            stored = candidate.clone()
            if stored.id in db.entries:
                raise DuplicateEntryError(f"entry {stored.id!r} already exists")
            db.insert_entry(stored)
            return MatchDecision(candidate=stored, matches=matches, action="insert")

        target = db.entries[target_id]
        n = target.provenance.observation_count()
        m = candidate.provenance.observation_count()
        target.spa.centroid = (n * target.spa.centroid + m * candidate.spa.centroid) / (n + m)
        target.spa.extent = np.maximum(target.spa.extent, candidate.spa.extent)
        target.tem.intervals = coalesce_intervals(
            target.tem.intervals + candidate.tem.intervals, db.config.delta_gap
        )
        if description != target.sem.description:
            target.sem.description = description
            target.sem.embedding = db.embedder.embed(description)
        obs_time = candidate.tem.latest()[1]
        target.provenance.append(
            obs_time, candidate.provenance.agent_id,
            f"observation merged from {candidate.provenance.agent_id}",
        )
        db.reindex_entry(target_id)
        db.emit("update", target)
        return MatchDecision(candidate=candidate, matches=matches,
                             action="update", target_id=target_id)
