import numpy as np
import pytest

from mem4d import TemporalKey, record_observation, resolve_relative, temporal_search
from mem4d.core import InvalidKeyError, NegativeOffsetError, UnknownEntryError
from mem4d.database import new_database
from mem4d.core import DatabaseConfig

from conftest import make_entry, random_database


def single_entry_db(intervals, delta_gap=2.0):
    db = new_database(DatabaseConfig(dim=32, delta_gap=delta_gap))
    entry = make_entry(db.embedder, "a thing", (0, 0, 0), intervals, entry_id="e1")
    db.insert_entry(entry)
    return db


def gap_cluster(timestamps, gap):
    """Sweep-line oracle: cluster sorted instants within `gap` of a neighbor."""
    if not timestamps:
        return []
    ts = sorted(timestamps)
    out = [[ts[0], ts[0]]]
    for t in ts[1:]:
        if t - out[-1][1] <= gap:
            out[-1][1] = t
        else:
            out.append([t, t])
    return [tuple(iv) for iv in out]


class TestRecordObservation:
    def test_fresh_entry_single_instant(self):
        db = single_entry_db([(17.0, 17.0)])
        assert db.entries["e1"].tem.intervals == [(17.0, 17.0)]

    def test_within_gap_extends(self):
        db = single_entry_db([(10, 20)], delta_gap=1.0)
        record_observation(db, "e1", 20.5)
        assert db.entries["e1"].tem.intervals == [(10.0, 20.5)]

    def test_beyond_gap_opens_new_interval(self):
        db = single_entry_db([(10, 20)], delta_gap=1.0)
        record_observation(db, "e1", 25.0)
        assert db.entries["e1"].tem.intervals == [(10.0, 20.0), (25.0, 25.0)]

    def test_idempotent(self):
        db = single_entry_db([(10, 20)])
        record_observation(db, "e1", 15.0)
        record_observation(db, "e1", 15.0)
        assert db.entries["e1"].tem.intervals == [(10.0, 20.0)]

    def test_bridges_two_intervals(self):
        db = single_entry_db([(10.0, 10.0)], delta_gap=2.0)
        record_observation(db, "e1", 14.0)
        record_observation(db, "e1", 12.0)  # links both neighbors
        assert db.entries["e1"].tem.intervals == [(10.0, 14.0)]

    def test_random_streams_match_sweep_oracle(self, rng):
        for _ in range(30):
            gap = float(rng.uniform(0.5, 5.0))
            db = new_database(DatabaseConfig(dim=32, delta_gap=gap))
            times = list(rng.uniform(0, 200, int(rng.integers(1, 40))))
            first = times[0]
            db.insert_entry(make_entry(db.embedder, "x", (0, 0, 0),
                                       [(first, first)], entry_id="e"))
            for t in times[1:]:
                record_observation(db, "e", float(t))
            assert db.entries["e"].tem.intervals == gap_cluster(times, gap)
            assert db.tem_index.intervals("e") == db.entries["e"].tem.intervals

    def test_unknown_entry(self):
        db = new_database(DatabaseConfig(dim=32))
        with pytest.raises(UnknownEntryError):
            record_observation(db, "nope", 1.0)


class TestResolveRelative:
    def test_twelve_seconds_ago(self):
        assert resolve_relative(100.0, 12.0) == 88.0

    def test_zero_offset(self):
        assert resolve_relative(50.0, 0.0) == 50.0

    def test_zero_boundary(self):
        assert resolve_relative(17.5, 17.5) == 0.0

    def test_negative_offset(self):
        with pytest.raises(NegativeOffsetError):
            resolve_relative(10.0, -1.0)


def brute_force_temporal(db, key):
    out = []
    for entry_id, entry in db.entries.items():
        ivs = entry.tem.intervals
        hit = None
        if key.mode == "at":
            hit = next(((a, b) for a, b in ivs if a <= key.t <= b), None)
        elif key.mode == "during":
            hit = next(((a, b) for a, b in ivs if a <= key.t1 and b >= key.t0), None)
        elif key.mode == "before":
            hit = ivs[-1] if ivs and ivs[-1][1] <= key.t else None
        if hit is not None:
            out.append((entry_id, hit))
    return sorted(out)


class TestTemporalSearch:
    def test_at_containment(self):
        db = single_entry_db([(10, 20)])
        assert temporal_search(db, TemporalKey.at(15)) == [("e1", (10.0, 20.0))]

    def test_at_outside(self):
        db = single_entry_db([(10, 20)])
        assert temporal_search(db, TemporalKey.at(25)) == []

    def test_relative_resolves(self):
        db = single_entry_db([(10, 20)])
        hits = temporal_search(db, TemporalKey.relative(offset=12.0, now=27.0))
        assert hits == [("e1", (10.0, 20.0))]

    def test_unbound_relative_rejected(self):
        db = single_entry_db([(10, 20)])
        with pytest.raises(InvalidKeyError):
            temporal_search(db, TemporalKey.relative(offset=12.0))

    def test_last_seen_before(self):
        db = single_entry_db([(5, 8), (10, 20)])
        assert temporal_search(db, TemporalKey.last_seen_before(25)) == \
            [("e1", (10.0, 20.0))]
        assert temporal_search(db, TemporalKey.last_seen_before(15)) == []

    def test_during_matches_brute_force(self, rng):
        db = random_database(rng, 1000)
        for _ in range(25):
            t0 = float(rng.uniform(0, 1000))
            key = TemporalKey.during(t0, t0 + float(rng.uniform(0, 200)))
            assert temporal_search(db, key) == brute_force_temporal(db, key)

    def test_at_and_before_match_brute_force(self, rng):
        db = random_database(rng, 500)
        for _ in range(25):
            t = float(rng.uniform(0, 1100))
            for key in (TemporalKey.at(t), TemporalKey.last_seen_before(t)):
                assert temporal_search(db, key) == brute_force_temporal(db, key)

    def test_during_point_equals_at(self, rng):
        db = random_database(rng, 300)
        for t in rng.uniform(0, 1000, 10):
            at_ids = [e for e, _ in temporal_search(db, TemporalKey.at(float(t)))]
            dur_ids = [e for e, _ in temporal_search(db, TemporalKey.during(float(t), float(t)))]
            assert at_ids == dur_ids

    def test_widening_never_loses_hits(self, rng):
        db = random_database(rng, 300)
        t0, t1 = 200.0, 400.0
        inner = {e for e, _ in temporal_search(db, TemporalKey.during(t0, t1))}
        outer = {e for e, _ in temporal_search(db, TemporalKey.during(t0 - 50, t1 + 50))}
        assert inner <= outer

    def test_invalid_during(self):
        with pytest.raises(InvalidKeyError):
            TemporalKey.during(5.0, 1.0)
