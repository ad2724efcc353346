import json
import socket
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from mem4d import (
    DatabaseConfig,
    FrameTransform,
    ReasonerReply,
    ScriptedReasoner,
    answer,
    entry_to_dict,
    execute,
    integrate,
    load_bytes,
    merge,
    new_database,
    parse_query,
    snapshot_bytes,
)
from mem4d.service import NamespaceStore, create_app

from conftest import make_entry, random_database, random_description


def planted_store(rng, n=40):
    """Store with a deterministic 'default' namespace plus an identical twin
    database for direct library calls."""
    store = NamespaceStore(config=DatabaseConfig(dim=32))
    db = random_database(rng, n)
    twin = load_bytes(snapshot_bytes(db))
    store.put("default", db)
    return store, twin


@pytest.fixture
def service(rng):
    store, twin = planted_store(rng)
    app = create_app(store)
    with TestClient(app) as client:
        yield client, store, twin


class TestQueryEndpoint:
    def test_dsl_matches_library(self, service):
        client, store, twin = service
        text = "red bus"
        dsl = f'sem("{text}", min=0.1)'
        resp = client.post("/v1/query", json={"dsl": dsl, "limit": 10})
        assert resp.status_code == 200
        got = resp.json()["records"]
        expected = execute(twin, parse_query(dsl))
        assert [r["entry"]["id"] for r in got] == [r.entry.id for r in expected]
        assert got == [
            {"entry": entry_to_dict(r.entry),
             "scores": {k: (bool(v) if isinstance(v, bool) else float(v))
                        for k, v in r.scores.items()},
             "fused_score": r.fused_score}
            for r in expected
        ]

    def test_structured_keys_match_library(self, service):
        client, store, twin = service
        body = {"spatial": {"mode": "radius", "center": [0, 0, 0], "r": 30.0},
                "temporal": {"mode": "during", "t0": 0, "t1": 500},
                "limit": 50}
        resp = client.post("/v1/query", json=body)
        assert resp.status_code == 200
        from mem4d import keys_from_dict
        expected = execute(twin, keys_from_dict(body))
        assert [r["entry"]["id"] for r in resp.json()["records"]] == \
            [r.entry.id for r in expected]

    def test_directional_with_ego(self, service):
        client, store, twin = service
        body = {"dsl": "dir(ahead, range=50)",
                "ego": {"position": [0, 0, 0], "orientation": [1, 0, 0, 0],
                        "timestamp": 0.0}}
        resp = client.post("/v1/query", json=body)
        assert resp.status_code == 200
        from mem4d import EgoState
        expected = execute(twin, parse_query("dir(ahead, range=50)"),
                           ego=EgoState([0, 0, 0], [1, 0, 0, 0], 0.0))
        assert [r["entry"]["id"] for r in resp.json()["records"]] == \
            [r.entry.id for r in expected]

    def test_malformed_dsl_reports_position(self, service):
        client, _, _ = service
        resp = client.post("/v1/query", json={"dsl": 'sem('})
        assert resp.status_code == 400
        body = resp.json()
        assert body["code"] == "invalid-query"
        assert body["detail"]["position"] == 4

    def test_missing_ego_is_400(self, service):
        client, _, _ = service
        resp = client.post("/v1/query", json={"dsl": "dir(ahead, range=5)"})
        assert resp.status_code == 400
        assert resp.json()["code"] == "missing-ego"


class TestEntryEndpoints:
    def test_get_entry_matches_library(self, service):
        client, store, twin = service
        entry_id = sorted(twin.entries)[0]
        resp = client.get(f"/v1/entries/{entry_id}")
        assert resp.status_code == 200
        assert resp.json() == entry_to_dict(twin.get_entry(entry_id))

    def test_unknown_entry_404(self, service):
        client, _, _ = service
        resp = client.get("/v1/entries/no-such-id")
        assert resp.status_code == 404
        assert resp.json()["code"] == "unknown-entry"

    def test_post_entry_matches_library(self, service, rng):
        client, store, twin = service
        entry = make_entry(twin.embedder, "a brand new kiosk", (200.0, 0, 0),
                           [(5, 6)], entry_id="k1")
        resp = client.post("/v1/entries", json=entry_to_dict(entry))
        assert resp.status_code == 200
        expected = integrate(twin, entry.clone())
        assert resp.json() == expected.to_dict()
        assert store.get("default").stats() == twin.stats()


class TestObservationsEndpoint:
    def test_batch_matches_library(self, service):
        client, store, twin = service
        header = {"type": "header",
                  "camera": {"fx": 100, "fy": 100, "cx": 50, "cy": 50,
                             "width": 100, "height": 100},
                  "agent_id": "cam-7", "frame_id": "map"}
        lines = [json.dumps(header)]
        for i in range(3):
            lines.append(json.dumps({
                "type": "observation", "mask_id": i, "label": f"pallet {i}",
                "timestamp": 40.0 + i,
                "points": [[100.0 + i, 0, 0], [100.4 + i, 0.3, 0.2]],
                "camera_pose": {"position": [0, 0, 0],
                                "orientation": [1, 0, 0, 0]},
            }))
        resp = client.post("/v1/observations", content="\n".join(lines))
        assert resp.status_code == 200
        assert resp.json()["count"] == 3
        assert all(r["action"] == "insert" for r in resp.json()["results"])
        stats = store.get("default").stats()
        assert stats["entries"] == len(twin) + 3

    def test_bad_mask_does_not_poison_batch(self, service):
        client, store, twin = service
        header = {"type": "header",
                  "camera": {"fx": 100, "fy": 100, "cx": 50, "cy": 50,
                             "width": 100, "height": 100},
                  "agent_id": "cam-8", "frame_id": "map"}
        good = {"type": "observation", "mask_id": 0, "label": "kiosk",
                "timestamp": 1.0, "points": [[300.0, 0, 0]],
                "camera_pose": {"position": [0, 0, 0],
                                "orientation": [1, 0, 0, 0]}}
        empty = dict(good, mask_id=1, points=[])
        resp = client.post("/v1/observations",
                           content="\n".join(json.dumps(x) for x in
                                             (header, empty, good)))
        assert resp.status_code == 200
        results = resp.json()["results"]
        assert results[0]["action"] == "error"
        assert results[0]["error"]["code"] == "empty-mask"
        assert results[1]["action"] == "insert"


class TestAnswerEndpoint:
    def test_scripted_answer_matches_library(self, service):
        client, store, twin = service
        target = sorted(twin.entries)[0]
        desc = twin.entries[target].sem.description
        script = [
            {"confidence": 0.2, "proposed_query": f'sem("{desc}", min=0.2)'},
            {"confidence": 0.9, "answer": "done"},
        ]
        resp = client.post("/v1/answer", json={
            "question": "what do you remember?",
            "reasoner": {"scripted": script},
        })
        assert resp.status_code == 200
        expected_text, expected_trace = answer(
            twin, "what do you remember?",
            ScriptedReasoner([ReasonerReply.from_dict(r) for r in script]),
        )
        body = resp.json()
        assert body["answer"] == expected_text
        assert body["trace"] == expected_trace.to_dict()


class TestMergeExportStats:
    def test_merge_matches_library(self, service, rng):
        client, store, twin = service
        src = random_database(rng, 10, namespace="src")
        blob = snapshot_bytes(src)
        tf = FrameTransform.identity("map", "map")
        resp = client.post("/v1/merge", content=blob,
                           headers={"X-Frame-Transform": json.dumps(tf.to_dict())})
        assert resp.status_code == 200
        expected = merge(twin, load_bytes(blob), tf)
        assert resp.json() == expected.to_dict()
        assert store.get("default").stats() == twin.stats()

    def test_merge_missing_transform(self, service):
        client, _, _ = service
        resp = client.post("/v1/merge", content=b"x")
        assert resp.status_code == 400

    def test_export_matches_library(self, service):
        client, store, twin = service
        resp = client.get("/v1/export")
        assert resp.status_code == 200
        assert resp.content == snapshot_bytes(twin)
        back = load_bytes(resp.content)
        assert back.stats()["entries"] == len(twin)

    def test_stats_matches_library(self, service):
        client, store, twin = service
        resp = client.get("/v1/stats")
        assert resp.status_code == 200
        assert resp.json() == twin.stats()

    def test_namespaces_are_isolated(self, service):
        client, _, _ = service
        resp = client.get("/v1/stats?namespace=fresh")
        assert resp.status_code == 200
        assert resp.json()["entries"] == 0


class TestAuth:
    def test_token_required_when_configured(self, rng):
        store, _ = planted_store(rng, n=2)
        app = create_app(store, auth_token="sesame")
        with TestClient(app) as client:
            assert client.get("/v1/stats").status_code == 401
            ok = client.get("/v1/stats",
                            headers={"Authorization": "Bearer sesame"})
            assert ok.status_code == 200


# ---------------------------------------------------------------------------
# Real-server concurrency: readers must never observe a half-merged database.

def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def live_server(rng):
    import uvicorn

    store, _ = planted_store(rng, n=200)
    app = create_app(store)
    port = _free_port()
    config = uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    import httpx
    while time.time() < deadline:
        try:
            httpx.get(f"http://127.0.0.1:{port}/v1/stats", timeout=1)
            break
        except Exception:
            time.sleep(0.05)
    yield f"http://127.0.0.1:{port}", store
    server.should_exit = True
    thread.join(timeout=10)


class TestConcurrentMerge:
    def test_readers_never_see_partial_state(self, live_server, rng):
        import httpx

        base, store = live_server
        pre = store.get("default").stats()["entries"]
        src = random_database(rng, 800, box=500.0, namespace="src")
        blob = snapshot_bytes(src)
        post = pre + 800  # disjoint content: every entry inserts

        observed = []
        stop = threading.Event()

        def reader():
            with httpx.Client(timeout=30) as client:
                while not stop.is_set():
                    stats = client.get(f"{base}/v1/stats").json()
                    observed.append(stats)

        readers = [threading.Thread(target=reader) for _ in range(8)]
        for t in readers:
            t.start()
        tf = FrameTransform.identity("map", "map")
        resp = httpx.post(f"{base}/v1/merge", content=blob,
                          headers={"X-Frame-Transform": json.dumps(tf.to_dict())},
                          timeout=120)
        assert resp.status_code == 200
        time.sleep(0.2)
        stop.set()
        for t in readers:
            t.join(timeout=30)

        assert len(observed) > 20
        for stats in observed:
            # internally consistent and never between the two states
            assert stats["entries"] in (pre, post), stats
            assert stats["semantic_index"] == stats["entries"]
            assert stats["spatial_index"] == stats["entries"]
            assert stats["temporal_index"] == stats["entries"]
        assert any(s["entries"] == post for s in observed)
