"""HTTP adapter tests against a stdlib stub server: the real-embedder and
real-reasoner endpoints, plus the writer-busy path of the service."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from mem4d import HttpEmbedder, HttpReasoner
from mem4d.core import ReasonerError


class StubHandler(BaseHTTPRequestHandler):
    fail_next = 0

    def log_message(self, *args):
        pass

    def do_POST(self):
        length = int(self.headers.get("content-length", 0))
        body = json.loads(self.rfile.read(length))
        if self.path == "/embed":
            text = body["text"]
            payload = {"embedding": [float(len(text) % 7 + 1), 2.0, 3.0, 4.0]}
        elif self.path == "/reason":
            if type(self).fail_next > 0:
                type(self).fail_next -= 1
                self.send_response(500)
                self.end_headers()
                return
            payload = {"answer": f"echo: {body['prompt'][:16]}",
                       "confidence": 0.9}
        else:
            self.send_response(404)
            self.end_headers()
            return
        blob = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)


@pytest.fixture(scope="module")
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    thread.join(timeout=5)


class TestHttpEmbedder:
    def test_normalizes_and_negotiates_dimension(self, stub_server):
        emb = HttpEmbedder(f"{stub_server}/embed")
        assert emb.dimension() == 4
        vec = emb.embed("red bus")
        assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-9)

    def test_same_text_same_vector(self, stub_server):
        emb = HttpEmbedder(f"{stub_server}/embed")
        assert np.array_equal(emb.embed("red bus"), emb.embed("red bus"))


class TestHttpReasoner:
    def test_round_trip(self, stub_server):
        reasoner = HttpReasoner(f"{stub_server}/reason")
        reply = reasoner.respond("what is near?")
        assert reply.answer.startswith("echo:")
        assert reply.confidence == 0.9

    def test_retries_then_succeeds(self, stub_server):
        StubHandler.fail_next = 1
        reasoner = HttpReasoner(f"{stub_server}/reason", retries=2)
        assert reasoner.respond("hello").confidence == 0.9

    def test_exhausted_retries_raise(self, stub_server):
        StubHandler.fail_next = 5
        reasoner = HttpReasoner(f"{stub_server}/reason", retries=1)
        with pytest.raises(ReasonerError):
            reasoner.respond("hello")
        StubHandler.fail_next = 0


class TestWriterBusy:
    def test_merge_returns_409_when_writer_held(self, rng, monkeypatch):
        import mem4d.service as service_mod
        from fastapi.testclient import TestClient
        from mem4d import DatabaseConfig, FrameTransform, snapshot_bytes
        from mem4d.service import NamespaceStore, create_app
        from conftest import random_database

        monkeypatch.setattr(service_mod, "MERGE_LOCK_TIMEOUT", 0.05)
        store = NamespaceStore(config=DatabaseConfig(dim=32))
        db = store.get("default")
        src = random_database(rng, 3, namespace="src")
        blob = snapshot_bytes(src)
        tf = FrameTransform.identity("map", "map")

        hold = threading.Event()
        release = threading.Event()

        def writer():
            with db.lock.write():
                hold.set()
                release.wait(timeout=10)

        t = threading.Thread(target=writer)
        t.start()
        hold.wait(timeout=5)
        try:
            with TestClient(create_app(store)) as client:
                resp = client.post(
                    "/v1/merge", content=blob,
                    headers={"X-Frame-Transform": json.dumps(tf.to_dict())})
            assert resp.status_code == 409
            assert resp.json()["code"] == "writer-busy"
        finally:
            release.set()
            t.join(timeout=5)
