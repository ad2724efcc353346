"""Thin typed client for the mem4d service API (v1).

Byte-faithful pass-through: every method returns exactly what the server
sent, parsed but otherwise untouched. Server-side failures raise ApiError
carrying the server's stable error code; transport failures raise
ConnectionFailed. Only idempotent GETs are retried.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import requests


class ClientError(Exception):
    pass


class ConnectionFailed(ClientError):
    code = "connection-error"


class ApiError(ClientError):
    """Server-reported failure with its stable machine-readable code."""

    def __init__(self, status: int, code: str, message: str, detail=None):
        super().__init__(f"[{status}] {code}: {message}")
        self.status = status
        self.code = code
        self.message = message
        self.detail = detail


@dataclass
class ClientSession:
    """One connection configuration to a mem4d service."""

    base_url: str
    auth_token: str | None = None
    timeout: float = 30.0
    retries: int = 2
    namespace: str | None = None
    _http: requests.Session = field(default_factory=requests.Session, repr=False)

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        self.base_url = self.base_url.rstrip("/")

    # -- transport ----------------------------------------------------------

    def _headers(self, extra: dict | None = None) -> dict:
        headers = {}
        if self.auth_token is not None:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        if extra:
            headers.update(extra)
        return headers

    def _params(self) -> dict:
        return {} if self.namespace is None else {"namespace": self.namespace}

    def _request(self, method: str, path: str, *, retry: bool = False,
                 **kwargs) -> requests.Response:
        url = f"{self.base_url}{path}"
        attempts = (self.retries + 1) if retry else 1
        last_exc: Exception | None = None
        for _ in range(attempts):
            try:
                resp = self._http.request(
                    method, url, timeout=self.timeout,
                    headers=self._headers(kwargs.pop("headers", None)),
                    params=self._params(), **kwargs,
                )
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code >= 400:
                raise self._api_error(resp)
            return resp
        raise ConnectionFailed(f"{method} {url} unreachable: {last_exc}")

    @staticmethod
    def _api_error(resp: requests.Response) -> ApiError:
        try:
            body = resp.json()
            return ApiError(resp.status_code, str(body.get("code", "internal")),
                            str(body.get("message", "")), body.get("detail"))
        except ValueError:
            return ApiError(resp.status_code, "internal", resp.text[:200])

    # -- endpoint operations (one-to-one with the service) --------------------

    def query(self, dsl_or_keys, *, ego: dict | None = None,
              now: float | None = None, limit: int | None = None) -> dict:
        """POST /v1/query with either a DSL string or a QueryKeys JSON dict."""
        if isinstance(dsl_or_keys, str):
            body: dict = {"dsl": dsl_or_keys}
        else:
            body = dict(dsl_or_keys)
        if ego is not None:
            body["ego"] = ego
        if now is not None:
            body["now"] = now
        if limit is not None:
            body["limit"] = limit
        return self._request("POST", "/v1/query", json=body).json()

    def ingest(self, observations_jsonl: str) -> dict:
        """POST /v1/observations with a batch in the JSONL ingestion format."""
        return self._request(
            "POST", "/v1/observations", data=observations_jsonl.encode("utf-8"),
            headers={"Content-Type": "application/jsonl"},
        ).json()

    def integrate_entry(self, entry: dict) -> dict:
        """POST /v1/entries with one canonical entry document."""
        return self._request("POST", "/v1/entries", json=entry).json()

    def get_entry(self, entry_id: str) -> dict:
        """GET /v1/entries/{id}; retried (idempotent)."""
        return self._request("GET", f"/v1/entries/{entry_id}", retry=True).json()

    def answer(self, question: str, reasoner_ref: dict, *,
               live_context: str | None = None, ego: dict | None = None,
               max_iterations: int | None = None,
               now: float | None = None) -> tuple[str, dict]:
        """POST /v1/answer; returns (answer text, trace dict)."""
        body: dict = {"question": question, "reasoner": reasoner_ref}
        if live_context is not None:
            body["live_context"] = live_context
        if ego is not None:
            body["ego"] = ego
        if max_iterations is not None:
            body["max_iterations"] = max_iterations
        if now is not None:
            body["now"] = now
        data = self._request("POST", "/v1/answer", json=body).json()
        return data["answer"], data["trace"]

    def merge(self, snapshot_bytes: bytes, transform: dict) -> dict:
        """POST /v1/merge with a snapshot body and the frame transform header."""
        return self._request(
            "POST", "/v1/merge", data=snapshot_bytes,
            headers={"Content-Type": "application/octet-stream",
                     "X-Frame-Transform": json.dumps(transform)},
        ).json()

    def export(self, path) -> dict:
        """GET /v1/export, writing the snapshot to `path`; retried (idempotent)."""
        blob = self.export_bytes()
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(blob)
        return {"path": str(out), "bytes": len(blob)}

    def export_bytes(self) -> bytes:
        return self._request("GET", "/v1/export", retry=True).content

    def stats(self) -> dict:
        """GET /v1/stats; retried (idempotent)."""
        return self._request("GET", "/v1/stats", retry=True).json()

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "ClientSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
