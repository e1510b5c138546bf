"""Scripted chat-completions server for tests and offline runs.

A script is a JSON object ``{"entries": [...]}`` (or a bare list). Each
entry may carry:

``reply``   assistant text to return (default ``""``)
``status``  HTTP status (default 200); non-200 statuses send no completion
``raw``     literal response body, bypassing the completion envelope
``match``   substring that must occur in the request's text parts
``times``   how many requests the entry serves (default 1, ``null`` = forever)

For each request the first entry with uses left whose ``match`` (if any)
occurs in the request text is consumed. Entries without ``match`` are
therefore served strictly in request order.
"""
from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import List, Optional


class MockScript:
    def __init__(self, entries, api_key: Optional[str] = None):
        if isinstance(entries, dict):
            api_key = entries.get("api_key", api_key)
            entries = entries.get("entries", [])
        self.entries = [dict(e) for e in entries]
        self.remaining = [e.get("times", 1) for e in self.entries]
        self.api_key = api_key
        self.requests: List[dict] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path) -> "MockScript":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def next_entry(self, text: str) -> Optional[dict]:
        with self._lock:
            for i, entry in enumerate(self.entries):
                left = self.remaining[i]
                if left is not None and left <= 0:
                    continue
                match = entry.get("match")
                if match is not None and match not in text:
                    continue
                if left is not None:
                    self.remaining[i] = left - 1
                return entry
        return None


def _request_text(body: dict) -> str:
    chunks = []
    for msg in body.get("messages", []):
        content = msg.get("content")
        if isinstance(content, str):
            chunks.append(content)
            continue
        for part in content or []:
            if part.get("type") == "text":
                chunks.append(part.get("text", ""))
    return "\n".join(chunks)


def _completion(text: str, model: str) -> dict:
    return {
        "id": "mock",
        "object": "chat.completion",
        "model": model,
        "choices": [
            {
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "finish_reason": "stop",
            }
        ],
    }


def _make_handler(script: MockScript):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):  # keep test output quiet
            pass

        def _send(self, status: int, payload: bytes) -> None:
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length)
            try:
                body = json.loads(raw)
            except json.JSONDecodeError:
                self._send(400, b'{"error": "bad json"}')
                return
            with script._lock:
                script.requests.append(body)
            if script.api_key is not None:
                if self.headers.get("Authorization") != f"Bearer {script.api_key}":
                    self._send(401, b'{"error": "unauthorized"}')
                    return
            entry = script.next_entry(_request_text(body))
            if entry is None:
                self._send(500, b'{"error": "script exhausted"}')
                return
            status = int(entry.get("status", 200))
            if "raw" in entry:
                self._send(status, entry["raw"].encode("utf-8"))
            elif status != 200:
                self._send(status, json.dumps({"error": f"scripted {status}"}).encode())
            else:
                payload = _completion(entry.get("reply", ""), body.get("model", ""))
                self._send(200, json.dumps(payload).encode("utf-8"))

    return Handler


class MockMLLM:
    """Serve ``script`` on localhost in a background thread.

    Usable as a context manager; ``url`` is the completion endpoint.
    """

    def __init__(self, script, host: str = "127.0.0.1", port: int = 0):
        if not isinstance(script, MockScript):
            script = MockScript(script)
        self.script = script
        self.server = ThreadingHTTPServer((host, port), _make_handler(script))
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}/v1/chat/completions"

    @property
    def requests(self) -> List[dict]:
        return self.script.requests

    def start(self) -> "MockMLLM":
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> "MockMLLM":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
