"""Deterministic scripted model server speaking the OpenAI-compatible wire shape.

Serves /chat/completions and /embeddings on a loopback port. Responses come
from an ordered rule script: the first live rule whose pattern matches the
conversation text answers the request. Instrumentation counters (peak
in-flight requests, per-request log) back the concurrency and retry tests.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any


@dataclass
class MockRule:
    """One scripted behavior: when `pattern` matches, serve `response`.

    response may be a string (plain content), a dict (JSON content for
    structured output), a list of tool-call specs `{"name", "arguments"}`,
    or a callable from conversation text to any of those.
    once=True consumes the rule after one hit. fail_times>0 makes the rule
    answer HTTP 500 that many times before serving its response.
    """

    pattern: str
    response: Any
    once: bool = False
    fail_times: int = 0
    _hits: int = field(default=0, repr=False)
    _consumed: bool = field(default=False, repr=False)

    def matches(self, text: str) -> bool:
        return not self._consumed and re.search(self.pattern, text, re.DOTALL) is not None


@dataclass
class MockConfig:
    rules: list[MockRule] = field(default_factory=list)
    default_response: str | None = None
    strict: bool = True
    latency_s: float = 0.0
    embedding_dim: int = 32
    pinned_embeddings: dict[str, list[float]] = field(default_factory=dict)


def deterministic_embedding(text: str, dim: int) -> list[float]:
    """Digest-seeded pseudo-vector; same text always maps to the same vector."""
    out: list[float] = []
    counter = 0
    while len(out) < dim:
        h = hashlib.sha256(f"{counter}:{text}".encode("utf-8")).digest()
        for i in range(0, len(h) - 1, 2):
            if len(out) >= dim:
                break
            v = int.from_bytes(h[i : i + 2], "big")
            out.append(v / 65535.0 * 2.0 - 1.0)
        counter += 1
    return out


class MockModelServer:
    """Threaded loopback server with scripted chat responses and instrumentation."""

    def __init__(self, config: MockConfig | None = None, port: int = 0):
        self.config = config or MockConfig()
        self._lock = threading.Lock()
        self.in_flight = 0
        self.peak_in_flight = 0
        self.total_requests = 0
        self.request_log: list[dict[str, Any]] = []
        server = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):  # silence default stderr chatter
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length) or b"{}")
                status, payload = server.handle(self.path, body)
                data = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self._httpd = ThreadingHTTPServer(("127.0.0.1", port), Handler)
        self._thread = threading.Thread(
            target=lambda: self._httpd.serve_forever(poll_interval=0.05), daemon=True
        )

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/v1"

    def start(self) -> "MockModelServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self) -> "MockModelServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def reset_counters(self) -> None:
        with self._lock:
            self.peak_in_flight = 0
            self.total_requests = 0
            self.request_log.clear()

    # request handling

    def handle(self, path: str, body: dict) -> tuple[int, dict]:
        with self._lock:
            self.in_flight += 1
            self.total_requests += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
        try:
            if self.config.latency_s:
                time.sleep(self.config.latency_s)
            if path.rstrip("/").endswith("embeddings"):
                return self._handle_embeddings(body)
            return self._handle_chat(body)
        finally:
            with self._lock:
                self.in_flight -= 1

    def _handle_embeddings(self, body: dict) -> tuple[int, dict]:
        texts = body.get("input", [])
        if isinstance(texts, str):
            texts = [texts]
        data = []
        for i, text in enumerate(texts):
            vector = self.config.pinned_embeddings.get(
                text, deterministic_embedding(text, self.config.embedding_dim)
            )
            data.append({"object": "embedding", "index": i, "embedding": vector})
        with self._lock:
            self.request_log.append({"kind": "embeddings", "n": len(texts)})
        return 200, {
            "object": "list",
            "data": data,
            "model": body.get("model", "mock-embedding"),
            "usage": {"prompt_tokens": sum(len(t) // 4 for t in texts), "total_tokens": 0},
        }

    def _handle_chat(self, body: dict) -> tuple[int, dict]:
        conversation = _conversation_text(body.get("messages", []))
        with self._lock:
            self.request_log.append({"kind": "chat", "text": conversation})
            rule = next((r for r in self.config.rules if r.matches(conversation)), None)
            if rule is not None:
                rule._hits += 1
                if rule._hits <= rule.fail_times:
                    return 500, {"error": {"message": "scripted transient failure"}}
                if rule.once:
                    rule._consumed = True
        if rule is None:
            if self.config.strict and self.config.default_response is None:
                return 500, {"error": {"message": "no scripted response matches the prompt"}}
            response = self.config.default_response or ""
        else:
            response = rule.response
        if callable(response):
            response = response(conversation)
        return 200, _chat_payload(body, response)


def _conversation_text(messages: list[dict]) -> str:
    parts = []
    for m in messages:
        content = m.get("content") or ""
        parts.append(f"[{m.get('role', '?')}] {content}")
        for tc in m.get("tool_calls") or []:
            fn = tc.get("function", {})
            parts.append(f"[tool_call] {fn.get('name')} {fn.get('arguments', '')}")
    return "\n".join(parts)


def _chat_payload(body: dict, response: Any) -> dict:
    message: dict[str, Any] = {"role": "assistant", "content": None}
    if isinstance(response, list):
        message["tool_calls"] = [
            {
                "id": f"call_{i}",
                "type": "function",
                "function": {
                    "name": spec["name"],
                    "arguments": json.dumps(spec.get("arguments", {}), ensure_ascii=False),
                },
            }
            for i, spec in enumerate(response)
        ]
    elif isinstance(response, dict):
        message["content"] = json.dumps(response, ensure_ascii=False)
    else:
        message["content"] = str(response)
    prompt_chars = sum(len(m.get("content") or "") for m in body.get("messages", []))
    completion_chars = len(message.get("content") or "")
    return {
        "id": "chatcmpl-mock",
        "object": "chat.completion",
        "model": body.get("model", "mock-model"),
        "choices": [
            {
                "index": 0,
                "message": message,
                "finish_reason": "tool_calls" if message.get("tool_calls") else "stop",
            }
        ],
        "usage": {
            "prompt_tokens": prompt_chars // 4,
            "completion_tokens": completion_chars // 4,
            "total_tokens": (prompt_chars + completion_chars) // 4,
        },
    }


def load_script(path) -> MockConfig:
    """Load a rule script from a JSON/YAML document (file-based scripts cannot use callables)."""
    import yaml

    with open(path, "r", encoding="utf-8") as f:
        doc = yaml.safe_load(f)
    rules = [
        MockRule(
            pattern=r["pattern"],
            response=r.get("tool_calls") or r.get("response", ""),
            once=bool(r.get("once", False)),
            fail_times=int(r.get("fail_times", 0)),
        )
        for r in doc.get("rules", [])
    ]
    return MockConfig(
        rules=rules,
        default_response=doc.get("default_response"),
        strict=bool(doc.get("strict", doc.get("default_response") is None)),
        latency_s=float(doc.get("latency_s", 0.0)),
        embedding_dim=int(doc.get("embedding_dim", 32)),
        pinned_embeddings=doc.get("pinned_embeddings", {}),
    )
