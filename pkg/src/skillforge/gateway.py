"""Single access point to chat-completion and embedding endpoints.

Enforces, per endpoint: a global in-flight cap shared by every concurrent
caller, a 100-request batch ceiling checked before any network traffic,
up to 3 attempts per item (schema-validation failures count as attempts),
and structured-output validation against a JSON schema. Usage is tallied
into an advisory ledger.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import jsonschema
import numpy as np
import requests

logger = logging.getLogger(__name__)

MAX_CALLS_PER_BATCH = 100
DEFAULT_MAX_CONCURRENCY = 50
DEFAULT_MAX_RETRIES = 3
CHAT_TIMEOUT_S = 120.0
EMBED_TIMEOUT_S = 30.0


class GatewayError(Exception):
    pass


class BatchLimitError(GatewayError):
    pass


@dataclass(frozen=True)
class ModelEndpoint:
    base_url: str
    model_id: str
    api_key: str = ""
    temperature: float = 0.0

    @classmethod
    def from_env(cls, model_id: str | None = None, temperature: float = 0.0) -> "ModelEndpoint":
        return cls(
            base_url=os.getenv("OPENROUTER_API_BASE", ""),
            api_key=os.getenv("OPENROUTER_API_KEY", ""),
            model_id=model_id or os.getenv("SANDBOX_MODEL", ""),
            temperature=temperature,
        )

    def key(self) -> tuple[str, str]:
        return (self.base_url, self.model_id)


@dataclass(frozen=True)
class ChatRequest:
    prompt: str
    schema: dict[str, Any] | None = None
    max_retries: int = DEFAULT_MAX_RETRIES


@dataclass
class ChatFailure:
    error: str

    def __bool__(self) -> bool:
        return False


@dataclass
class UsageLedger:
    """Advisory per-model counters; token counts fall back to a chars/4 estimate."""

    counters: dict[str, dict[str, int]] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, model: str, prompt_tokens: int, completion_tokens: int, failed: bool = False) -> None:
        with self._lock:
            c = self.counters.setdefault(
                model, {"requests": 0, "prompt_tokens": 0, "completion_tokens": 0, "failures": 0}
            )
            c["requests"] += 1
            c["prompt_tokens"] += prompt_tokens
            c["completion_tokens"] += completion_tokens
            if failed:
                c["failures"] += 1

    def totals(self) -> dict[str, dict[str, int]]:
        with self._lock:
            return {m: dict(c) for m, c in self.counters.items()}


def _estimate_tokens(text: str) -> int:
    return len(text) // 4


class ModelGateway:
    """Shared, thread-safe client; one admission semaphore per endpoint."""

    def __init__(
        self,
        max_concurrency: int = DEFAULT_MAX_CONCURRENCY,
        retry_backoff_s: float = 0.5,
    ):
        self.max_concurrency = max_concurrency
        self.retry_backoff_s = retry_backoff_s
        self.ledger = UsageLedger()
        self._semaphores: dict[tuple[str, str], threading.Semaphore] = {}
        self._lock = threading.Lock()
        self._session = requests.Session()
        adapter = requests.adapters.HTTPAdapter(pool_connections=64, pool_maxsize=64)
        self._session.mount("http://", adapter)
        self._session.mount("https://", adapter)

    def _semaphore(self, endpoint: ModelEndpoint) -> threading.Semaphore:
        with self._lock:
            if endpoint.key() not in self._semaphores:
                self._semaphores[endpoint.key()] = threading.Semaphore(self.max_concurrency)
            return self._semaphores[endpoint.key()]

    def _headers(self, endpoint: ModelEndpoint) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if endpoint.api_key:
            headers["Authorization"] = f"Bearer {endpoint.api_key}"
        return headers

    def _post(self, endpoint: ModelEndpoint, path: str, body: dict, timeout: float) -> dict:
        if not endpoint.base_url:
            raise GatewayError(
                "endpoint has no base URL; set OPENROUTER_API_BASE or configure the endpoint"
            )
        url = endpoint.base_url.rstrip("/") + path
        semaphore = self._semaphore(endpoint)
        with semaphore:
            resp = self._session.post(
                url, json=body, headers=self._headers(endpoint), timeout=timeout
            )
        if resp.status_code >= 400:
            raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:2000]}")
        return resp.json()

    # chat

    def chat_messages(
        self,
        endpoint: ModelEndpoint,
        messages: list[dict],
        tools: list[dict] | None = None,
        max_retries: int = DEFAULT_MAX_RETRIES,
    ) -> dict:
        """One conversational call; returns the assistant message dict."""
        body: dict[str, Any] = {
            "model": endpoint.model_id,
            "messages": messages,
            "temperature": endpoint.temperature,
        }
        if tools:
            body["tools"] = tools
        last_error: Exception | None = None
        prompt_est = _estimate_tokens("".join(str(m.get("content") or "") for m in messages))
        for attempt in range(1, max_retries + 1):
            try:
                payload = self._post(endpoint, "/chat/completions", body, CHAT_TIMEOUT_S)
                message = payload["choices"][0]["message"]
                usage = payload.get("usage") or {}
                self.ledger.record(
                    endpoint.model_id,
                    usage.get("prompt_tokens", prompt_est),
                    usage.get("completion_tokens", _estimate_tokens(message.get("content") or "")),
                )
                return message
            except (requests.RequestException, GatewayError, KeyError, ValueError) as exc:
                last_error = exc
                self.ledger.record(endpoint.model_id, prompt_est, 0, failed=True)
                logger.debug("chat attempt %d/%d failed: %r", attempt, max_retries, exc)
                if attempt < max_retries and self.retry_backoff_s:
                    time.sleep(self.retry_backoff_s * attempt)
        raise GatewayError(f"chat failed after {max_retries} attempts: {last_error}")

    def chat_one(self, endpoint: ModelEndpoint, request: ChatRequest) -> str | dict | ChatFailure:
        """One prompt-in/answer-out call with optional structured output."""
        body: dict[str, Any] = {
            "model": endpoint.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": endpoint.temperature,
        }
        if request.schema is not None:
            body["response_format"] = {
                "type": "json_schema",
                "json_schema": {"name": "structured_output", "schema": request.schema},
            }
        prompt_est = _estimate_tokens(request.prompt)
        last_error: Exception | None = None
        for attempt in range(1, request.max_retries + 1):
            try:
                payload = self._post(endpoint, "/chat/completions", body, CHAT_TIMEOUT_S)
                content = payload["choices"][0]["message"].get("content") or ""
                usage = payload.get("usage") or {}
                self.ledger.record(
                    endpoint.model_id,
                    usage.get("prompt_tokens", prompt_est),
                    usage.get("completion_tokens", _estimate_tokens(content)),
                )
                if request.schema is None:
                    return content
                obj = json.loads(content)
                jsonschema.validate(obj, request.schema)
                return obj
            except (
                requests.RequestException,
                GatewayError,
                KeyError,
                ValueError,
                jsonschema.ValidationError,
            ) as exc:
                last_error = exc
                self.ledger.record(endpoint.model_id, prompt_est, 0, failed=True)
                logger.debug("chat_one attempt %d/%d failed: %r", attempt, request.max_retries, exc)
                if attempt < request.max_retries and self.retry_backoff_s:
                    time.sleep(self.retry_backoff_s * attempt)
        return ChatFailure(error=f"failed after {request.max_retries} attempts: {last_error}")

    def chat_batch(
        self,
        endpoint: ModelEndpoint,
        requests_: list[ChatRequest],
        max_concurrency: int | None = None,
    ) -> list[str | dict | ChatFailure]:
        """Positionally aligned batch; rejects oversize batches before any call."""
        if len(requests_) > MAX_CALLS_PER_BATCH:
            raise BatchLimitError(
                f"Number of prompts ({len(requests_)}) exceeds maximum allowed per batch "
                f"({MAX_CALLS_PER_BATCH})"
            )
        if not requests_:
            return []
        workers = min(len(requests_), max_concurrency or self.max_concurrency)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda r: self.chat_one(endpoint, r), requests_))

    # embeddings

    def embed_batch(self, endpoint: ModelEndpoint, texts: list[str]) -> np.ndarray:
        """Embed texts and L2-normalize the rows."""
        if not texts:
            raise GatewayError("embed_batch requires at least one text")
        if any(not t for t in texts):
            raise GatewayError("embed_batch texts must all be non-empty")
        body = {"model": endpoint.model_id, "input": texts}
        last_error: Exception | None = None
        for attempt in range(1, DEFAULT_MAX_RETRIES + 1):
            try:
                payload = self._post(endpoint, "/embeddings", body, EMBED_TIMEOUT_S)
                rows = sorted(payload["data"], key=lambda d: d["index"])
                matrix = np.asarray([r["embedding"] for r in rows], dtype=np.float64)
                if matrix.shape[0] != len(texts):
                    raise GatewayError(
                        f"embedding count {matrix.shape[0]} != input count {len(texts)}"
                    )
                self.ledger.record(
                    endpoint.model_id, sum(_estimate_tokens(t) for t in texts), 0
                )
                norms = np.linalg.norm(matrix, axis=1, keepdims=True)
                norms[norms == 0.0] = 1.0
                return matrix / norms
            except (requests.RequestException, GatewayError, KeyError, ValueError) as exc:
                last_error = exc
                self.ledger.record(endpoint.model_id, 0, 0, failed=True)
                if attempt < DEFAULT_MAX_RETRIES and self.retry_backoff_s:
                    time.sleep(self.retry_backoff_s * attempt)
        raise GatewayError(f"embeddings failed after {DEFAULT_MAX_RETRIES} attempts: {last_error}")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise dot products of row-normalized matrices; shape (|a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("cosine_similarity expects 2-D matrices")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a @ b.T
