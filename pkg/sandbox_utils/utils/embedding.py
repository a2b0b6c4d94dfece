"""Embedding similarity helper for workspace scripts.

Talks to the OpenAI-compatible /embeddings endpoint configured through the
environment; the embedding model id is pinned but overridable with
SANDBOX_EMBEDDING_MODEL so deterministic local endpoints can serve tests.
"""

from __future__ import annotations

import os
from typing import List

import numpy as np
import requests
from numpy.typing import NDArray

EMBEDDING_MODEL = "text-embedding-3-small"
REQUEST_TIMEOUT_S = 30.0
RETRY_ATTEMPTS = 3


def _embed(texts: List[str]) -> NDArray[np.float64]:
    base_url = os.getenv("OPENROUTER_API_BASE", "")
    if not base_url:
        raise RuntimeError("OPENROUTER_API_BASE is not set")
    api_key = os.getenv("OPENROUTER_API_KEY", "")
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    body = {
        "model": os.getenv("SANDBOX_EMBEDDING_MODEL", EMBEDDING_MODEL),
        "input": texts,
    }
    last_error = None
    for _ in range(RETRY_ATTEMPTS):
        try:
            resp = requests.post(
                f"{base_url.rstrip('/')}/embeddings", json=body, headers=headers,
                timeout=REQUEST_TIMEOUT_S,
            )
            resp.raise_for_status()
            rows = sorted(resp.json()["data"], key=lambda d: d["index"])
            return np.array([r["embedding"] for r in rows], dtype=np.float64)
        except Exception as exc:  # noqa: BLE001
            last_error = exc
    raise RuntimeError(f"embedding call failed after {RETRY_ATTEMPTS} attempts: {last_error}")


def compute_embedding_similarity(
    strings_a: List[str],
    strings_b: List[str],
) -> NDArray[np.float64]:
    """Compute cosine similarity between embeddings of two lists of strings.

    Args:
        strings_a: First list of strings
        strings_b: Second list of strings

    Returns:
        A 2D numpy array of shape (len(strings_a), len(strings_b)) containing
        cosine similarity scores between each pair of strings.
    """
    if not strings_a or not strings_b:
        raise ValueError("both string lists must be non-empty")

    embeddings_a = _embed(strings_a)
    embeddings_b = _embed(strings_b)

    # Normalize, then dot product (cosine similarity for normalized vectors)
    embeddings_a_norm = embeddings_a / np.linalg.norm(embeddings_a, axis=1, keepdims=True)
    embeddings_b_norm = embeddings_b / np.linalg.norm(embeddings_b, axis=1, keepdims=True)

    return embeddings_a_norm @ embeddings_b_norm.T
