"""Fixtures: a deterministic OpenAI-compatible mock endpoint plus env wiring.

The library under test only sees environment variables and the HTTP wire
shape; the in-process mock server from the orchestrator package is test
tooling, not a runtime dependency.
"""

from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from skillforge.mock_server import MockConfig, MockModelServer, MockRule  # noqa: E402


def echo_generator(text: str) -> str:
    """Deterministic content-addressed reply so parity checks are meaningful."""
    marker = text.rsplit("prompt:", 1)
    return f"reply-to-{marker[-1].strip()[:40]}" if len(marker) == 2 else "generic-reply"


@pytest.fixture
def mock_env(monkeypatch):
    """Start a scripted endpoint and point the library's env vars at it."""
    servers = []

    def factory(config: MockConfig | None = None) -> MockModelServer:
        server = MockModelServer(
            config
            or MockConfig(
                rules=[
                    MockRule(pattern=r'"x"\s*:|structured', response={"x": 7}),
                    MockRule(pattern="prompt:", response=echo_generator),
                ],
                default_response="default-reply",
                strict=False,
            )
        ).start()
        servers.append(server)
        monkeypatch.setenv("OPENROUTER_API_BASE", server.base_url)
        monkeypatch.setenv("OPENROUTER_API_KEY", "test-key")
        monkeypatch.setenv("SANDBOX_MODEL", "mock-sandbox-model")
        return server

    yield factory
    for server in servers:
        server.stop()
