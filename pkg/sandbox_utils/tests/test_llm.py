"""call_llm contract: shape mirroring, batch ceiling, structured output, retries."""

import pytest
from pydantic import BaseModel, Field

from skillforge.mock_server import MockConfig, MockRule

from utils.llm import MAX_CONCURRENCY, MAX_LLM_CALLS, call_llm


class Analysis(BaseModel):
    x: int = Field(description="a number")


class TestShapes:
    def test_single_prompt_returns_single_string(self, mock_env):
        mock_env()
        assert call_llm("prompt: alpha") == "reply-to-alpha"

    def test_list_returns_list_of_strings_in_order(self, mock_env):
        mock_env()
        out = call_llm([f"prompt: item{i}" for i in range(5)])
        assert out == [f"reply-to-item{i}" for i in range(5)]

    def test_single_with_schema_returns_model_instance(self, mock_env):
        mock_env()
        result = call_llm("structured please", schema=Analysis)
        assert isinstance(result, Analysis) and result.x == 7

    def test_list_with_schema_returns_model_instances(self, mock_env):
        mock_env()
        results = call_llm(["structured a", "structured b"], schema=Analysis)
        assert [r.x for r in results] == [7, 7]


class TestLimits:
    def test_constants_match_the_published_contract(self):
        assert MAX_CONCURRENCY == 50
        assert MAX_LLM_CALLS == 100

    def test_batch_overflow_message(self, mock_env):
        server = mock_env()
        with pytest.raises(ValueError) as excinfo:
            call_llm([f"p{i}" for i in range(101)])
        assert (
            str(excinfo.value)
            == "Number of prompts (101) exceeds maximum allowed per batch (100)"
        )
        assert server.total_requests == 0  # rejected before any call

    def test_batch_of_exactly_100_allowed(self, mock_env):
        mock_env()
        out = call_llm([f"prompt: q{i}" for i in range(100)])
        assert len(out) == 100

    def test_in_flight_never_exceeds_cap(self, mock_env):
        server = mock_env(
            MockConfig(default_response="ok", strict=False, latency_s=0.01)
        )
        call_llm([f"load {i}" for i in range(100)])
        assert server.peak_in_flight <= MAX_CONCURRENCY


class TestRetries:
    def test_transient_failures_recovered_within_three_attempts(self, mock_env):
        server = mock_env(
            MockConfig(rules=[MockRule(pattern="wobbly", response="recovered", fail_times=2)])
        )
        assert call_llm("wobbly request") == "recovered"
        assert server.total_requests == 3

    def test_exhausted_retries_raise(self, mock_env):
        server = mock_env(
            MockConfig(rules=[MockRule(pattern="dead", response="never", fail_times=99)])
        )
        with pytest.raises(RuntimeError, match="after 3 attempts"):
            call_llm("dead endpoint")
        assert server.total_requests == 3


def test_missing_base_url_is_a_clear_error(monkeypatch):
    monkeypatch.delenv("OPENROUTER_API_BASE", raising=False)
    with pytest.raises(RuntimeError, match="OPENROUTER_API_BASE"):
        call_llm("anything")
