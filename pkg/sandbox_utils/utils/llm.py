"""Synchronous LLM call helper for workspace scripts.

Reads the endpoint from the environment (SANDBOX_MODEL, OPENROUTER_API_KEY,
OPENROUTER_API_BASE) and speaks the OpenAI-compatible chat-completions wire
shape at temperature 0. Supports single or batch prompts and optional
structured output through a Pydantic schema.
"""

from __future__ import annotations

import asyncio
import json
import os
from typing import List, Type, TypeVar, Union

import requests
from pydantic import BaseModel, Field

T = TypeVar("T", bound=BaseModel)

MAX_CONCURRENCY = 50
MAX_LLM_CALLS = 100
RETRY_ATTEMPTS = 3
REQUEST_TIMEOUT_S = 120.0


class TextResponse(BaseModel):
    """Simple text response from LLM."""

    response: str = Field(description="The LLM's response text")


def _endpoint() -> tuple[str, str, str]:
    base_url = os.getenv("OPENROUTER_API_BASE", "")
    if not base_url:
        raise RuntimeError("OPENROUTER_API_BASE is not set")
    return base_url.rstrip("/"), os.getenv("OPENROUTER_API_KEY", ""), os.getenv("SANDBOX_MODEL", "")


def _post_chat(prompt: str, schema: Type[BaseModel]) -> BaseModel:
    base_url, api_key, model = _endpoint()
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    body = {
        "model": model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": 0,
    }
    plain_text = schema is TextResponse
    if not plain_text:
        body["response_format"] = {
            "type": "json_schema",
            "json_schema": {"name": "structured_output", "schema": schema.model_json_schema()},
        }
    last_error: Exception | None = None
    for attempt in range(RETRY_ATTEMPTS):
        try:
            resp = requests.post(
                f"{base_url}/chat/completions", json=body, headers=headers, timeout=REQUEST_TIMEOUT_S
            )
            resp.raise_for_status()
            content = resp.json()["choices"][0]["message"].get("content") or ""
            if plain_text:
                return TextResponse(response=content)
            return schema.model_validate(json.loads(content))
        except Exception as exc:  # noqa: BLE001 - every failure kind counts as one attempt
            last_error = exc
    raise RuntimeError(f"LLM call failed after {RETRY_ATTEMPTS} attempts: {last_error}")


async def call_llm_async(prompts: List[str], schema: Type[BaseModel]) -> List[T]:
    """Call llms with structured output.

    Args:
        prompts: List of prompts to send to the LLM
        schema: Pydantic BaseModel class defining the output structure

    Returns:
        List of instances of the schema class with LLM outputs

    Raises:
        ValueError: If batch limit is exceeded
    """
    if len(prompts) > MAX_LLM_CALLS:
        raise ValueError(
            f"Number of prompts ({len(prompts)}) exceeds maximum allowed per batch ({MAX_LLM_CALLS})"
        )
    semaphore = asyncio.Semaphore(MAX_CONCURRENCY)

    async def process_single(prompt: str) -> T:
        async with semaphore:
            return await asyncio.to_thread(_post_chat, prompt, schema)

    return await asyncio.gather(*[process_single(p) for p in prompts])


def call_llm(
    prompts: Union[str, List[str]],
    schema: Type[BaseModel] = None,
) -> Union[str, List[str], BaseModel, List[BaseModel]]:
    """Synchronous wrapper for LLM calls. Supports both single and batch prompts.

    Args:
        prompts: Single prompt string or list of prompts
        schema: Optional Pydantic BaseModel class. If None, returns plain text responses.

    Returns:
        - If prompts is a string and schema is None: returns string
        - If prompts is a string and schema is provided: returns schema instance
        - If prompts is a list and schema is None: returns list of strings
        - If prompts is a list and schema is provided: returns list of schema instances
    """
    is_single = isinstance(prompts, str)
    prompt_list = [prompts] if is_single else list(prompts)
    use_schema = schema if schema is not None else TextResponse
    results = asyncio.run(call_llm_async(prompt_list, use_schema))
    if schema is None:
        results = [r.response for r in results]
    return results[0] if is_single else results
