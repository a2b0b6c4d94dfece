"""Shared fixtures: scripted mock endpoints, a toy task, split builders."""

from __future__ import annotations

import re

import pytest

from skillforge.gateway import ModelGateway, ModelEndpoint
from skillforge.mock_server import MockConfig, MockModelServer, MockRule
from skillforge.model import (
    DataInstance,
    DataSplit,
    MetricKind,
    ParserKind,
    SplitKind,
    TaskSpecification,
)

COLORS = ("red", "blue", "green")

TOY_TEMPLATE = """Answer the question using the context.
Context:
{context}
Question: {question}
Answer:"""


def toy_spec() -> TaskSpecification:
    return TaskSpecification(
        name="toyclass",
        description="Name the color of each numbered item.",
        prompt_template=TOY_TEMPLATE,
        parser=ParserKind.RAW,
        metric=MetricKind.ACCURACY,
        generator_model="mock-generator",
    )


def color_of(i: int) -> str:
    return COLORS[i % len(COLORS)]


def make_split(kind: SplitKind, n: int) -> DataSplit:
    return DataSplit(
        kind=kind,
        instances=tuple(
            DataInstance(id=i, question=f"What is the color of item {i}?", target=color_of(i))
            for i in range(n)
        ),
    )


def leveled_generator(text: str) -> str:
    """Scripted generator: answers item i correctly iff i % 4 < LEVEL in the context."""
    level_m = re.search(r"LEVEL (\d+)", text)
    item_m = re.search(r"item (\d+)", text)
    level = int(level_m.group(1)) if level_m else 0
    item = int(item_m.group(1)) if item_m else -1
    if item >= 0 and item % 4 < level:
        return color_of(item)
    return "unknown"


def offline_script(iterations: int) -> list[MockRule]:
    """Meta writes a skill, base bumps the context LEVEL, generator is leveled."""
    rules: list[MockRule] = []
    for k in range(1, iterations + 1):
        rules.append(
            MockRule(
                pattern="Meta-Level Agent",
                response=[
                    {
                        "name": "Write",
                        "arguments": {
                            "file_path": f"iter{k}/.claude/skills/learning-context/SKILL.md",
                            "content": f"## Skill Overview\nGeneration {k}: broaden color coverage.\n",
                        },
                    }
                ],
                once=True,
            )
        )
        rules.append(MockRule(pattern="Meta-Level Agent", response="Skill ready.", once=True))
        rules.append(
            MockRule(
                pattern="Context Engineer",
                response=[
                    {
                        "name": "Write",
                        "arguments": {
                            "file_path": "context/knowledge.md",
                            "content": f"LEVEL {k}\nColor findings for generation {k}.\n",
                        },
                    }
                ],
                once=True,
            )
        )
        rules.append(MockRule(pattern="Context Engineer", response="Context updated.", once=True))
    rules.append(MockRule(pattern="Answer the question", response=leveled_generator))
    return rules


@pytest.fixture
def gateway() -> ModelGateway:
    return ModelGateway(retry_backoff_s=0.0)


@pytest.fixture
def mock_endpoint_factory():
    """Yields a factory(config) -> (server, endpoint); servers stop at teardown."""
    servers: list[MockModelServer] = []

    def factory(config: MockConfig) -> tuple[MockModelServer, ModelEndpoint]:
        server = MockModelServer(config).start()
        servers.append(server)
        return server, ModelEndpoint(base_url=server.base_url, model_id="mock-model")

    yield factory
    for server in servers:
        server.stop()
