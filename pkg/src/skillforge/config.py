"""Run configuration: one YAML document per experiment, env vars override secrets only."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .evolution import Limits, RunConfig
from .gateway import DEFAULT_MAX_CONCURRENCY, ModelEndpoint
from .model import TaskSpecification

PACKAGED_TASKS = ("finer", "uspto50k", "symptom2disease", "lawbench", "aegis2")


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    model: str = ""
    base_url: str | None = None
    temperature: float = 0.0

    def resolve(self) -> ModelEndpoint:
        return ModelEndpoint(
            base_url=self.base_url or os.getenv("OPENROUTER_API_BASE", ""),
            api_key=os.getenv("OPENROUTER_API_KEY", ""),
            model_id=self.model,
            temperature=self.temperature,
        )


@dataclass(frozen=True)
class CliConfig:
    workspace: str
    task_spec: str
    run: RunConfig = RunConfig()
    data: dict[str, str] = field(default_factory=dict)
    agentic: EndpointConfig = EndpointConfig()
    generator: EndpointConfig = EndpointConfig()
    embedding: EndpointConfig = EndpointConfig(model="text-embedding-3-small")
    sandbox_model: str = ""
    limits: Limits = Limits()
    max_concurrency: int = DEFAULT_MAX_CONCURRENCY
    mock_script: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "workspace": self.workspace,
            "task_spec": self.task_spec,
            "run": asdict(self.run),
            "data": dict(self.data),
            "endpoints": {
                "agentic": asdict(self.agentic),
                "generator": asdict(self.generator),
                "embedding": asdict(self.embedding),
                "sandbox_model": self.sandbox_model,
            },
            "limits": asdict(self.limits),
            "max_concurrency": self.max_concurrency,
            "mock": {"script": self.mock_script},
        }


def load_task_spec(ref: str) -> TaskSpecification:
    """Load a task bundle from a file path or a packaged task name."""
    path = Path(ref)
    if path.is_file():
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    elif ref in PACKAGED_TASKS:
        text = resources.files("skillforge.assets.tasks").joinpath(f"{ref}.yaml").read_text()
        doc = yaml.safe_load(text)
    else:
        raise ConfigError(f"task spec not found: {ref!r} (not a file, not a packaged task)")
    return TaskSpecification.from_dict(doc)


def load_config(path: str | Path) -> CliConfig:
    """Load and validate a run config; relative paths resolve against the config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    here = path.parent.absolute()

    def absolutize(p: str) -> str:
        candidate = Path(p)
        return str(candidate if candidate.is_absolute() else here / candidate)

    try:
        endpoints = doc.get("endpoints", {})
        task_spec = doc["task_spec"]
        if task_spec not in PACKAGED_TASKS:
            task_spec = absolutize(task_spec)
        mock_script = (doc.get("mock") or {}).get("script")
        config = CliConfig(
            workspace=absolutize(doc["workspace"]),
            task_spec=task_spec,
            run=RunConfig(**doc.get("run", {})),
            data={k: absolutize(str(v)) for k, v in (doc.get("data") or {}).items()},
            agentic=EndpointConfig(**endpoints.get("agentic", {})),
            generator=EndpointConfig(**endpoints.get("generator", {})),
            embedding=EndpointConfig(**endpoints.get("embedding", {"model": "text-embedding-3-small"})),
            sandbox_model=os.getenv("SANDBOX_MODEL") or endpoints.get("sandbox_model", ""),
            limits=Limits(**doc.get("limits", {})),
            max_concurrency=int(doc.get("max_concurrency", DEFAULT_MAX_CONCURRENCY)),
            mock_script=absolutize(mock_script) if mock_script else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}")
    _check_paths(config)
    return config


def _check_paths(config: CliConfig) -> None:
    if config.task_spec not in PACKAGED_TASKS and not Path(config.task_spec).is_file():
        raise ConfigError(f"task spec path does not exist: {config.task_spec}")
    for name, p in config.data.items():
        if not Path(p).is_file():
            raise ConfigError(f"data split {name!r} path does not exist: {p}")
    if config.mock_script and not Path(config.mock_script).is_file():
        raise ConfigError(f"mock script does not exist: {config.mock_script}")


def require_api_key(config: CliConfig) -> None:
    """Real endpoints need a key; the scripted mock does not."""
    if config.mock_script:
        return
    if not os.getenv("OPENROUTER_API_KEY"):
        raise ConfigError("OPENROUTER_API_KEY is not set and no mock script is configured")
