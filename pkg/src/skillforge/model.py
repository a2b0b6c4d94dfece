"""Shared domain types: task specs, data splits, context artifacts, skill records, rollouts.

Everything here is an immutable value object; mutation happens by replacement
(`dataclasses.replace`). The evolution loop owns the only mutable aggregate
(`SkillDatabase`) and is its sole writer.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence


class ParserKind(str, Enum):
    JSON_TWO_FIELD = "json-two-field"
    JSON_THREE_FIELD = "json-three-field"
    DIAGNOSIS_TAG = "diagnosis-tag"
    CHARGE_TAG = "charge-tag"
    RAW = "raw"


class MetricKind(str, Enum):
    ACCURACY = "accuracy"
    EXACT_MATCH = "exact-match"
    MICRO_F1 = "micro-f1"
    BINARY_F1 = "binary-f1"


class RecordStatus(str, Enum):
    OK = "ok"
    SKILL_INVALID = "skill-invalid"
    ARTIFACT_INVALID = "artifact-invalid"


class SplitKind(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


_PLACEHOLDER_NAMES = ("context", "question")


@dataclass(frozen=True)
class TaskSpecification:
    """One task bundle: prose description, generator prompt template, parser and metric ids."""

    name: str
    description: str
    prompt_template: str
    parser: ParserKind
    metric: MetricKind
    generator_model: str = ""
    language_note: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["parser"] = self.parser.value
        d["metric"] = self.metric.value
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TaskSpecification":
        return cls(
            name=d["name"],
            description=d["description"],
            prompt_template=d["prompt_template"],
            parser=ParserKind(d["parser"]),
            metric=MetricKind(d["metric"]),
            generator_model=d.get("generator_model", ""),
            language_note=d.get("language_note"),
        )


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}"


def validate_task_spec(spec: TaskSpecification) -> list[Violation]:
    """Check TaskSpecification invariants; violations are data, never exceptions."""
    violations: list[Violation] = []
    if not spec.name.strip():
        violations.append(Violation("name", "must be non-empty"))
    if not spec.description.strip():
        violations.append(Violation("description", "must be non-empty"))
    for placeholder in _PLACEHOLDER_NAMES:
        count = len(re.findall(r"(?<!\{)\{" + placeholder + r"\}(?!\})", spec.prompt_template))
        if count == 0:
            violations.append(
                Violation("prompt_template", f"missing placeholder {{{placeholder}}}")
            )
        elif count > 1:
            violations.append(
                Violation("prompt_template", f"placeholder multiplicity: {{{placeholder}}} appears {count} times")
            )
    if not isinstance(spec.parser, ParserKind):
        violations.append(Violation("parser", "not a known parser kind"))
    if not isinstance(spec.metric, MetricKind):
        violations.append(Violation("metric", "not a known metric kind"))
    return violations


@dataclass(frozen=True)
class DataInstance:
    """One labelled query. `target` keeps the raw text; label-set parsing happens at scoring."""

    id: int
    question: str
    target: str
    target_labels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValueError(f"instance id must be non-negative, got {self.id}")
        if not self.question:
            raise ValueError(f"instance {self.id}: question must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"id": self.id, "question": self.question, "target": self.target}
        if self.target_labels is not None:
            d["target_labels"] = list(self.target_labels)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DataInstance":
        labels = d.get("target_labels")
        return cls(
            id=int(d["id"]),
            question=d["question"],
            target=d["target"],
            target_labels=tuple(labels) if labels is not None else None,
        )


@dataclass(frozen=True)
class DataSplit:
    """An ordered, reproducible list of instances. Order is part of the contract."""

    kind: SplitKind
    instances: tuple[DataInstance, ...]

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for inst in self.instances:
            if inst.id in seen:
                raise ValueError(f"duplicate instance id {inst.id} in {self.kind.value} split")
            seen.add(inst.id)

    def __len__(self) -> int:
        return len(self.instances)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(i.to_dict(), ensure_ascii=False) + "\n" for i in self.instances)

    @classmethod
    def from_jsonl(cls, kind: SplitKind, text: str) -> "DataSplit":
        instances = []
        for n, line in enumerate(text.splitlines()):
            if not line.strip():
                continue
            d = json.loads(line)
            if "id" not in d:
                d["id"] = n
            instances.append(DataInstance.from_dict(d))
        return cls(kind=kind, instances=tuple(instances))


@dataclass(frozen=True)
class ContextArtifact:
    """A workspace directory holding context files plus an executable retrieval entrypoint.

    Paths are workspace-relative; only the workspace manager resolves them.
    """

    root_dir: str
    context_dir: str
    retrieval_entrypoint: str
    validated: bool = False

    def resolve(self, base: Path) -> tuple[Path, Path, Path]:
        """Resolve (root, context_dir, entrypoint) against a workspace base."""
        return (base / self.root_dir, base / self.context_dir, base / self.retrieval_entrypoint)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ContextArtifact":
        return cls(**d)


@dataclass(frozen=True)
class MetricScore:
    value: float
    metric: MetricKind
    n: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"score value {self.value} outside [0, 1]")
        if self.n < 1:
            raise ValueError(f"score over {self.n} instances; need at least 1")

    def to_dict(self) -> dict[str, Any]:
        return {"value": self.value, "metric": self.metric.value, "n": self.n}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MetricScore":
        return cls(value=d["value"], metric=MetricKind(d["metric"]), n=d["n"])


@dataclass(frozen=True)
class SkillRecord:
    """One evolution-history entry: the skill tried at iteration k and how its artifact scored."""

    iteration: int
    skill_dir: str
    artifact: ContextArtifact | None
    train_score: MetricScore | None
    val_score: MetricScore | None
    status: RecordStatus

    def __post_init__(self) -> None:
        if self.iteration < 1:
            raise ValueError("iteration numbering starts at 1")
        has_scores = self.train_score is not None and self.val_score is not None
        if (self.status is RecordStatus.OK) != has_scores:
            raise ValueError("scores must be present exactly when status is ok")

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "skill_dir": self.skill_dir,
            "artifact": self.artifact.to_dict() if self.artifact else None,
            "train_score": self.train_score.to_dict() if self.train_score else None,
            "val_score": self.val_score.to_dict() if self.val_score else None,
            "status": self.status.value,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SkillRecord":
        return cls(
            iteration=d["iteration"],
            skill_dir=d["skill_dir"],
            artifact=ContextArtifact.from_dict(d["artifact"]) if d.get("artifact") else None,
            train_score=MetricScore.from_dict(d["train_score"]) if d.get("train_score") else None,
            val_score=MetricScore.from_dict(d["val_score"]) if d.get("val_score") else None,
            status=RecordStatus(d["status"]),
        )


@dataclass
class SkillDatabase:
    """Ordered iteration history plus the incumbent best record.

    Mutable by design, but only the evolution loop appends; everyone else
    gets read access to an already-settled snapshot.
    """

    records: list[SkillRecord] = field(default_factory=list)
    best: SkillRecord | None = None

    def append(self, record: SkillRecord) -> None:
        expected = len(self.records) + 1
        if record.iteration != expected:
            raise ValueError(f"expected iteration {expected}, got {record.iteration}")
        self.records.append(record)

    def update_best(self, record: SkillRecord) -> bool:
        """Retain the better of incumbent and offspring; incumbent wins ties.

        Returns True when the record becomes the new best.
        """
        if record.status is not RecordStatus.OK or record.val_score is None:
            return False
        if self.best is None or record.val_score.value > self.best.val_score.value:
            self.best = record
            return True
        return False

    def check_invariants(self) -> None:
        for i, rec in enumerate(self.records, start=1):
            if rec.iteration != i:
                raise AssertionError(f"records not contiguous at position {i}")
        ok = [r for r in self.records if r.status is RecordStatus.OK]
        if not ok:
            if self.best is not None:
                raise AssertionError("best set with no ok records")
            return
        top = max(r.val_score.value for r in ok)
        earliest = next(r for r in ok if r.val_score.value == top)
        if self.best is not earliest:
            raise AssertionError("best is not the earliest record with maximal val score")

    def to_dict(self) -> dict[str, Any]:
        return {
            "records": [r.to_dict() for r in self.records],
            "best_iteration": self.best.iteration if self.best else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SkillDatabase":
        records = [SkillRecord.from_dict(r) for r in d["records"]]
        best = None
        if d.get("best_iteration") is not None:
            best = next(r for r in records if r.iteration == d["best_iteration"])
        return cls(records=records, best=best)


@dataclass(frozen=True)
class RolloutRecord:
    """One generator inference with its evaluation outcome."""

    id: int
    question: str
    llm_answer: str
    target: str
    is_correct: bool
    raw_response: str = ""
    parse_error: str | None = None

    def __post_init__(self) -> None:
        if self.parse_error is not None and self.is_correct:
            raise ValueError("a record with a parse error cannot be correct")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "question": self.question,
            "llm_answer": self.llm_answer,
            "target": self.target,
            "is_correct": self.is_correct,
            "raw_response": self.raw_response,
            "parse_error": self.parse_error,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RolloutRecord":
        return cls(
            id=int(d["id"]),
            question=d["question"],
            llm_answer=d["llm_answer"],
            target=d["target"],
            is_correct=bool(d["is_correct"]),
            raw_response=d.get("raw_response", ""),
            parse_error=d.get("parse_error"),
        )


@dataclass(frozen=True)
class RolloutSummary:
    n: int
    n_correct: int
    score: MetricScore

    def to_dict(self) -> dict[str, Any]:
        return {"n": self.n, "n_correct": self.n_correct, "score": self.score.to_dict()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RolloutSummary":
        return cls(n=d["n"], n_correct=d["n_correct"], score=MetricScore.from_dict(d["score"]))


@dataclass(frozen=True)
class RolloutSet:
    """Aggregate of one split's rollouts; the summary is always recomputable from the details."""

    summary: RolloutSummary
    detailed_results: tuple[RolloutRecord, ...]

    def __post_init__(self) -> None:
        if self.summary.n != len(self.detailed_results):
            raise ValueError(
                f"summary covers {self.summary.n} instances but {len(self.detailed_results)} recorded"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "summary": self.summary.to_dict(),
            "detailed_results": [r.to_dict() for r in self.detailed_results],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RolloutSet":
        return cls(
            summary=RolloutSummary.from_dict(d["summary"]),
            detailed_results=tuple(RolloutRecord.from_dict(r) for r in d["detailed_results"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "RolloutSet":
        return cls.from_dict(json.loads(text))

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "RolloutSet":
        return cls.from_json(path.read_text(encoding="utf-8"))


def split_labels(text: str | Sequence[str]) -> frozenset[str]:
    """Parse a raw target or answer into a label set.

    Accepts an already-parsed sequence, a bare `a;b` string (either semicolon
    variant), or a fully tagged `[罪名]a;b<eoa>` answer string.
    """
    if not isinstance(text, str):
        return frozenset(s.strip() for s in text if s.strip())
    m = re.search(r"\[罪名\](.*?)<eoa>", text, flags=re.DOTALL)
    if m:
        text = m.group(1)
    parts = re.split(r"[;；]", text)
    return frozenset(p.strip() for p in parts if p.strip())
