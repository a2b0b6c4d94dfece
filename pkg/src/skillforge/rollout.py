"""Generator rollouts: retrieve context per question, infer, parse, score.

Instances run concurrently (the gateway's admission cap throttles the
endpoint); results keep split order. Per-instance faults never abort a
rollout: retrieval failures degrade to empty context, generator failures
are recorded as incorrect with a parse_error.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .gateway import ChatFailure, ChatRequest, ModelEndpoint, ModelGateway
from .metrics import is_instance_correct, score
from .model import (
    DataInstance,
    DataSplit,
    RolloutRecord,
    RolloutSet,
    RolloutSummary,
    TaskSpecification,
)
from .parsers import ParsedAnswer, parse_answer
from .prompts import render_prompt
from .retrieval import RetrievalError, RetrievalProtocol, retrieve

logger = logging.getLogger(__name__)

MODEL_FAILURE = "model failure"


def fill_template(spec: TaskSpecification, context: str, question: str) -> str:
    return render_prompt(spec.prompt_template, {"context": context, "question": question})


def run_instance(
    protocol: RetrievalProtocol,
    spec: TaskSpecification,
    instance: DataInstance,
    gateway: ModelGateway,
    endpoint: ModelEndpoint,
) -> RolloutRecord:
    try:
        context = retrieve(protocol, instance.question)
        retrieval_note = None
    except RetrievalError as exc:
        context = ""
        retrieval_note = str(exc)
        logger.warning("retrieval failed for instance %d: %s", instance.id, exc)

    prompt = fill_template(spec, context, instance.question)
    response = gateway.chat_one(endpoint, ChatRequest(prompt=prompt))
    if isinstance(response, ChatFailure):
        return RolloutRecord(
            id=instance.id,
            question=instance.question,
            llm_answer="",
            target=instance.target,
            is_correct=False,
            raw_response="",
            parse_error=MODEL_FAILURE,
        )
    raw = response if isinstance(response, str) else str(response)
    answer = parse_answer(spec.parser, raw)
    target = instance.target_labels if instance.target_labels is not None else instance.target
    correct = is_instance_correct(spec.metric, answer, target)
    parse_error = answer.detail if not answer.ok else None
    return RolloutRecord(
        id=instance.id,
        question=instance.question,
        llm_answer=answer.text() if answer.ok else "",
        target=instance.target,
        is_correct=correct,
        raw_response=raw,
        parse_error=parse_error,
    )


def summarize(spec: TaskSpecification, records: list[RolloutRecord]) -> RolloutSummary:
    pairs = [(_reparse(spec, r), r.target) for r in records]
    return RolloutSummary(
        n=len(records),
        n_correct=sum(1 for r in records if r.is_correct),
        score=score(spec.metric, pairs),
    )


def _reparse(spec: TaskSpecification, record: RolloutRecord) -> ParsedAnswer:
    """Rebuild a ParsedAnswer from the stored answer text (used for recomputation)."""
    if record.parse_error is not None:
        return ParsedAnswer(kind=spec.parser, value="", ok=False, detail=record.parse_error)
    return ParsedAnswer(kind=spec.parser, value=record.llm_answer, ok=True)


def recompute_summary(spec: TaskSpecification, rollout_set: RolloutSet) -> RolloutSummary:
    return summarize(spec, list(rollout_set.detailed_results))


def rollout(
    artifact_entrypoint: Path,
    spec: TaskSpecification,
    split: DataSplit,
    gateway: ModelGateway,
    endpoint: ModelEndpoint,
    timeout_s: int = 30,
    max_context_chars: int = 400_000,
    persist_path: Path | None = None,
    max_workers: int = 16,
) -> RolloutSet:
    """Roll the generator over a split; optionally persist the result document."""
    if not len(split):
        raise ValueError("cannot roll out an empty split")
    protocol = RetrievalProtocol(
        entrypoint=Path(artifact_entrypoint),
        timeout_s=timeout_s,
        max_context_chars=max_context_chars,
    )
    workers = min(max_workers, len(split))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        records = list(
            pool.map(
                lambda inst: run_instance(protocol, spec, inst, gateway, endpoint),
                split.instances,
            )
        )
    result = RolloutSet(summary=summarize(spec, records), detailed_results=tuple(records))
    if persist_path is not None:
        result.save(persist_path)
    return result
