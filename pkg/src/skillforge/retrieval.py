"""Invocation and validation of a context artifact's retrieval entrypoint.

Wire protocol, one process per request: a single JSON document
{"question": "..."} on stdin, a single JSON document {"context": "..."}
on stdout, UTF-8. Anything else (nonzero exit, malformed output, timeout)
is a retrieval error; callers degrade to empty context rather than abort.
"""

from __future__ import annotations

import json
import logging
import os
import subprocess
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 30
DEFAULT_MAX_CONTEXT_CHARS = 400_000
TRUNCATION_MARKER = "\n[context truncated]"


class RetrievalError(Exception):
    pass


@dataclass(frozen=True)
class RetrievalProtocol:
    entrypoint: Path
    timeout_s: int = DEFAULT_TIMEOUT_S
    max_context_chars: int = DEFAULT_MAX_CONTEXT_CHARS


def retrieve(protocol: RetrievalProtocol, question: str) -> str:
    """Run the entrypoint for one question and return its context string."""
    entrypoint = Path(protocol.entrypoint)
    if not entrypoint.is_file():
        raise RetrievalError(f"entrypoint absent: {entrypoint}")
    if not os.access(entrypoint, os.X_OK):
        raise RetrievalError(f"entrypoint not executable: {entrypoint}")
    request = json.dumps({"question": question}, ensure_ascii=False)
    try:
        proc = subprocess.run(
            [str(entrypoint)],
            input=request,
            capture_output=True,
            text=True,
            timeout=protocol.timeout_s,
        )
    except subprocess.TimeoutExpired:
        raise RetrievalError(f"retrieval timed out after {protocol.timeout_s}s")
    except OSError as exc:
        raise RetrievalError(f"could not execute entrypoint: {exc}")
    if proc.returncode != 0:
        raise RetrievalError(
            f"entrypoint exited with code {proc.returncode}: {proc.stderr.strip()[:500]}"
        )
    try:
        response = json.loads(proc.stdout)
    except json.JSONDecodeError:
        raise RetrievalError(f"malformed response (not JSON): {proc.stdout[:200]!r}")
    if not isinstance(response, dict) or not isinstance(response.get("context"), str):
        raise RetrievalError("malformed response: expected a JSON object with a string 'context'")
    context = response["context"]
    if len(context) > protocol.max_context_chars:
        context = context[: protocol.max_context_chars] + TRUNCATION_MARKER
    return context


@dataclass(frozen=True)
class ProbeOutcome:
    question: str
    ok: bool
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    probes: tuple[ProbeOutcome, ...] = ()
    structural_error: str | None = None

    def render(self) -> str:
        lines = ["artifact validation: " + ("PASS" if self.passed else "FAIL")]
        if self.structural_error:
            lines.append(f"  structural: {self.structural_error}")
        for p in self.probes:
            status = "ok" if p.ok else "FAIL"
            lines.append(f"  probe {p.question[:60]!r}: {status} {p.detail}")
        return "\n".join(lines)


def validate_artifact(
    entrypoint: Path, probes: list[str], timeout_s: int = DEFAULT_TIMEOUT_S
) -> ValidationReport:
    """Check the entrypoint exists, is executable, and answers every probe in protocol."""
    if not probes:
        raise ValueError("validation needs at least one probe question")
    entrypoint = Path(entrypoint)
    if not entrypoint.is_file():
        return ValidationReport(passed=False, structural_error="entrypoint absent")
    if not os.access(entrypoint, os.X_OK):
        return ValidationReport(passed=False, structural_error="entrypoint not executable")
    protocol = RetrievalProtocol(entrypoint=entrypoint, timeout_s=timeout_s)
    outcomes = []
    for question in probes:
        try:
            context = retrieve(protocol, question)
            outcomes.append(ProbeOutcome(question, True, f"{len(context)} chars"))
        except RetrievalError as exc:
            outcomes.append(ProbeOutcome(question, False, str(exc)))
    return ValidationReport(passed=all(o.ok for o in outcomes), probes=tuple(outcomes))
