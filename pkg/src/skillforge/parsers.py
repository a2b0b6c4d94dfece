"""Answer extraction from raw generator responses.

Reasoning text routinely contains decoys (example answers, quoted formats),
so every parser takes the LAST well-formed occurrence of its expected
structure.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from .model import ParserKind, split_labels

_DIAGNOSIS_RE = re.compile(r"\[DIAGNOSIS\](.*?)\[/DIAGNOSIS\]", re.DOTALL)
_CHARGE_RE = re.compile(r"\[罪名\](.*?)<eoa>", re.DOTALL)


@dataclass(frozen=True)
class ParsedAnswer:
    kind: ParserKind
    value: str | frozenset[str]
    ok: bool
    detail: str | None = None

    def __post_init__(self) -> None:
        if not self.ok and self.detail is None:
            raise ValueError("failed parses must carry a detail message")

    def text(self) -> str:
        if isinstance(self.value, frozenset):
            return ";".join(sorted(self.value))
        return self.value

    def labels(self) -> frozenset[str]:
        if isinstance(self.value, frozenset):
            return self.value
        return split_labels(self.value)


def _failure(kind: ParserKind, detail: str) -> ParsedAnswer:
    return ParsedAnswer(kind=kind, value="", ok=False, detail=detail)


def _iter_json_objects(raw: str):
    """Yield every parseable {...} span in order of appearance.

    Dangling braces in surrounding prose are skipped rather than allowed to
    swallow later, well-formed objects.
    """
    decoder = json.JSONDecoder()
    idx = 0
    while idx < len(raw):
        start = raw.find("{", idx)
        if start == -1:
            return
        try:
            obj, end = decoder.raw_decode(raw, start)
        except json.JSONDecodeError:
            idx = start + 1
            continue
        if isinstance(obj, dict):
            yield obj
            idx = end
        else:
            idx = start + 1


def _last_final_answer(raw: str) -> dict | None:
    found = None
    for obj in _iter_json_objects(raw):
        if "final_answer" in obj:
            found = obj
    return found


def parse_answer(kind: ParserKind, raw: str) -> ParsedAnswer:
    """Extract the task answer from a raw response according to the parser kind."""
    if kind is ParserKind.RAW:
        return ParsedAnswer(kind=kind, value=raw.strip(), ok=True)

    if kind is ParserKind.JSON_TWO_FIELD:
        obj = _last_final_answer(raw)
        if obj is None:
            return _failure(kind, "no JSON object with a final_answer field")
        return ParsedAnswer(kind=kind, value=str(obj["final_answer"]).strip(), ok=True)

    if kind is ParserKind.JSON_THREE_FIELD:
        obj = _last_final_answer(raw)
        if obj is None:
            return _failure(kind, "no JSON object with a final_answer field")
        value = str(obj["final_answer"]).strip().lower()
        if value not in ("safe", "unsafe"):
            return _failure(kind, f"final_answer must be safe or unsafe, got {value!r}")
        return ParsedAnswer(kind=kind, value=value, ok=True)

    if kind is ParserKind.DIAGNOSIS_TAG:
        matches = _DIAGNOSIS_RE.findall(raw)
        if not matches:
            return _failure(kind, "missing DIAGNOSIS tag")
        return ParsedAnswer(kind=kind, value=matches[-1].strip(), ok=True)

    if kind is ParserKind.CHARGE_TAG:
        matches = _CHARGE_RE.findall(raw)
        if not matches:
            return _failure(kind, "missing 罪名/<eoa> markers")
        labels = split_labels(matches[-1])
        if not labels:
            return _failure(kind, "empty charge list between markers")
        return ParsedAnswer(kind=kind, value=labels, ok=True)

    raise ValueError(f"unknown parser {kind}")
