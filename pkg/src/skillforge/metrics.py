"""Scoring for generator answers: accuracy, chemistry exact-match, micro-F1, binary-F1.

Conventions pinned here because they change scores:
  - unparsed answers are wrong; for set metrics they contribute zero predicted
    labels, for binary-F1 they count as a negative prediction
  - F1 with no true positives and any FP/FN is 0.0; with nothing predicted and
    nothing present it is 1.0
"""

from __future__ import annotations

import re
from typing import Sequence

from .model import MetricKind, MetricScore, split_labels
from .parsers import ParsedAnswer

_ATOM_MAP_RE = re.compile(r":\d+\]")


def normalize_text(s: str) -> str:
    """Case-insensitive, whitespace-normalized canonical form."""
    return " ".join(s.split()).lower()


def normalize_reactants(s: str) -> tuple[str, ...]:
    """Canonical form for a reactant-list answer.

    Strips atom-map suffixes (`[CH3:7]` -> `[CH3]`), then treats the
    period-separated reactants as an order-insensitive multiset.
    """
    stripped = _ATOM_MAP_RE.sub("]", s.strip())
    parts = [p.strip() for p in stripped.split(".") if p.strip()]
    return tuple(sorted(parts))


def is_instance_correct(metric: MetricKind, answer: ParsedAnswer, target) -> bool:
    """Per-instance correctness; for set metrics this is exact set equality."""
    if not answer.ok:
        return False
    if metric is MetricKind.ACCURACY:
        return normalize_text(answer.text()) == normalize_text(_as_text(target))
    if metric is MetricKind.EXACT_MATCH:
        return normalize_reactants(answer.text()) == normalize_reactants(_as_text(target))
    if metric is MetricKind.MICRO_F1:
        return answer.labels() == split_labels(target)
    if metric is MetricKind.BINARY_F1:
        return normalize_text(answer.text()) == normalize_text(_as_text(target))
    raise ValueError(f"unknown metric {metric}")


def score(metric: MetricKind, pairs: Sequence[tuple[ParsedAnswer, "str | Sequence[str]"]]) -> MetricScore:
    """Aggregate a list of (parsed answer, target) pairs into one score."""
    if not pairs:
        raise ValueError("cannot score an empty pair list")
    if metric in (MetricKind.ACCURACY, MetricKind.EXACT_MATCH):
        n_correct = sum(1 for a, t in pairs if is_instance_correct(metric, a, t))
        value = n_correct / len(pairs)
    elif metric is MetricKind.MICRO_F1:
        value = _micro_f1(pairs)
    elif metric is MetricKind.BINARY_F1:
        value = _binary_f1(pairs)
    else:
        raise ValueError(f"unknown metric {metric}")
    return MetricScore(value=value, metric=metric, n=len(pairs))


def _as_text(target) -> str:
    if isinstance(target, str):
        return target
    return ";".join(target)


def _micro_f1(pairs) -> float:
    tp = fp = fn = 0
    for answer, target in pairs:
        predicted = answer.labels() if answer.ok else frozenset()
        actual = split_labels(target)
        tp += len(predicted & actual)
        fp += len(predicted - actual)
        fn += len(actual - predicted)
    return _f1_from_counts(tp, fp, fn)


def _binary_f1(pairs, positive: str = "unsafe") -> float:
    tp = fp = fn = 0
    for answer, target in pairs:
        predicted_positive = answer.ok and normalize_text(answer.text()) == positive
        actual_positive = normalize_text(_as_text(target)) == positive
        if predicted_positive and actual_positive:
            tp += 1
        elif predicted_positive:
            fp += 1
        elif actual_positive:
            fn += 1
    return _f1_from_counts(tp, fp, fn)


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp == 0:
        return 1.0 if fp == 0 and fn == 0 else 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)
