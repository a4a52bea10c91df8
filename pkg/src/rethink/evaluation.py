"""Answer normalization, QA metrics, and report aggregation.

All metrics score in [0, 1] per instance; reports aggregate to a percentage
with one decimal, matching the layout used for published comparisons (a model
column followed by one column per dataset).
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .core import MatrixIqInstance
from .errors import (
    EmptyReportError,
    InvalidArgumentError,
    MetricUndefinedError,
)

METRIC_VQA_SOFT = "vqa_soft_accuracy"
METRIC_EXACT = "exact_match"
METRIC_CHOICE = "multiple_choice"
METRIC_KINDS = (METRIC_VQA_SOFT, METRIC_EXACT, METRIC_CHOICE)

VARIANT_MIN_OVER_3 = "min_matches_over_3"
VARIANT_SUBSET_AVERAGED = "subset_averaged"

_ARTICLES = frozenset({"a", "an", "the"})
_STRIP_CHARS = frozenset(".,!?'\"")
_NUMBER_WORDS = {
    "zero": "0", "one": "1", "two": "2", "three": "3", "four": "4",
    "five": "5", "six": "6", "seven": "7", "eight": "8", "nine": "9",
    "ten": "10",
}


def normalize_answer(text: str) -> str:
    """Canonical answer form: lowercase, no ., ! ? ' " chars, articles dropped,
    number words zero..ten mapped to digits, single-spaced."""
    cleaned = "".join(ch for ch in text.lower() if ch not in _STRIP_CHARS)
    tokens = [
        _NUMBER_WORDS.get(token, token)
        for token in cleaned.split()
        if token not in _ARTICLES
    ]
    return " ".join(tokens)


def token_f1(a: str, b: str) -> float:
    """F1 over whitespace tokens of two already-normalized strings."""
    tokens_a = a.split()
    tokens_b = b.split()
    if not tokens_a and not tokens_b:
        return 1.0
    common = Counter(tokens_a) & Counter(tokens_b)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(tokens_a)
    recall = num_same / len(tokens_b)
    return 2 * precision * recall / (precision + recall)


def text_similarity(a: str, b: str) -> float:
    """Token F1 after normalizing both sides; the matrix selection measure."""
    return token_f1(normalize_answer(a), normalize_answer(b))


def vqa_soft_accuracy(
    prediction: str,
    gold_answers: Sequence[tuple[str, int]],
    *,
    subset_averaged: bool = False,
) -> float:
    """Soft accuracy against an answer distribution: min(matches / 3, 1).

    ``subset_averaged`` replays the original protocol exactly: expand the
    distribution to its annotator list and average the score over each
    leave-one-out subset.
    """
    if not gold_answers:
        raise MetricUndefinedError("vqa_soft_accuracy needs at least one gold answer")
    prediction_norm = normalize_answer(prediction)
    if not subset_averaged:
        matches = sum(
            count for text, count in gold_answers if normalize_answer(text) == prediction_norm
        )
        return min(matches / 3.0, 1.0)
    flat = [
        normalize_answer(text) for text, count in gold_answers for _ in range(count)
    ]
    total = 0.0
    for left_out in range(len(flat)):
        matches = sum(
            1 for k, answer in enumerate(flat) if k != left_out and answer == prediction_norm
        )
        total += min(matches / 3.0, 1.0)
    return total / len(flat)


def exact_match(prediction: str, gold: str) -> float:
    """1.0 iff prediction and gold normalize to the same string."""
    if not gold.strip():
        raise MetricUndefinedError("exact_match needs a nonempty gold answer")
    return 1.0 if normalize_answer(prediction) == normalize_answer(gold) else 0.0


def select_choice(prediction: str, options: Sequence[str]) -> int:
    """Pick the option index for a free-form prediction.

    An exact normalized match wins (lowest such index); otherwise the option
    with the highest token F1 against the prediction, ties to the lowest index.
    """
    if not options:
        raise InvalidArgumentError("select_choice needs at least one option")
    prediction_norm = normalize_answer(prediction)
    options_norm = [normalize_answer(option) for option in options]
    for index, option in enumerate(options_norm):
        if option == prediction_norm:
            return index
    best_index = 0
    best_score = -1.0
    for index, option in enumerate(options_norm):
        score = token_f1(prediction_norm, option)
        if score > best_score:
            best_index, best_score = index, score
    return best_index


@dataclass(frozen=True)
class EvalReport:
    """Scores for one dataset under one metric, plus bookkeeping counts."""

    dataset: str
    metric: str
    variant: str
    scores: dict[str, float]
    aggregate: float
    evaluated: int
    failed: int
    skipped: int


def aggregate(
    scores: Mapping[str, float],
    *,
    dataset: str,
    metric: str,
    variant: str = "",
    failed: int = 0,
    skipped: int = 0,
) -> EvalReport:
    """Fold per-instance scores into a percentage report (100 * mean)."""
    if metric not in METRIC_KINDS:
        raise InvalidArgumentError(f"unknown metric kind {metric!r}")
    if not scores:
        raise EmptyReportError(f"no evaluated instances for dataset {dataset!r}")
    for instance_id, score in scores.items():
        if not 0.0 <= score <= 1.0:
            raise InvalidArgumentError(
                f"score for {instance_id!r} is {score}, outside [0, 1]"
            )
    mean = sum(scores.values()) / len(scores)
    return EvalReport(
        dataset=dataset,
        metric=metric,
        variant=variant,
        scores=dict(scores),
        aggregate=100.0 * mean,
        evaluated=len(scores),
        failed=failed,
        skipped=skipped,
    )


def render_report_table(rows: Sequence[tuple[str, Mapping[str, float | None]]]) -> str:
    """Lay out reports like a results table: Model column, one column per dataset.

    ``rows`` maps a model label to {dataset: aggregate percentage or None};
    absent numbers print as ``-``. Percentages print with one decimal.
    """
    if not rows:
        raise EmptyReportError("no rows to render")
    datasets: list[str] = []
    for _, cells in rows:
        for dataset in cells:
            if dataset not in datasets:
                datasets.append(dataset)
    header = ["Model", *datasets]
    body: list[list[str]] = []
    for label, cells in rows:
        rendered = [
            "-" if cells.get(dataset) is None else f"{cells[dataset]:.1f}"
            for dataset in datasets
        ]
        body.append([label, *rendered])
    widths = [
        max(len(row[col]) for row in [header, *body]) for col in range(len(header))
    ]
    lines = []
    for row in [header, *body]:
        lines.append("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
    return "\n".join(lines)


def report_to_json(reports: Sequence[EvalReport]) -> str:
    """Stable machine form of one or more reports (sorted keys, 2-space indent)."""
    payload = [
        {
            "dataset": report.dataset,
            "metric": report.metric,
            "variant": report.variant,
            "aggregate": round(report.aggregate, 10),
            "evaluated": report.evaluated,
            "failed": report.failed,
            "skipped": report.skipped,
            "scores": report.scores,
        }
        for report in reports
    ]
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def random_choice_accuracy(
    instances: Iterable[MatrixIqInstance], *, repeats: int, seed: int
) -> float:
    """Accuracy of picking uniformly among each task's candidates.

    Scores only labeled instances; ``repeats`` full passes give
    ``repeats * len(labeled)`` trials. The analytic expectation for k
    candidates is 1/k, so this is the yardstick reported alongside runs.
    """
    if repeats < 1:
        raise InvalidArgumentError("repeats must be >= 1")
    labeled = [
        instance for instance in instances if instance.gold_candidate_index is not None
    ]
    if not labeled:
        raise EmptyReportError("no labeled instances for the random baseline")
    rng = random.Random(seed)
    hits = 0
    for _ in range(repeats):
        for instance in labeled:
            pick = rng.randrange(len(instance.candidate_images))
            if pick == instance.gold_candidate_index:
                hits += 1
    return hits / (repeats * len(labeled))
