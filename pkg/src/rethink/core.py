"""Shared domain vocabulary: instances, model outputs, stage records, traces.

Everything here is an immutable in-memory value; serialization lives with the
dataset and cache modules. The one cross-cutting convention is the digest
format: every digest in the package is lowercase-hex sha256.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

from .errors import InvalidArgumentError
from .prompts import PromptText

STAGE_OBSERVE = "observe"
STAGE_THINK = "think"
STAGE_RETHINK = "rethink"
STAGES = (STAGE_OBSERVE, STAGE_THINK, STAGE_RETHINK)

_STAGE_RANK = {stage: rank for rank, stage in enumerate(STAGES)}
_DIGEST_RE = re.compile(r"^[0-9a-f]{64}$")


def sha256_hex(data: bytes) -> str:
    """The package-wide digest: sha256 as lowercase hex."""
    return hashlib.sha256(data).hexdigest()


def is_digest(value: str) -> bool:
    return bool(_DIGEST_RE.match(value))


@dataclass(frozen=True, slots=True)
class ImageRef:
    """A reference to one image: stable id, locator (path or URL), optional digest."""

    id: str
    locator: str
    content_digest: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise InvalidArgumentError("ImageRef.id must be nonempty")
        if not self.locator:
            raise InvalidArgumentError("ImageRef.locator must be nonempty")
        if self.content_digest is not None and not is_digest(self.content_digest):
            raise InvalidArgumentError(
                f"ImageRef.content_digest must be 64 lowercase hex chars, got {self.content_digest!r}"
            )


@dataclass(frozen=True, slots=True)
class QaInstance:
    """One visual question: image, question text, and optional gold labels.

    ``gold_answers`` is an ordered answer distribution, (text, count) pairs;
    ``choices`` is present only for multiple-choice datasets.
    """

    instance_id: str
    image: ImageRef
    question: str
    gold_answers: tuple[tuple[str, int], ...] = ()
    choices: tuple[str, ...] | None = None
    gold_choice_index: int | None = None


@dataclass(frozen=True, slots=True)
class MatrixIqInstance:
    """One sequence-completion task: ordered context images and candidates."""

    instance_id: str
    context_images: tuple[ImageRef, ...]
    candidate_images: tuple[ImageRef, ...]
    gold_candidate_index: int | None = None


@dataclass(frozen=True, slots=True)
class Caption:
    """What the captioner said about one image."""

    image_id: str
    text: str
    backend_id: str


@dataclass(frozen=True, slots=True)
class Rationale:
    """The reasoner's output, split at the answer marker.

    ``degenerate`` marks the fallback value used when the reasoner was
    unavailable and the run was configured to answer without a rationale.
    """

    text: str
    extracted_answer: str | None
    raw_completion: str
    degenerate: bool = False


@dataclass(frozen=True, slots=True)
class FinalAnswer:
    """The answerer's verdict; ``chosen_index`` only for multiple choice."""

    raw: str
    normalized: str
    chosen_index: int | None = None


@dataclass(frozen=True)
class StageRecord:
    """One model call as it happened: prompt, backend, completion, timing.

    A failed call is still recorded, with an empty completion and ``error``
    carrying the classified message, so traces account for every attempt.
    """

    stage: str
    prompt: PromptText
    backend_id: str
    completion: str
    cache_hit: bool
    latency_ms: int
    image_id: str | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise InvalidArgumentError(f"unknown stage {self.stage!r}")
        if self.latency_ms < 0:
            raise InvalidArgumentError("latency_ms must be >= 0")


@dataclass(frozen=True)
class PipelineTrace:
    """The full account of one instance's run.

    Exactly one of ``final`` (success) and ``failure`` (a "<stage>: <message>"
    marker) is set. Records appear in stage order: observations, then at most
    one think, then at most one rethink — also on failure paths.
    """

    instance_id: str
    records: tuple[StageRecord, ...]
    final: FinalAnswer | None
    config_digest: str
    failure: str | None = None

    def __post_init__(self) -> None:
        if not self.instance_id:
            raise InvalidArgumentError("PipelineTrace.instance_id must be nonempty")
        if not is_digest(self.config_digest):
            raise InvalidArgumentError("PipelineTrace.config_digest must be a sha256 hex digest")
        if (self.final is None) == (self.failure is None):
            raise InvalidArgumentError(
                "PipelineTrace needs exactly one of final answer or failure marker"
            )
        ranks = [_STAGE_RANK[record.stage] for record in self.records]
        if ranks != sorted(ranks):
            raise InvalidArgumentError("PipelineTrace records out of stage order")
        for stage in (STAGE_THINK, STAGE_RETHINK):
            if sum(1 for record in self.records if record.stage == stage) > 1:
                raise InvalidArgumentError(f"PipelineTrace has more than one {stage} record")


def validate_instance(instance: QaInstance | MatrixIqInstance) -> list[str]:
    """Return human-readable violations; an empty list means the instance is valid."""
    if isinstance(instance, QaInstance):
        return _validate_qa(instance)
    if isinstance(instance, MatrixIqInstance):
        return _validate_matrix(instance)
    raise InvalidArgumentError(f"not an instance type: {type(instance).__name__}")


def _validate_qa(instance: QaInstance) -> list[str]:
    problems: list[str] = []
    if not instance.instance_id:
        problems.append("instance_id is empty")
    if not instance.question.strip():
        problems.append("question is empty")
    elif instance.question != instance.question.strip():
        problems.append("question has leading or trailing whitespace")
    for text, count in instance.gold_answers:
        if not text.strip():
            problems.append("gold answer text is empty")
        if count < 1:
            problems.append(f"gold answer {text!r} has count {count} (must be >= 1)")
    if instance.choices is not None:
        if len(instance.choices) < 2:
            problems.append("choices must offer at least 2 options")
        if any(not choice.strip() for choice in instance.choices):
            problems.append("choices contain an empty option")
    if instance.gold_choice_index is not None:
        if instance.choices is None:
            problems.append("gold_choice_index set without choices")
        elif not 0 <= instance.gold_choice_index < len(instance.choices):
            problems.append(
                f"gold_choice_index {instance.gold_choice_index} out of range "
                f"for {len(instance.choices)} choices"
            )
    return problems


def _validate_matrix(instance: MatrixIqInstance) -> list[str]:
    problems: list[str] = []
    if not instance.instance_id:
        problems.append("instance_id is empty")
    for name, images in (
        ("context_images", instance.context_images),
        ("candidate_images", instance.candidate_images),
    ):
        if not images:
            problems.append(f"{name} is empty")
        elif len(images) < 2:
            problems.append(f"{name} needs at least 2 images, has {len(images)}")
    if instance.gold_candidate_index is not None and not (
        0 <= instance.gold_candidate_index < len(instance.candidate_images)
    ):
        problems.append(
            f"gold_candidate_index {instance.gold_candidate_index} out of range "
            f"for {len(instance.candidate_images)} candidates"
        )
    return problems
