"""Three-stage orchestration: observe the image, think in text, re-think.

The captioner describes the image; the reasoner turns caption + question into
a rationale ending in a tentative answer; the answerer then re-reads the image
together with that rationale and commits to the final answer. Sequence tasks
stop after thinking and pick the candidate whose caption best matches the
predicted next image.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

from .backends import (
    Backend,
    BackendDescriptor,
    CachingBackend,
    ROLE_ANSWERER,
    ROLE_CAPTIONER,
    ROLE_REASONER,
    ROLES,
    build_backend,
)
from .cache import CallCache
from .core import (
    Caption,
    FinalAnswer,
    ImageRef,
    MatrixIqInstance,
    PipelineTrace,
    QaInstance,
    Rationale,
    STAGE_OBSERVE,
    STAGE_RETHINK,
    STAGE_THINK,
    StageRecord,
    sha256_hex,
    validate_instance,
)
from .errors import (
    ConfigError,
    EmptyCompletionError,
    InvalidArgumentError,
    RethinkError,
    StageFailureError,
)
from .evaluation import normalize_answer, select_choice, text_similarity
from .prompts import (
    Demonstration,
    extract_answer,
    render_observation,
    render_rethinking,
    render_thinking_matrix,
    render_thinking_qa,
)

FALLBACK_FAIL = "fail"
FALLBACK_ANSWER_WITHOUT_RATIONALE = "answer_without_rationale"
FALLBACK_POLICIES = (FALLBACK_FAIL, FALLBACK_ANSWER_WITHOUT_RATIONALE)


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run's outputs (and its config digest)."""

    backends: dict[str, BackendDescriptor]
    demo_count: int = 0
    demo_source: str | None = None
    fallback_policy: str = FALLBACK_FAIL
    concurrency_limit: int = 4
    cache_enabled: bool = True
    cache_dir: str | None = None
    llm_shortcut: bool = False
    caption_instruction: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "backends", dict(self.backends))
        for role in ROLES:
            if role not in self.backends:
                raise ConfigError(f"no backend configured for role {role!r}")
        for role, descriptor in self.backends.items():
            if role not in ROLES:
                raise ConfigError(f"unknown backend role {role!r}")
            if descriptor.role != role:
                raise ConfigError(
                    f"backend {descriptor.backend_id!r} declares role "
                    f"{descriptor.role!r} but is configured as {role!r}"
                )
        if self.demo_count < 0:
            raise ConfigError("demo_count must be >= 0")
        if self.demo_count > 0 and not self.demo_source:
            raise ConfigError("demo_count > 0 needs a demo_source file")
        if self.concurrency_limit < 1:
            raise ConfigError("concurrency_limit must be >= 1")
        if self.fallback_policy not in FALLBACK_POLICIES:
            raise ConfigError(
                f"unknown fallback_policy {self.fallback_policy!r} "
                f"(expected one of {FALLBACK_POLICIES})"
            )


def config_digest(config: RunConfig) -> str:
    """Digest of the canonical JSON form of the config; lands in every trace."""
    canonical = json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))
    return sha256_hex(canonical.encode("utf-8"))


class Runner:
    """Executes instances under one RunConfig.

    ``backends`` may be injected (replay tables, instrumented doubles); by
    default they are built from the config's descriptors. When the cache is
    enabled every backend is wrapped with it.
    """

    def __init__(
        self,
        config: RunConfig,
        backends: Mapping[str, Backend] | None = None,
        cache: CallCache | None = None,
    ):
        self.config = config
        self.config_digest = config_digest(config)
        if config.cache_enabled:
            self.cache: CallCache | None = cache if cache is not None else CallCache(config.cache_dir)
        else:
            self.cache = None
        inner: dict[str, Backend]
        if backends is None:
            inner = {role: build_backend(desc) for role, desc in config.backends.items()}
        else:
            inner = dict(backends)
            for role in ROLES:
                if role not in inner:
                    raise ConfigError(f"injected backends are missing role {role!r}")
        if self.cache is not None:
            self.backends: dict[str, Backend] = {
                role: CachingBackend(backend, self.cache) for role, backend in inner.items()
            }
        else:
            self.backends = inner
        self.demos = self._load_demos()

    def _load_demos(self) -> tuple[Demonstration, ...]:
        if self.config.demo_count == 0:
            return ()
        from .datasets import read_rationale_records

        records = read_rationale_records(self.config.demo_source)
        if len(records) < self.config.demo_count:
            raise ConfigError(
                f"demo_source has {len(records)} records, "
                f"need {self.config.demo_count}"
            )
        demos = []
        for record in records[: self.config.demo_count]:
            try:
                demos.append(
                    Demonstration(
                        caption=record.caption,
                        question=record.question,
                        rationale=record.rationale,
                        answer=record.answer,
                    )
                )
            except InvalidArgumentError as exc:
                raise ConfigError(
                    f"demo_source record {record.instance_id!r} unusable: {exc}"
                ) from exc
        return tuple(demos)

    # -- stages ------------------------------------------------------------

    def observe(
        self, images: Sequence[ImageRef], records: list[StageRecord]
    ) -> list[Caption]:
        """Caption each image in order; any failed caption aborts the instance.

        An empty caption is retried once before it counts as a failure.
        """
        backend = self.backends[ROLE_CAPTIONER]
        prompt = render_observation(self.config.caption_instruction)
        captions: list[Caption] = []
        for image in images:
            outcome, error = self._attempt(backend, prompt, image=image, retry_empty=True)
            if outcome is None:
                records.append(
                    self._failed_record(STAGE_OBSERVE, prompt, backend, error, image)
                )
                raise StageFailureError(STAGE_OBSERVE, error or "captioning failed")
            records.append(self._record(STAGE_OBSERVE, prompt, backend, outcome, image))
            captions.append(
                Caption(
                    image_id=image.id,
                    text=outcome.completion,
                    backend_id=backend.descriptor.backend_id,
                )
            )
        return captions

    def think(
        self, caption: Caption, question: str, records: list[StageRecord]
    ) -> Rationale:
        """Generate a rationale from the caption and question.

        Under fallback_policy=answer_without_rationale, any reasoner failure
        (unavailable, unscripted, empty) yields a degenerate empty rationale
        instead of aborting; the rethink stage then conditions on the caption.
        """
        backend = self.backends[ROLE_REASONER]
        prompt = render_thinking_qa(caption.text, question, self.demos)
        outcome, error = self._attempt(backend, prompt)
        if outcome is None:
            records.append(self._failed_record(STAGE_THINK, prompt, backend, error))
            if self.config.fallback_policy == FALLBACK_ANSWER_WITHOUT_RATIONALE:
                return Rationale(text="", extracted_answer=None, raw_completion="", degenerate=True)
            raise StageFailureError(STAGE_THINK, error or "reasoning failed")
        records.append(self._record(STAGE_THINK, prompt, backend, outcome))
        text, answer = extract_answer(outcome.completion)
        return Rationale(text=text, extracted_answer=answer, raw_completion=outcome.completion)

    def rethink(
        self,
        instance: QaInstance,
        rationale: Rationale,
        records: list[StageRecord],
        caption: Caption | None = None,
    ) -> FinalAnswer:
        """Answer while re-reading the image, conditioned on the rationale.

        A blank rationale (degenerate fallback, or a completion that was all
        marker) borrows the caption text for the rationale slot.
        """
        backend = self.backends[ROLE_ANSWERER]
        slot_text = rationale.text if rationale.text.strip() else (caption.text if caption else "")
        if not slot_text.strip():
            raise StageFailureError(STAGE_RETHINK, "no rationale or caption text to condition on")
        prompt = render_rethinking(instance.question, slot_text)
        outcome, error = self._attempt(backend, prompt, image=instance.image)
        if outcome is None:
            records.append(
                self._failed_record(STAGE_RETHINK, prompt, backend, error, instance.image)
            )
            raise StageFailureError(STAGE_RETHINK, error or "answering failed")
        records.append(self._record(STAGE_RETHINK, prompt, backend, outcome, instance.image))
        return self._final(outcome.completion, instance)

    # -- whole instances ----------------------------------------------------

    def run_qa(self, instance: QaInstance) -> PipelineTrace:
        """Run one visual question through all three stages."""
        records: list[StageRecord] = []
        try:
            caption = self.observe([instance.image], records)[0]
            rationale = self.think(caption, instance.question, records)
            if self.config.llm_shortcut and rationale.extracted_answer:
                final = self._shortcut_final(instance, rationale, caption, records)
            else:
                final = self.rethink(instance, rationale, records, caption=caption)
            return PipelineTrace(
                instance.instance_id, tuple(records), final, self.config_digest
            )
        except StageFailureError as exc:
            return PipelineTrace(
                instance.instance_id, tuple(records), None, self.config_digest, failure=str(exc)
            )

    def _shortcut_final(
        self,
        instance: QaInstance,
        rationale: Rationale,
        caption: Caption,
        records: list[StageRecord],
    ) -> FinalAnswer:
        # Ablation path: trust the reasoner's own answer and skip the answerer
        # call. The rethink record is synthesized (reasoner id, zero latency)
        # so every trace still accounts for how the final answer was chosen.
        slot_text = rationale.text if rationale.text.strip() else caption.text
        prompt = render_rethinking(instance.question, slot_text)
        answer = rationale.extracted_answer or ""
        records.append(
            StageRecord(
                stage=STAGE_RETHINK,
                prompt=prompt,
                backend_id=self.backends[ROLE_REASONER].descriptor.backend_id,
                completion=answer,
                cache_hit=False,
                latency_ms=0,
                image_id=instance.image.id,
            )
        )
        return self._final(answer, instance)

    def run_matrix(self, instance: MatrixIqInstance) -> tuple[PipelineTrace, int | None]:
        """Run one sequence task: caption everything, predict, pick a candidate.

        Context and candidate images are captioned in order; the reasoner
        predicts the next image's description from the context captions; the
        chosen candidate maximizes token-F1 similarity against the prediction
        (ties to the lowest index).
        """
        records: list[StageRecord] = []
        try:
            images = [*instance.context_images, *instance.candidate_images]
            captions = self.observe(images, records)
            split = len(instance.context_images)
            context_captions = captions[:split]
            candidate_captions = captions[split:]
            prompt = render_thinking_matrix([c.text for c in context_captions])
            backend = self.backends[ROLE_REASONER]
            outcome, error = self._attempt(backend, prompt)
            if outcome is None:
                records.append(self._failed_record(STAGE_THINK, prompt, backend, error))
                raise StageFailureError(STAGE_THINK, error or "prediction failed")
            records.append(self._record(STAGE_THINK, prompt, backend, outcome))
            predicted = outcome.completion.strip()
            chosen = _best_candidate(predicted, [c.text for c in candidate_captions])
            final = FinalAnswer(
                raw=outcome.completion,
                normalized=normalize_answer(outcome.completion),
                chosen_index=chosen,
            )
            trace = PipelineTrace(
                instance.instance_id, tuple(records), final, self.config_digest
            )
            return trace, chosen
        except StageFailureError as exc:
            trace = PipelineTrace(
                instance.instance_id, tuple(records), None, self.config_digest, failure=str(exc)
            )
            return trace, None

    def run_many(
        self, instances: Sequence[QaInstance | MatrixIqInstance]
    ) -> list[PipelineTrace]:
        """Run instances concurrently, preserving input order in the result.

        Invalid instances and stage failures become failure-marked traces;
        the run always continues.
        """
        if not instances:
            return []
        workers = min(self.config.concurrency_limit, len(instances))
        if workers == 1:
            return [self._run_one(instance) for instance in instances]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(self._run_one, instances))

    def _run_one(self, instance: QaInstance | MatrixIqInstance) -> PipelineTrace:
        problems = validate_instance(instance)
        if problems:
            return PipelineTrace(
                instance.instance_id or "unidentified-instance",
                (),
                None,
                self.config_digest,
                failure=f"validation: {'; '.join(problems)}",
            )
        if isinstance(instance, MatrixIqInstance):
            return self.run_matrix(instance)[0]
        return self.run_qa(instance)

    # -- helpers -------------------------------------------------------------

    def _attempt(self, backend, prompt, image=None, retry_empty=False):
        try:
            outcome = backend.complete(prompt.rendered, None, image=image)
            if retry_empty and not outcome.completion.strip():
                outcome = backend.complete(prompt.rendered, None, image=image)
            if not outcome.completion.strip():
                raise EmptyCompletionError("backend returned an empty completion")
            return outcome, None
        except RethinkError as exc:
            return None, f"{type(exc).__name__}: {exc}"

    def _record(self, stage, prompt, backend, outcome, image=None) -> StageRecord:
        return StageRecord(
            stage=stage,
            prompt=prompt,
            backend_id=backend.descriptor.backend_id,
            completion=outcome.completion,
            cache_hit=outcome.cache_hit,
            latency_ms=outcome.latency_ms,
            image_id=image.id if image is not None else None,
        )

    def _failed_record(self, stage, prompt, backend, error, image=None) -> StageRecord:
        return StageRecord(
            stage=stage,
            prompt=prompt,
            backend_id=backend.descriptor.backend_id,
            completion="",
            cache_hit=False,
            latency_ms=0,
            image_id=image.id if image is not None else None,
            error=error,
        )

    def _final(self, completion: str, instance: QaInstance) -> FinalAnswer:
        chosen = (
            select_choice(completion, instance.choices)
            if instance.choices is not None
            else None
        )
        return FinalAnswer(
            raw=completion,
            normalized=normalize_answer(completion),
            chosen_index=chosen,
        )


def _best_candidate(predicted: str, candidate_captions: Sequence[str]) -> int:
    best_index = 0
    best_score = -1.0
    for index, caption in enumerate(candidate_captions):
        score = text_similarity(predicted, caption)
        if score > best_score:
            best_index, best_score = index, score
    return best_index
