"""Observe / think / re-think: a pipeline that lets a text-only reasoner guide
a vision-language model at inference time, with deterministic replay."""

from .backends import (
    BackendDescriptor,
    CallOutcome,
    DecodingParams,
    HttpBackend,
    ReplayBackend,
    RetryPolicy,
    ScriptedBackend,
    ScriptEntry,
    answer_with_context,
    caption_image,
    complete_text,
    replay_backends,
)
from .cache import CacheEntry, CacheStats, CallCache, key_of
from .core import (
    Caption,
    FinalAnswer,
    ImageRef,
    MatrixIqInstance,
    PipelineTrace,
    QaInstance,
    Rationale,
    StageRecord,
    validate_instance,
)
from .datasets import (
    DatasetManifest,
    ExportResult,
    RationaleRecord,
    export_rationales,
    load_matrix,
    load_qa,
    read_trace,
    read_traces,
    write_trace,
    write_traces,
)
from .evaluation import (
    EvalReport,
    aggregate,
    exact_match,
    normalize_answer,
    random_choice_accuracy,
    select_choice,
    token_f1,
    vqa_soft_accuracy,
)
from .pipeline import RunConfig, Runner, config_digest
from .prompts import (
    Demonstration,
    PromptTemplate,
    PromptText,
    extract_answer,
    render_observation,
    render_rethinking,
    render_thinking_matrix,
    render_thinking_qa,
)

__version__ = "0.1.0"
