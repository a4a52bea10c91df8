"""Dataset loading, trace serialization, and rationale export.

Loaders normalize several on-disk layouts into the shared instance types and
always yield a deterministic order (string sort by instance id). Malformed
records raise :class:`LoadError` naming file and offset; a referenced image
file that is merely missing logs a warning and keeps the instance, so runs
can be validated before the images are synced.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .core import (
    FinalAnswer,
    ImageRef,
    MatrixIqInstance,
    PipelineTrace,
    QaInstance,
    STAGE_OBSERVE,
    STAGE_THINK,
    StageRecord,
    sha256_hex,
)
from .errors import InvalidArgumentError, LoadError, OutputError
from .prompts import PromptText, extract_answer

logger = logging.getLogger(__name__)

FORMAT_UNIFIED = "unified_jsonl"
FORMAT_VQA_V2 = "vqa_v2"
FORMAT_OKVQA = "okvqa"
FORMAT_GQA = "gqa"
FORMAT_AOKVQA = "aokvqa"
FORMAT_MATRIX = "matrix_dir"

QA_FORMATS = (FORMAT_UNIFIED, FORMAT_VQA_V2, FORMAT_OKVQA, FORMAT_GQA, FORMAT_AOKVQA)
FORMATS = QA_FORMATS + (FORMAT_MATRIX,)


@dataclass(frozen=True, slots=True)
class DatasetManifest:
    """Where a dataset lives and how much of it to take."""

    name: str
    format: str
    root: str
    split: str = ""
    limit: int | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.name:
            raise InvalidArgumentError("dataset name must be nonempty")
        if self.format not in FORMATS:
            raise InvalidArgumentError(
                f"unknown dataset format {self.format!r} (expected one of {FORMATS})"
            )
        if self.limit is not None and self.limit < 1:
            raise InvalidArgumentError("limit must be >= 1 when given")


def load_qa(manifest: DatasetManifest) -> list[QaInstance]:
    """Load a QA dataset into deterministic, optionally subsampled order."""
    if manifest.format == FORMAT_MATRIX:
        raise InvalidArgumentError("matrix_dir datasets load via load_matrix")
    root = Path(manifest.root)
    if manifest.format == FORMAT_UNIFIED:
        instances = _load_unified(manifest)
    elif manifest.format in (FORMAT_VQA_V2, FORMAT_OKVQA):
        instances = _load_vqa_style(manifest, root)
    elif manifest.format == FORMAT_GQA:
        instances = _load_gqa(manifest, root)
    else:
        instances = _load_aokvqa(manifest, root)
    return _deterministic_subset(instances, manifest.limit, manifest.seed)


def load_matrix(manifest: DatasetManifest) -> list[MatrixIqInstance]:
    """Load a directory of sequence tasks (one subdirectory per task)."""
    if manifest.format != FORMAT_MATRIX:
        raise InvalidArgumentError(f"load_matrix needs format={FORMAT_MATRIX!r}")
    root = Path(manifest.root)
    if not root.is_dir():
        raise LoadError(f"dataset root {root} is not a directory")
    instances: list[MatrixIqInstance] = []
    for task_dir in sorted(path for path in root.iterdir() if path.is_dir()):
        contexts = _numbered_images(task_dir, "c")
        candidates = _numbered_images(task_dir, "a")
        if len(contexts) < 2:
            raise LoadError(
                f"{task_dir}: needs at least 2 context images (c1..cN), found {len(contexts)}"
            )
        if len(candidates) < 2:
            raise LoadError(
                f"{task_dir}: needs at least 2 candidate images (a1..aM), found {len(candidates)}"
            )
        gold = _read_matrix_answer(task_dir, len(candidates))
        instances.append(
            MatrixIqInstance(
                instance_id=task_dir.name,
                context_images=tuple(
                    ImageRef(id=f"{task_dir.name}/{path.stem}", locator=str(path))
                    for path in contexts
                ),
                candidate_images=tuple(
                    ImageRef(id=f"{task_dir.name}/{path.stem}", locator=str(path))
                    for path in candidates
                ),
                gold_candidate_index=gold,
            )
        )
    return _deterministic_subset(instances, manifest.limit, manifest.seed)


_NUMBERED = {
    prefix: re.compile(rf"^{prefix}(\d+)\.(png|jpg|jpeg)$", re.IGNORECASE)
    for prefix in ("c", "a")
}


def _numbered_images(task_dir: Path, prefix: str) -> list[Path]:
    found: list[tuple[int, Path]] = []
    for path in task_dir.iterdir():
        match = _NUMBERED[prefix].match(path.name)
        if match:
            found.append((int(match.group(1)), path))
    return [path for _, path in sorted(found)]


def _read_matrix_answer(task_dir: Path, candidate_count: int) -> int | None:
    answer_path = task_dir / "answer.txt"
    if not answer_path.exists():
        return None
    text = answer_path.read_text(encoding="utf-8").strip()
    try:
        one_based = int(text)
    except ValueError:
        raise LoadError(f"{answer_path}: expected a 1-based candidate index, got {text!r}") from None
    if not 1 <= one_based <= candidate_count:
        raise LoadError(
            f"{answer_path}: index {one_based} out of range for {candidate_count} candidates"
        )
    return one_based - 1


def _load_unified(manifest: DatasetManifest) -> list[QaInstance]:
    root = Path(manifest.root)
    if root.is_dir():
        path = root / (f"{manifest.split}.jsonl" if manifest.split else "data.jsonl")
    else:
        path = root
    if not path.is_file():
        raise LoadError(f"no dataset file at {path}")
    base = path.parent
    instances: list[QaInstance] = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LoadError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            instances.append(_unified_instance(row, base, path, lineno))
    return instances


def _unified_instance(row: object, base: Path, path: Path, lineno: int) -> QaInstance:
    where = f"{path}:{lineno}"
    if not isinstance(row, dict):
        raise LoadError(f"{where}: record is not an object")
    instance_id = _field(row, "id", str, where)
    image_rel = _field(row, "image", str, where)
    question = _field(row, "question", str, where).strip()
    answers = row.get("answers", [])
    if not isinstance(answers, list) or any(not isinstance(a, str) for a in answers):
        raise LoadError(f"{where}: field 'answers' must be a list of strings")
    choices = row.get("choices")
    if choices is not None and (
        not isinstance(choices, list) or any(not isinstance(c, str) for c in choices)
    ):
        raise LoadError(f"{where}: field 'choices' must be a list of strings")
    correct = row.get("correct_choice")
    if correct is not None:
        if not isinstance(correct, int) or isinstance(correct, bool):
            raise LoadError(f"{where}: field 'correct_choice' must be an integer")
        if choices is None or not 0 <= correct < len(choices):
            raise LoadError(f"{where}: field 'correct_choice' out of range")
    locator = image_rel if Path(image_rel).is_absolute() else str(base / image_rel)
    _warn_if_missing(locator, instance_id)
    return QaInstance(
        instance_id=instance_id,
        image=ImageRef(id=row.get("image_id") or image_rel, locator=locator),
        question=question,
        gold_answers=_fold_answers(answers),
        choices=tuple(choices) if choices is not None else None,
        gold_choice_index=correct,
    )


def _load_vqa_style(manifest: DatasetManifest, root: Path) -> list[QaInstance]:
    questions_path = _single_file(root, "questions", manifest.split)
    annotations_path = _single_file(root, "annotations", manifest.split, required=False)
    questions_doc = _read_json(questions_path)
    if not isinstance(questions_doc, dict) or "questions" not in questions_doc:
        raise LoadError(f"{questions_path}: missing field 'questions'")
    annotations: dict[object, list[str]] = {}
    if annotations_path is not None:
        annotations_doc = _read_json(annotations_path)
        if not isinstance(annotations_doc, dict) or "annotations" not in annotations_doc:
            raise LoadError(f"{annotations_path}: missing field 'annotations'")
        for position, entry in enumerate(annotations_doc["annotations"]):
            where = f"{annotations_path}: annotation #{position}"
            if not isinstance(entry, dict):
                raise LoadError(f"{where}: not an object")
            qid = _field(entry, "question_id", int, where)
            raw_answers = entry.get("answers", [])
            if not isinstance(raw_answers, list):
                raise LoadError(f"{where}: field 'answers' must be a list")
            texts: list[str] = []
            for answer in raw_answers:
                if not isinstance(answer, dict) or not isinstance(answer.get("answer"), str):
                    raise LoadError(f"{where}: malformed entry in field 'answers'")
                texts.append(answer["answer"])
            annotations[qid] = texts
    instances: list[QaInstance] = []
    for position, entry in enumerate(questions_doc["questions"]):
        where = f"{questions_path}: question #{position}"
        if not isinstance(entry, dict):
            raise LoadError(f"{where}: not an object")
        qid = _field(entry, "question_id", int, where)
        image_id = _field(entry, "image_id", int, where)
        question = _field(entry, "question", str, where).strip()
        if manifest.split:
            image_name = f"COCO_{manifest.split}_{image_id:012d}.jpg"
        else:
            image_name = f"{image_id:012d}.jpg"
        locator = str(root / "images" / image_name)
        _warn_if_missing(locator, str(qid))
        instances.append(
            QaInstance(
                instance_id=str(qid),
                image=ImageRef(id=str(image_id), locator=locator),
                question=question,
                gold_answers=_fold_answers(annotations.get(qid, [])),
            )
        )
    return instances


def _load_gqa(manifest: DatasetManifest, root: Path) -> list[QaInstance]:
    questions_path = _single_file(root, "questions", manifest.split)
    doc = _read_json(questions_path)
    if not isinstance(doc, dict):
        raise LoadError(f"{questions_path}: expected an object keyed by question id")
    instances: list[QaInstance] = []
    for qid, entry in doc.items():
        where = f"{questions_path}: question {qid!r}"
        if not isinstance(entry, dict):
            raise LoadError(f"{where}: not an object")
        image_id = _field(entry, "imageId", str, where)
        question = _field(entry, "question", str, where).strip()
        answer = _field(entry, "answer", str, where)
        locator = str(root / "images" / f"{image_id}.jpg")
        _warn_if_missing(locator, qid)
        instances.append(
            QaInstance(
                instance_id=str(qid),
                image=ImageRef(id=image_id, locator=locator),
                question=question,
                gold_answers=((answer, 1),),
            )
        )
    return instances


def _load_aokvqa(manifest: DatasetManifest, root: Path) -> list[QaInstance]:
    listing_path = _single_file(root, "", manifest.split)
    doc = _read_json(listing_path)
    if not isinstance(doc, list):
        raise LoadError(f"{listing_path}: expected a JSON array of records")
    instances: list[QaInstance] = []
    for position, entry in enumerate(doc):
        where = f"{listing_path}: record #{position}"
        if not isinstance(entry, dict):
            raise LoadError(f"{where}: not an object")
        qid = _field(entry, "question_id", str, where)
        image_id = _field(entry, "image_id", int, where)
        question = _field(entry, "question", str, where).strip()
        choices = entry.get("choices")
        if not isinstance(choices, list) or any(not isinstance(c, str) for c in choices):
            raise LoadError(f"{where}: field 'choices' must be a list of strings")
        correct = entry.get("correct_choice_idx")
        if correct is not None and (
            not isinstance(correct, int)
            or isinstance(correct, bool)
            or not 0 <= correct < len(choices)
        ):
            raise LoadError(f"{where}: field 'correct_choice_idx' out of range")
        direct = entry.get("direct_answers", [])
        if not isinstance(direct, list) or any(not isinstance(a, str) for a in direct):
            raise LoadError(f"{where}: field 'direct_answers' must be a list of strings")
        locator = str(root / "images" / f"{image_id:012d}.jpg")
        _warn_if_missing(locator, qid)
        instances.append(
            QaInstance(
                instance_id=qid,
                image=ImageRef(id=str(image_id), locator=locator),
                question=question,
                gold_answers=_fold_answers(direct),
                choices=tuple(choices),
                gold_choice_index=correct,
            )
        )
    return instances


def _field(row: Mapping, name: str, expected: type, where: str):
    if name not in row:
        raise LoadError(f"{where}: missing field {name!r}")
    value = row[name]
    if not isinstance(value, expected) or isinstance(value, bool):
        raise LoadError(
            f"{where}: field {name!r} must be {expected.__name__}, got {type(value).__name__}"
        )
    return value


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON: {exc}") from exc


def _single_file(root: Path, marker: str, split: str, required: bool = True) -> Path | None:
    if not root.is_dir():
        raise LoadError(f"dataset root {root} is not a directory")
    candidates = [
        path
        for path in sorted(root.glob("*.json"))
        if marker in path.name and (not split or split in path.name)
    ]
    if not candidates:
        if required:
            wanted = f"*{marker}*.json" if marker else "*.json"
            raise LoadError(f"no {wanted} file under {root}" + (f" for split {split!r}" if split else ""))
        return None
    if len(candidates) > 1:
        raise LoadError(
            f"ambiguous dataset files under {root}: {[p.name for p in candidates]}; "
            "set split to disambiguate"
        )
    return candidates[0]


def _fold_answers(answers: Iterable[str]) -> tuple[tuple[str, int], ...]:
    counts: dict[str, int] = {}
    for answer in answers:
        counts[answer] = counts.get(answer, 0) + 1
    return tuple(counts.items())


def _warn_if_missing(locator: str, instance_id: str) -> None:
    if locator.startswith(("http://", "https://")):
        return
    if not Path(locator).is_file():
        logger.warning("missing image file: %s (instance %s)", locator, instance_id)


def _deterministic_subset(instances, limit, seed):
    ordered = sorted(instances, key=lambda instance: instance.instance_id)
    if limit is None or limit >= len(ordered):
        return ordered
    if seed is None:
        return ordered[:limit]
    picked = random.Random(seed).sample(ordered, limit)
    return sorted(picked, key=lambda instance: instance.instance_id)


# -- rationale export ---------------------------------------------------------


@dataclass(frozen=True, slots=True)
class RationaleRecord:
    """One exported line: everything needed to reuse a run's reasoning."""

    instance_id: str
    image: str
    question: str
    caption: str
    rationale: str
    answer: str
    score: float | None = None


@dataclass(frozen=True, slots=True)
class ExportResult:
    written: int
    skipped: int


def export_rationales(
    traces: Sequence[PipelineTrace],
    instances: Sequence[QaInstance],
    path: str | Path,
    scores: Mapping[str, float] | None = None,
) -> ExportResult:
    """Write one JSONL record per trace that completed the think stage.

    Traces without a usable think completion (failures, sequence tasks,
    unknown instance ids) are counted as skipped. Output bytes are stable:
    sorted keys, no timestamps.
    """
    by_id = {instance.instance_id: instance for instance in instances}
    lines: list[str] = []
    written = skipped = 0
    for trace in traces:
        instance = by_id.get(trace.instance_id)
        think = next(
            (
                record
                for record in trace.records
                if record.stage == STAGE_THINK
                and record.error is None
                and record.completion.strip()
            ),
            None,
        )
        if instance is None or think is None:
            skipped += 1
            continue
        observe = next(
            (
                record
                for record in trace.records
                if record.stage == STAGE_OBSERVE and record.error is None
            ),
            None,
        )
        rationale, _ = extract_answer(think.completion)
        payload: dict[str, object] = {
            "id": trace.instance_id,
            "image": instance.image.locator,
            "question": instance.question,
            "caption": observe.completion if observe else "",
            "rationale": rationale,
            "answer": trace.final.raw if trace.final else "",
        }
        if scores is not None and trace.instance_id in scores:
            payload["score"] = scores[trace.instance_id]
        lines.append(json.dumps(payload, sort_keys=True, ensure_ascii=False))
        written += 1
    text = "\n".join(lines) + ("\n" if lines else "")
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write rationale export {path}: {exc}") from exc
    return ExportResult(written=written, skipped=skipped)


def parse_rationale_record(line: str, where: str = "<line>") -> RationaleRecord:
    try:
        row = json.loads(line)
    except json.JSONDecodeError as exc:
        raise LoadError(f"{where}: invalid JSON: {exc}") from exc
    if not isinstance(row, dict):
        raise LoadError(f"{where}: record is not an object")
    score = row.get("score")
    if score is not None:
        if not isinstance(score, (int, float)) or isinstance(score, bool):
            raise LoadError(f"{where}: field 'score' must be a number")
        if not 0.0 <= float(score) <= 1.0:
            raise LoadError(f"{where}: field 'score' outside [0, 1]")
    return RationaleRecord(
        instance_id=_field(row, "id", str, where),
        image=_field(row, "image", str, where),
        question=_field(row, "question", str, where),
        caption=_field(row, "caption", str, where),
        rationale=_field(row, "rationale", str, where),
        answer=_field(row, "answer", str, where),
        score=float(score) if score is not None else None,
    )


def read_rationale_records(path: str | Path) -> list[RationaleRecord]:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"no rationale file at {path}")
    records: list[RationaleRecord] = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if line.strip():
                records.append(parse_rationale_record(line, where=f"{path}:{lineno}"))
    return records


# -- trace serialization ------------------------------------------------------


def trace_to_dict(trace: PipelineTrace) -> dict:
    return {
        "instance_id": trace.instance_id,
        "config_digest": trace.config_digest,
        "failure": trace.failure,
        "final": (
            None
            if trace.final is None
            else {
                "raw": trace.final.raw,
                "normalized": trace.final.normalized,
                "chosen_index": trace.final.chosen_index,
            }
        ),
        "records": [
            {
                "stage": record.stage,
                "backend_id": record.backend_id,
                "completion": record.completion,
                "cache_hit": record.cache_hit,
                "latency_ms": record.latency_ms,
                "image_id": record.image_id,
                "error": record.error,
                "prompt": {
                    "template_id": record.prompt.template_id,
                    "filled_slots": dict(record.prompt.filled_slots),
                    "rendered": record.prompt.rendered,
                    "flags": list(record.prompt.flags),
                },
            }
            for record in trace.records
        ],
    }


def trace_from_dict(payload: object, where: str = "<trace>") -> PipelineTrace:
    if not isinstance(payload, dict):
        raise LoadError(f"{where}: trace is not an object")
    try:
        final_payload = payload.get("final")
        final = (
            None
            if final_payload is None
            else FinalAnswer(
                raw=final_payload["raw"],
                normalized=final_payload["normalized"],
                chosen_index=final_payload["chosen_index"],
            )
        )
        records = tuple(
            StageRecord(
                stage=record["stage"],
                prompt=PromptText(
                    template_id=record["prompt"]["template_id"],
                    filled_slots=dict(record["prompt"]["filled_slots"]),
                    rendered=record["prompt"]["rendered"],
                    flags=tuple(record["prompt"]["flags"]),
                ),
                backend_id=record["backend_id"],
                completion=record["completion"],
                cache_hit=record["cache_hit"],
                latency_ms=record["latency_ms"],
                image_id=record.get("image_id"),
                error=record.get("error"),
            )
            for record in payload["records"]
        )
        return PipelineTrace(
            instance_id=payload["instance_id"],
            records=records,
            final=final,
            config_digest=payload["config_digest"],
            failure=payload.get("failure"),
        )
    except (KeyError, TypeError, InvalidArgumentError) as exc:
        raise LoadError(f"{where}: malformed trace: {exc}") from exc


def trace_to_json(trace: PipelineTrace) -> str:
    return json.dumps(trace_to_dict(trace), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def trace_filename(instance_id: str) -> str:
    """A filesystem-safe, collision-free filename for one instance's trace."""
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", instance_id)
    if safe != instance_id or not safe:
        safe = f"{safe or 'trace'}-{sha256_hex(instance_id.encode('utf-8'))[:8]}"
    return f"{safe}.json"


def write_trace(trace: PipelineTrace, path: str | Path) -> None:
    try:
        Path(path).write_text(trace_to_json(trace), encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write trace {path}: {exc}") from exc


def read_trace(path: str | Path) -> PipelineTrace:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise LoadError(f"cannot read trace {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON: {exc}") from exc
    return trace_from_dict(payload, where=str(path))


def write_traces(traces: Sequence[PipelineTrace], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create trace directory {directory}: {exc}") from exc
    paths = []
    for trace in traces:
        path = directory / trace_filename(trace.instance_id)
        write_trace(trace, path)
        paths.append(path)
    return paths


def read_traces(directory: str | Path) -> list[PipelineTrace]:
    directory = Path(directory)
    if not directory.is_dir():
        raise LoadError(f"no trace directory at {directory}")
    return [read_trace(path) for path in sorted(directory.glob("*.json"))]
