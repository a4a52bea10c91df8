"""Shared fixtures: scripted corpora, instrumented backends, config writers."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import pytest

from rethink.backends import (
    BackendDescriptor,
    KIND_SCRIPTED,
    ROLE_ANSWERER,
    ROLE_CAPTIONER,
    ROLE_REASONER,
    ROLES,
    ScriptedBackend,
    script_digest,
)
from rethink.core import ImageRef, QaInstance
from rethink.pipeline import RunConfig
from rethink.prompts import extract_answer, render_rethinking, render_thinking_qa

PNG_BYTES = b"\x89PNG\r\n\x1a\n" + bytes(range(24))


class CountingBackend:
    """Pass-through wrapper that counts real backend calls."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    @property
    def descriptor(self):
        return self.inner.descriptor

    def complete(self, prompt, params=None, image=None):
        self.calls += 1
        return self.inner.complete(prompt, params, image=image)


def scripted_descriptor(role: str, backend_id: str | None = None, script: str | None = None):
    return BackendDescriptor(
        backend_id=backend_id or f"{role}-scripted",
        role=role,
        kind=KIND_SCRIPTED,
        script=script,
    )


def make_run_config(script: str | None = None, **overrides) -> RunConfig:
    defaults = dict(
        backends={role: scripted_descriptor(role, script=script) for role in ROLES},
        cache_enabled=False,
    )
    defaults.update(overrides)
    return RunConfig(**defaults)


@dataclass
class QaCorpus:
    """A scripted QA corpus plus everything tests assert against."""

    jsonl_path: Path
    script_path: Path
    instances_by_id: dict[str, dict]
    expected_answer: dict[str, str]
    expected_score: dict[str, float]
    failing_ids: set[str]
    script_entries: list[dict]

    @property
    def size(self) -> int:
        return len(self.instances_by_id)


#: (gold answer, distractor, how many of the 10 annotators said the gold answer)
_ANSWER_CYCLE = [
    ("zebra", "horse", 10),
    ("two dogs", "three dogs", 2),
    ("red", "blue", 10),
    ("umbrella", "parasol", 0),
]


def build_qa_corpus(
    root: Path,
    count: int = 20,
    fail_observe: tuple[int, ...] = (),
    fail_think: tuple[int, ...] = (),
) -> QaCorpus:
    """Write a unified_jsonl dataset plus the scripts that answer it.

    Instances cycle through engineered gold distributions so the expected
    soft-accuracy report is known in advance. Indices named in
    ``fail_observe`` / ``fail_think`` get no script entry for that stage.
    """
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    entries: list[dict] = []
    expected_answer: dict[str, str] = {}
    expected_score: dict[str, float] = {}
    instances_by_id: dict[str, dict] = {}
    failing: set[str] = set()
    for i in range(count):
        iid = f"q{i:03d}"
        gold, distractor, gold_count = _ANSWER_CYCLE[i % len(_ANSWER_CYCLE)]
        image_rel = f"images/{iid}.png"
        image_id = f"img-{iid}"
        (root / image_rel).write_bytes(PNG_BYTES + iid.encode())
        question = f"what is shown in scene {i}?"
        answers = [gold] * gold_count + [distractor] * (10 - gold_count)
        row = {
            "id": iid,
            "image": image_rel,
            "image_id": image_id,
            "question": question,
            "answers": answers,
        }
        rows.append(row)
        instances_by_id[iid] = row
        caption = f"scene {i} shows {gold} near a wall"
        think_prompt = render_thinking_qa(caption, question).rendered
        completion = f"The caption points at {gold}. So the answer is {gold}."
        rationale_text, _ = extract_answer(completion)
        rethink_prompt = render_rethinking(question, rationale_text).rendered
        if i in fail_observe:
            failing.add(iid)
        else:
            entries.append(
                {"role": ROLE_CAPTIONER, "prompt": "", "image_id": image_id, "completion": caption}
            )
        if i in fail_think:
            failing.add(iid)
        else:
            entries.append({"role": ROLE_REASONER, "prompt": think_prompt, "completion": completion})
        entries.append(
            {
                "role": ROLE_ANSWERER,
                "prompt": rethink_prompt,
                "image_id": image_id,
                "completion": gold,
            }
        )
        if iid not in failing:
            expected_answer[iid] = gold
            expected_score[iid] = min(gold_count / 3.0, 1.0)
    jsonl_path = root / "data.jsonl"
    jsonl_path.write_text(
        "\n".join(json.dumps(row, sort_keys=True) for row in rows) + "\n", encoding="utf-8"
    )
    script_path = root / "script.json"
    script_path.write_text(json.dumps(entries, indent=1), encoding="utf-8")
    return QaCorpus(
        jsonl_path=jsonl_path,
        script_path=script_path,
        instances_by_id=instances_by_id,
        expected_answer=expected_answer,
        expected_score=expected_score,
        failing_ids=failing,
        script_entries=entries,
    )


@dataclass
class MatrixCorpus:
    root: Path
    script_path: Path
    expected_choice: dict[str, int]
    gold_choice: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.gold_choice)


_COUNT_WORDS = [
    "one", "two", "three", "four", "five", "six",
    "seven", "eight", "nine", "ten", "eleven", "twelve",
]


def build_matrix_corpus(root: Path, tasks: int = 5, correct: tuple[int, ...] = (0, 1, 2)) -> MatrixCorpus:
    """Write a matrix_dir dataset of dot-counting tasks with scripted captions.

    Context captions count 1..3 dots; the reasoner predicts "four dots".
    Tasks whose index is in ``correct`` caption the gold candidate as
    "four dots" (so the similarity pick lands on it); other tasks give the
    matching caption to a non-gold candidate.
    """
    from rethink.prompts import render_thinking_matrix

    root.mkdir(parents=True, exist_ok=True)
    entries: list[dict] = []
    expected_choice: dict[str, int] = {}
    gold_choice: dict[str, int] = {}
    candidates = 6
    for t in range(tasks):
        name = f"task{t:03d}"
        task_dir = root / name
        task_dir.mkdir()
        context_captions = [f"{_COUNT_WORDS[j]} black dots" for j in range(3)]
        for j in range(3):
            path = task_dir / f"c{j + 1}.png"
            path.write_bytes(PNG_BYTES + f"{name}/c{j + 1}".encode())
            entries.append(
                {
                    "role": ROLE_CAPTIONER,
                    "prompt": "",
                    "image_id": f"{name}/c{j + 1}",
                    "completion": context_captions[j],
                }
            )
        gold = t % candidates
        gold_choice[name] = gold
        (task_dir / "answer.txt").write_text(str(gold + 1), encoding="utf-8")
        matched = gold if t in correct else (gold + 1) % candidates
        expected_choice[name] = matched
        for k in range(candidates):
            path = task_dir / f"a{k + 1}.png"
            path.write_bytes(PNG_BYTES + f"{name}/a{k + 1}".encode())
            caption = "four black dots" if k == matched else f"{_COUNT_WORDS[k + 6]} white squares"
            entries.append(
                {
                    "role": ROLE_CAPTIONER,
                    "prompt": "",
                    "image_id": f"{name}/a{k + 1}",
                    "completion": caption,
                }
            )
        think_prompt = render_thinking_matrix(context_captions).rendered
        entries.append(
            {"role": ROLE_REASONER, "prompt": think_prompt, "completion": "four black dots"}
        )
    script_path = root / "script.json"
    script_path.write_text(json.dumps(entries, indent=1), encoding="utf-8")
    return MatrixCorpus(
        root=root,
        script_path=script_path,
        expected_choice=expected_choice,
        gold_choice=gold_choice,
    )


def write_config(
    path: Path,
    dataset_root: Path,
    script_path: Path,
    *,
    fmt: str = "unified_jsonl",
    name: str = "toy",
    cache: bool = False,
    cache_dir: Path | None = None,
    run_lines: tuple[str, ...] = (),
    report_lines: tuple[str, ...] = (),
) -> Path:
    backend_blocks = []
    for section in ("captioner", "reasoner", "answerer"):
        backend_blocks.append(
            f'[backends.{section}]\nkind = "scripted"\nscript = {json.dumps(str(script_path))}\n'
        )
    run_block = [f"cache = {'true' if cache else 'false'}"]
    if cache_dir is not None:
        run_block.append(f"cache_dir = {json.dumps(str(cache_dir))}")
    run_block.extend(run_lines)
    report_block = list(report_lines)
    text = (
        "\n".join(backend_blocks)
        + "\n[run]\n"
        + "\n".join(run_block)
        + "\n\n[dataset]\n"
        + f"name = {json.dumps(name)}\n"
        + f'format = "{fmt}"\n'
        + f"root = {json.dumps(str(dataset_root))}\n"
    )
    if report_block:
        text += "\n[report]\n" + "\n".join(report_block) + "\n"
    path.write_text(text, encoding="utf-8")
    return path


def scripted_backends_from_entries(entries: list[dict]) -> dict[str, CountingBackend]:
    """In-memory scripted trio (wrapped in counters) from script-file entries."""
    tables: dict[str, dict[str, str]] = {role: {} for role in ROLES}
    for entry in entries:
        digest = script_digest(entry["prompt"], entry.get("image_id", ""))
        tables[entry["role"]][digest] = entry["completion"]
    return {
        role: CountingBackend(ScriptedBackend(scripted_descriptor(role), tables[role]))
        for role in ROLES
    }


@pytest.fixture
def qa_corpus(tmp_path: Path) -> QaCorpus:
    return build_qa_corpus(tmp_path / "data", count=8)


@pytest.fixture
def image_ref(tmp_path: Path) -> ImageRef:
    path = tmp_path / "img7.png"
    path.write_bytes(PNG_BYTES)
    return ImageRef(id="img7", locator=str(path))


@pytest.fixture
def qa_instance(image_ref: ImageRef) -> QaInstance:
    return QaInstance(
        instance_id="q1",
        image=image_ref,
        question="what animal is this?",
        gold_answers=(("zebra", 9), ("horse", 1)),
    )
