"""Prompt templates for the three pipeline stages, plus answer extraction.

Template text is part of the package's external contract: rendered prompts are
compared byte-for-byte against pinned golden files, so every literal here is
load-bearing. The answer marker ``"So the answer is"`` doubles as the grammar
that :func:`extract_answer` inverts.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import InvalidArgumentError, LoadError, UnsupportedArityError

ANSWER_MARKER = "So the answer is"

TEMPLATE_THINKING_QA = "thinking_qa"
TEMPLATE_THINKING_MATRIX = "thinking_matrix"
TEMPLATE_RETHINKING_QA = "rethinking_qa"
TEMPLATE_OBSERVATION = "observation_caption"

TEMPLATE_IDS = (
    TEMPLATE_THINKING_QA,
    TEMPLATE_THINKING_MATRIX,
    TEMPLATE_RETHINKING_QA,
    TEMPLATE_OBSERVATION,
)

#: Ordinal words available to the sequence template, in position order.
ORDINALS = (
    "first", "second", "third", "fourth", "fifth",
    "sixth", "seventh", "eighth", "ninth", "tenth",
)

MATRIX_QUESTION_LINE = "Question: What does the next image look like?"
MATRIX_ANSWER_STEM = "Answer:The next picture is"


@dataclass(frozen=True, slots=True)
class Slot:
    """A named hole in a template skeleton."""

    name: str


@dataclass(frozen=True, slots=True)
class PromptTemplate:
    """An ordered skeleton of literal segments and named slots."""

    template_id: str
    skeleton: tuple[str | Slot, ...]

    def slot_names(self) -> tuple[str, ...]:
        return tuple(part.name for part in self.skeleton if isinstance(part, Slot))

    def render(self, values: Mapping[str, str]) -> str:
        """Substitute ``values`` into the skeleton, leaving literals untouched."""
        pieces: list[str] = []
        for part in self.skeleton:
            if isinstance(part, Slot):
                if part.name not in values:
                    raise InvalidArgumentError(
                        f"template {self.template_id!r}: no value for slot {part.name!r}"
                    )
                pieces.append(values[part.name])
            else:
                pieces.append(part)
        return "".join(pieces)


@dataclass(frozen=True)
class PromptText:
    """A rendered prompt plus the template identity and slots that produced it."""

    template_id: str
    filled_slots: dict[str, str]
    rendered: str
    flags: tuple[str, ...] = ()


@dataclass(frozen=True, slots=True)
class Demonstration:
    """One in-context example for the thinking stage."""

    caption: str
    question: str
    rationale: str
    answer: str

    def __post_init__(self) -> None:
        for name in ("caption", "question", "rationale", "answer"):
            if not getattr(self, name).strip():
                raise InvalidArgumentError(f"demonstration field {name!r} must be nonempty")


_SLOT_TOKEN = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _parse_skeleton(pattern: str) -> tuple[str | Slot, ...]:
    parts: list[str | Slot] = []
    pos = 0
    for match in _SLOT_TOKEN.finditer(pattern):
        if match.start() > pos:
            parts.append(pattern[pos:match.start()])
        parts.append(Slot(match.group(1)))
        pos = match.end()
    if pos < len(pattern):
        parts.append(pattern[pos:])
    for part in parts:
        if isinstance(part, str) and ("{" in part or "}" in part):
            raise LoadError(f"stray brace in template literal: {part!r}")
    return tuple(parts)


def _template(template_id: str, pattern: str) -> PromptTemplate:
    return PromptTemplate(template_id, _parse_skeleton(pattern))


THINKING_QA = _template(TEMPLATE_THINKING_QA, "Caption:{caption}\nQuestion:{question}\nAnswer:")
_DEMO_BLOCK = _template(
    "thinking_qa_demo",
    "Caption:{caption}\nQuestion:{question}\nAnswer:{rationale}. " + ANSWER_MARKER + " {answer}",
)
THINKING_MATRIX = _template(
    TEMPLATE_THINKING_MATRIX,
    "The {ordinal} picture is {caption}.\n" + MATRIX_QUESTION_LINE + "\n" + MATRIX_ANSWER_STEM,
)
RETHINKING_QA = _template(
    TEMPLATE_RETHINKING_QA, "Question:{question}\tRationale:{rationale}\tAnswer:"
)
OBSERVATION = PromptTemplate(TEMPLATE_OBSERVATION, ())

TEMPLATES: dict[str, PromptTemplate] = {
    t.template_id: t for t in (THINKING_QA, THINKING_MATRIX, RETHINKING_QA, OBSERVATION)
}


def _require_nonblank(value: str, what: str) -> None:
    if not value.strip():
        raise InvalidArgumentError(f"{what} must be nonempty")


def render_thinking_qa(
    caption: str, question: str, demos: Sequence[Demonstration] = ()
) -> PromptText:
    """Build the reasoning prompt: optional demo blocks, then the test block.

    Blocks are joined by exactly one blank line; the prompt always ends with
    the bare ``Answer:`` stem the reasoner is expected to continue.
    """
    _require_nonblank(caption, "caption")
    _require_nonblank(question, "question")
    slots: dict[str, str] = {}
    blocks: list[str] = []
    for i, demo in enumerate(demos):
        blocks.append(
            _DEMO_BLOCK.render(
                {
                    "caption": demo.caption,
                    "question": demo.question,
                    "rationale": demo.rationale,
                    "answer": demo.answer,
                }
            )
        )
        slots[f"demo{i}.caption"] = demo.caption
        slots[f"demo{i}.question"] = demo.question
        slots[f"demo{i}.rationale"] = demo.rationale
        slots[f"demo{i}.answer"] = demo.answer
    blocks.append(THINKING_QA.render({"caption": caption, "question": question}))
    slots["caption"] = caption
    slots["question"] = question
    return PromptText(TEMPLATE_THINKING_QA, slots, "\n\n".join(blocks))


def render_thinking_matrix(context_captions: Sequence[str]) -> PromptText:
    """Build the sequence-completion prompt from ordered context captions."""
    captions = list(context_captions)
    if len(captions) < 2:
        raise InvalidArgumentError(
            f"sequence prompt needs at least 2 context captions, got {len(captions)}"
        )
    if len(captions) > len(ORDINALS):
        raise UnsupportedArityError(
            f"sequence prompt supports at most {len(ORDINALS)} pictures, got {len(captions)}"
        )
    for caption in captions:
        _require_nonblank(caption, "context caption")
    lines = [
        f"The {ORDINALS[i]} picture is {caption}." for i, caption in enumerate(captions)
    ]
    lines.append(MATRIX_QUESTION_LINE)
    lines.append(MATRIX_ANSWER_STEM)
    slots = {f"caption{i}": caption for i, caption in enumerate(captions)}
    return PromptText(TEMPLATE_THINKING_MATRIX, slots, "\n".join(lines))


def render_rethinking(question: str, rationale: str) -> PromptText:
    """Build the answerer prompt: tab-delimited question and rationale.

    Tabs are this template's field separators; a tab inside a slot value is
    rendered verbatim but flagged so the trace records the ambiguity.
    """
    _require_nonblank(question, "question")
    _require_nonblank(rationale, "rationale")
    slots = {"question": question, "rationale": rationale}
    flags = tuple(
        f"tab_in_value:{name}" for name in sorted(slots) if "\t" in slots[name]
    )
    rendered = RETHINKING_QA.render(slots)
    return PromptText(TEMPLATE_RETHINKING_QA, slots, rendered, flags)


def render_observation(instruction: str = "") -> PromptText:
    """Build the captioning prompt; empty by default (the VLM captions freely)."""
    slots = {"instruction": instruction} if instruction else {}
    return PromptText(TEMPLATE_OBSERVATION, slots, instruction)


def extract_answer(completion: str) -> tuple[str, str | None]:
    """Split a reasoning completion into (rationale_text, extracted_answer).

    The split point is the *last* case-insensitive occurrence of the answer
    marker, so rationales that themselves discuss "the answer is ..." survive.
    Without a marker the whole trimmed completion is the rationale and the
    answer is absent (None).
    """
    marker = ANSWER_MARKER.lower()
    lowered = completion.lower()
    index = lowered.rfind(marker)
    if index < 0:
        return completion.strip(), None
    rationale = _trim_rationale(completion[:index])
    answer = completion[index + len(marker):].strip()
    if answer.endswith("."):
        answer = answer[:-1].rstrip()
    return rationale, (answer or None)


_SENTENCE_PUNCT = ".,!?;:"


def _trim_rationale(text: str) -> str:
    # The thinking template writes ". " ahead of the marker, so a rationale
    # that already ends in punctuation leaves a doubled terminator behind.
    # Drop final periods while what remains still ends in punctuation,
    # keeping exactly one sentence-final mark.
    trimmed = text.strip()
    while trimmed.endswith("."):
        rest = trimmed[:-1].rstrip()
        if not rest or rest[-1] not in _SENTENCE_PUNCT:
            break
        trimmed = rest
    return trimmed


def format_template_file(template: PromptTemplate) -> str:
    """Serialize a template to the on-disk form: an id line, then the skeleton."""
    pieces: list[str] = []
    for part in template.skeleton:
        if isinstance(part, Slot):
            pieces.append("{" + part.name + "}")
        else:
            if "{" in part or "}" in part:
                raise InvalidArgumentError("template literals may not contain braces")
            pieces.append(part)
    return f"id: {template.template_id}\n" + "".join(pieces)


def parse_template_file(text: str) -> PromptTemplate:
    """Parse the on-disk template form produced by :func:`format_template_file`."""
    head, sep, pattern = text.partition("\n")
    if not head.startswith("id: "):
        raise LoadError("template file must start with an 'id: <template_id>' line")
    template_id = head[len("id: "):].strip()
    if not template_id:
        raise LoadError("template file has an empty template id")
    skeleton = _parse_skeleton(pattern if sep else "")
    names = [part.name for part in skeleton if isinstance(part, Slot)]
    duplicates = {name for name in names if names.count(name) > 1}
    if duplicates:
        raise LoadError(f"duplicate slot names in template file: {sorted(duplicates)}")
    return PromptTemplate(template_id, skeleton)
