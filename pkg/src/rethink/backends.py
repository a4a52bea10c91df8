"""Model backends: HTTP chat-completions clients, scripted doubles, replay.

Every backend exposes the same small surface: ``complete(prompt, params,
image=None) -> CallOutcome``. The role-specific entry points
(:func:`complete_text`, :func:`caption_image`, :func:`answer_with_context`)
add role checks and output classification on top.
"""

from __future__ import annotations

import base64
import mimetypes
import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence
from urllib.parse import urlparse

import requests

from .core import Caption, ImageRef, PipelineTrace, sha256_hex
from .core import STAGE_OBSERVE, STAGE_RETHINK, STAGE_THINK
from .errors import (
    BackendUnavailableError,
    ConfigError,
    EmptyCompletionError,
    InputUnavailableError,
    InvalidArgumentError,
    LoadError,
    UnscriptedPromptError,
)

ROLE_CAPTIONER = "captioner"
ROLE_REASONER = "reasoner"
ROLE_ANSWERER = "conditioned_answerer"
ROLES = (ROLE_CAPTIONER, ROLE_REASONER, ROLE_ANSWERER)

KIND_HTTP = "http"
KIND_SCRIPTED = "scripted"
KIND_REPLAY = "replay"
KINDS = (KIND_HTTP, KIND_SCRIPTED, KIND_REPLAY)

STAGE_TO_ROLE = {
    STAGE_OBSERVE: ROLE_CAPTIONER,
    STAGE_THINK: ROLE_REASONER,
    STAGE_RETHINK: ROLE_ANSWERER,
}

HTTP_TIMEOUT_S = 60.0


@dataclass(frozen=True, slots=True)
class DecodingParams:
    temperature: float = 0.0
    max_new_tokens: int = 64
    stop_sequences: tuple[str, ...] = ("\n\n",)

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise InvalidArgumentError("temperature must be >= 0")
        if self.max_new_tokens < 1:
            raise InvalidArgumentError("max_new_tokens must be >= 1")


#: Per-role decoding defaults: captions and answers are short, rationales longer.
DEFAULT_DECODING: Mapping[str, DecodingParams] = {
    ROLE_CAPTIONER: DecodingParams(max_new_tokens=64),
    ROLE_REASONER: DecodingParams(max_new_tokens=256),
    ROLE_ANSWERER: DecodingParams(max_new_tokens=64),
}


@dataclass(frozen=True, slots=True)
class RetryPolicy:
    max_retries: int = 2
    backoff_base_s: float = 0.25

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise InvalidArgumentError("max_retries must be >= 0")
        if self.backoff_base_s < 0:
            raise InvalidArgumentError("backoff_base_s must be >= 0")


@dataclass(frozen=True, slots=True)
class BackendDescriptor:
    """Declarative identity and wiring of one backend."""

    backend_id: str
    role: str
    kind: str
    endpoint: str | None = None
    model_name: str | None = None
    auth_ref: str | None = None
    script: str | None = None
    decoding: DecodingParams = DecodingParams()
    retry: RetryPolicy = RetryPolicy()
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if not self.backend_id:
            raise ConfigError("backend_id must be nonempty")
        if self.role not in ROLES:
            raise ConfigError(f"unknown backend role {self.role!r} (expected one of {ROLES})")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown backend kind {self.kind!r} (expected one of {KINDS})")
        if self.kind == KIND_HTTP and (not self.endpoint or not self.model_name):
            raise ConfigError("http backends need both endpoint and model_name")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")


@dataclass(frozen=True, slots=True)
class ScriptEntry:
    """One canned completion: matched by role plus prompt (or its digest)."""

    role: str
    completion: str
    prompt: str | None = None
    prompt_digest: str | None = None
    image_id: str = ""

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ConfigError(f"script entry has unknown role {self.role!r}")
        if (self.prompt is None) == (self.prompt_digest is None):
            raise ConfigError("script entry needs exactly one of prompt or prompt_digest")
        if self.prompt is None and self.image_id:
            raise ConfigError("image_id only combines with a literal prompt; fold it into the digest")

    def match_digest(self) -> str:
        if self.prompt_digest is not None:
            return self.prompt_digest
        return script_digest(self.prompt or "", self.image_id)


def script_digest(prompt: str, image_id: str = "") -> str:
    """Digest of the scripted match text: the prompt with the image id appended
    (empty for text-only calls)."""
    return sha256_hex((prompt + image_id).encode("utf-8"))


@dataclass(frozen=True, slots=True)
class CallOutcome:
    completion: str
    latency_ms: int
    cache_hit: bool = False


class Backend(Protocol):
    descriptor: BackendDescriptor

    def complete(
        self,
        prompt: str,
        params: DecodingParams | None = None,
        image: ImageRef | None = None,
    ) -> CallOutcome:
        ...


def _is_url(locator: str) -> bool:
    return urlparse(locator).scheme in ("http", "https")


def _require_readable(image: ImageRef) -> None:
    if _is_url(image.locator):
        return
    if not Path(image.locator).is_file():
        raise InputUnavailableError(f"image {image.id!r}: no readable file at {image.locator!r}")


def image_content_digest(image: ImageRef) -> str:
    """Digest standing in for the image's bytes in cache keys.

    Prefers the declared content digest, then the actual file bytes, and for
    remote locators falls back to hashing the locator string (no fetch).
    """
    if image.content_digest:
        return image.content_digest
    path = Path(image.locator)
    if path.is_file():
        return sha256_hex(path.read_bytes())
    return sha256_hex(image.locator.encode("utf-8"))


class ScriptedBackend:
    """Deterministic test double: a table from match digests to completions."""

    check_image_files = True

    def __init__(self, descriptor: BackendDescriptor, entries: Mapping[str, str]):
        self.descriptor = descriptor
        self._entries = dict(entries)

    def complete(
        self,
        prompt: str,
        params: DecodingParams | None = None,
        image: ImageRef | None = None,
    ) -> CallOutcome:
        if image is not None and self.check_image_files:
            _require_readable(image)
        digest = script_digest(prompt, image.id if image is not None else "")
        try:
            completion = self._entries[digest]
        except KeyError:
            raise UnscriptedPromptError(self.descriptor.role, digest) from None
        return CallOutcome(completion=completion, latency_ms=0)

    def __len__(self) -> int:
        return len(self._entries)


class ReplayBackend(ScriptedBackend):
    """A scripted table built from a recorded trace; needs no original inputs."""

    check_image_files = False


class HttpBackend:
    """OpenAI-style ``/chat/completions`` client with retry and backoff.

    Transport errors and 5xx responses retry with exponential backoff up to
    the descriptor's budget; 4xx responses are configuration errors and fail
    immediately. Credentials come only from the environment variable named by
    ``auth_ref``. At most ``max_in_flight`` requests run concurrently.
    """

    def __init__(self, descriptor: BackendDescriptor):
        if descriptor.kind != KIND_HTTP:
            raise ConfigError(f"HttpBackend needs kind=http, got {descriptor.kind!r}")
        self.descriptor = descriptor
        self._headers = {"Content-Type": "application/json"}
        if descriptor.auth_ref:
            token = os.environ.get(descriptor.auth_ref)
            if not token:
                raise ConfigError(
                    f"backend {descriptor.backend_id!r}: auth_ref names environment "
                    f"variable {descriptor.auth_ref!r}, which is not set"
                )
            self._headers["Authorization"] = f"Bearer {token}"
        self._slots = threading.BoundedSemaphore(descriptor.max_in_flight)

    def complete(
        self,
        prompt: str,
        params: DecodingParams | None = None,
        image: ImageRef | None = None,
    ) -> CallOutcome:
        params = params or self.descriptor.decoding
        payload = self._payload(prompt, params, image)
        url = self.descriptor.endpoint.rstrip("/") + "/chat/completions"
        attempts = self.descriptor.retry.max_retries + 1
        delay = self.descriptor.retry.backoff_base_s
        started = time.perf_counter()
        last_trouble = "no attempts made"
        with self._slots:
            for attempt in range(attempts):
                if attempt:
                    time.sleep(delay)
                    delay *= 2
                try:
                    response = requests.post(
                        url, json=payload, headers=self._headers, timeout=HTTP_TIMEOUT_S
                    )
                except requests.RequestException as exc:
                    last_trouble = f"transport error: {exc}"
                    continue
                if 400 <= response.status_code < 500:
                    raise ConfigError(
                        f"backend {self.descriptor.backend_id!r}: HTTP {response.status_code} "
                        f"from {url}: {response.text[:200]}"
                    )
                if response.status_code >= 500:
                    last_trouble = f"HTTP {response.status_code}"
                    continue
                try:
                    completion = response.json()["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    last_trouble = f"malformed completion payload: {exc}"
                    continue
                latency_ms = int(round((time.perf_counter() - started) * 1000))
                return CallOutcome(
                    completion=_strip_stops(completion or "", params.stop_sequences),
                    latency_ms=latency_ms,
                )
        raise BackendUnavailableError(
            f"backend {self.descriptor.backend_id!r}: {url} unavailable "
            f"after {attempts} attempts ({last_trouble})"
        )

    def _payload(
        self, prompt: str, params: DecodingParams, image: ImageRef | None
    ) -> dict:
        if image is None:
            content: object = prompt
        else:
            parts: list[dict] = []
            if prompt:
                parts.append({"type": "text", "text": prompt})
            parts.append({"type": "image_url", "image_url": {"url": _image_url(image)}})
            content = parts
        payload: dict = {
            "model": self.descriptor.model_name,
            "messages": [{"role": "user", "content": content}],
            "temperature": params.temperature,
            "max_tokens": params.max_new_tokens,
        }
        if params.stop_sequences:
            payload["stop"] = list(params.stop_sequences)
        return payload


def _image_url(image: ImageRef) -> str:
    if _is_url(image.locator):
        return image.locator
    path = Path(image.locator)
    if not path.is_file():
        raise InputUnavailableError(
            f"image {image.id!r}: no readable file at {image.locator!r}"
        )
    mime = mimetypes.guess_type(path.name)[0] or "image/png"
    encoded = base64.b64encode(path.read_bytes()).decode("ascii")
    return f"data:{mime};base64,{encoded}"


def _strip_stops(text: str, stop_sequences: Sequence[str]) -> str:
    cut = len(text)
    for stop in stop_sequences:
        if stop:
            index = text.find(stop)
            if index >= 0:
                cut = min(cut, index)
    return text[:cut]


class CachingBackend:
    """Wraps any backend with the content-addressed call cache.

    Hits return the stored completion with zero latency; misses pass through
    and store the result. Empty completions are never stored, so the
    pipeline's retry-on-empty behavior cannot be poisoned by the cache.
    """

    def __init__(self, inner: Backend, cache) -> None:
        self.inner = inner
        self.cache = cache

    @property
    def descriptor(self) -> BackendDescriptor:
        return self.inner.descriptor

    def complete(
        self,
        prompt: str,
        params: DecodingParams | None = None,
        image: ImageRef | None = None,
    ) -> CallOutcome:
        from .cache import CacheEntry, key_of

        params = params or self.descriptor.decoding
        image_digest = image_content_digest(image) if image is not None else ""
        key = key_of(
            self.descriptor.backend_id,
            self.descriptor.model_name or "",
            self.descriptor.role,
            prompt,
            image_digest,
            params.temperature,
            params.max_new_tokens,
            params.stop_sequences,
        )
        entry = self.cache.get(key)
        if entry is not None:
            return CallOutcome(completion=entry.completion, latency_ms=0, cache_hit=True)
        outcome = self.inner.complete(prompt, params, image)
        if outcome.completion.strip():
            created = time.strftime("%Y-%m-%dT%H:%M:%S+00:00", time.gmtime())
            self.cache.put(
                key,
                CacheEntry(
                    key=key,
                    completion=outcome.completion,
                    created_at=created,
                    backend_id=self.descriptor.backend_id,
                ),
            )
        return outcome


def load_script(path: str | Path) -> list[ScriptEntry]:
    """Load a scripted-backend table: a JSON array of entry objects."""
    import json

    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read script file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise LoadError(f"{path}: script file must be a JSON array of entries")
    entries: list[ScriptEntry] = []
    for position, item in enumerate(raw):
        if not isinstance(item, dict):
            raise LoadError(f"{path}: entry {position} is not an object")
        try:
            entries.append(
                ScriptEntry(
                    role=item["role"],
                    completion=item["completion"],
                    prompt=item.get("prompt"),
                    prompt_digest=item.get("prompt_digest"),
                    image_id=item.get("image_id", ""),
                )
            )
        except KeyError as exc:
            raise LoadError(f"{path}: entry {position} is missing field {exc}") from exc
    return entries


def scripted_backend(
    descriptor: BackendDescriptor, entries: Sequence[ScriptEntry]
) -> ScriptedBackend:
    """Build a scripted backend from the entries matching its role."""
    table: dict[str, str] = {}
    for entry in entries:
        if entry.role != descriptor.role:
            continue
        digest = entry.match_digest()
        if digest in table and table[digest] != entry.completion:
            raise ConfigError(
                f"script has conflicting completions for role={entry.role} digest={digest}"
            )
        table[digest] = entry.completion
    return ScriptedBackend(descriptor, table)


def build_backend(descriptor: BackendDescriptor, cache=None) -> Backend:
    """Construct the client for a descriptor; wrap it with the cache if given."""
    if descriptor.kind == KIND_HTTP:
        backend: Backend = HttpBackend(descriptor)
    elif descriptor.kind == KIND_SCRIPTED:
        if not descriptor.script:
            raise ConfigError(
                f"backend {descriptor.backend_id!r}: scripted backends need a script path"
            )
        backend = scripted_backend(descriptor, load_script(descriptor.script))
    else:
        raise ConfigError("replay backends are built from a trace, not a descriptor")
    if cache is not None:
        backend = CachingBackend(backend, cache)
    return backend


def replay_backends(trace: PipelineTrace) -> dict[str, Backend]:
    """Build the three replay backends from one recorded trace.

    Each successful record becomes a scripted entry under its stage's role;
    replaying the same instance then reproduces the run without any network
    or image access.
    """
    tables: dict[str, dict[str, str]] = defaultdict(dict)
    backend_ids: dict[str, str] = {}
    for record in trace.records:
        if record.error is not None:
            continue
        role = STAGE_TO_ROLE[record.stage]
        digest = script_digest(record.prompt.rendered, record.image_id or "")
        tables[role][digest] = record.completion
        backend_ids.setdefault(role, record.backend_id)
    backends: dict[str, Backend] = {}
    for role in ROLES:
        descriptor = BackendDescriptor(
            backend_id=backend_ids.get(role, f"replay-{role}"),
            role=role,
            kind=KIND_REPLAY,
        )
        backends[role] = ReplayBackend(descriptor, tables.get(role, {}))
    return backends


def _require_role(backend: Backend, role: str) -> None:
    if backend.descriptor.role != role:
        raise ConfigError(
            f"backend {backend.descriptor.backend_id!r} has role "
            f"{backend.descriptor.role!r}, need {role!r}"
        )


def complete_text(
    backend: Backend, prompt: str, params: DecodingParams | None = None
) -> str:
    """Text-only completion through a reasoner backend."""
    _require_role(backend, ROLE_REASONER)
    outcome = backend.complete(prompt, params)
    if not outcome.completion.strip():
        raise EmptyCompletionError("reasoner returned an empty completion")
    return outcome.completion


def caption_image(
    backend: Backend,
    image: ImageRef,
    instruction: str = "",
    params: DecodingParams | None = None,
) -> Caption:
    """Caption one image through a captioner backend."""
    _require_role(backend, ROLE_CAPTIONER)
    outcome = backend.complete(instruction, params, image=image)
    if not outcome.completion.strip():
        raise EmptyCompletionError(f"empty caption for image {image.id!r}")
    return Caption(
        image_id=image.id,
        text=outcome.completion,
        backend_id=backend.descriptor.backend_id,
    )


def answer_with_context(
    backend: Backend,
    image: ImageRef,
    prompt: str,
    params: DecodingParams | None = None,
) -> str:
    """Answer conditioned on both the image and a rendered rationale prompt."""
    _require_role(backend, ROLE_ANSWERER)
    outcome = backend.complete(prompt, params, image=image)
    if not outcome.completion.strip():
        raise EmptyCompletionError(f"empty answer for image {image.id!r}")
    return outcome.completion
