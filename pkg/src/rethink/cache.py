"""Content-addressed cache for model calls.

A call's key is the sha256 of a length-prefixed canonical encoding of
everything that determines its output: backend identity, role, prompt bytes,
image digest, and decoding parameters. The store is an append-only JSONL log
plus an in-memory index rebuilt on open; the log is the durable artifact, the
index is a view.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .core import is_digest, sha256_hex
from .errors import CacheCorruptError, InvalidArgumentError, OutputError

LOG_NAME = "entries.log"


def _length_prefixed(parts: Iterable[bytes]) -> bytes:
    blob = bytearray()
    for part in parts:
        blob += len(part).to_bytes(8, "big")
        blob += part
    return bytes(blob)


def encode_call(
    backend_id: str,
    model_name: str,
    role: str,
    prompt: str,
    image_digest: str,
    temperature: float,
    max_new_tokens: int,
    stop_sequences: Sequence[str],
) -> bytes:
    """Canonical byte encoding of one call; every field is length-prefixed,
    so no delimiter collision can alias two different calls."""
    if image_digest and not is_digest(image_digest):
        raise InvalidArgumentError("image_digest must be empty or a sha256 hex digest")
    decoding_blob = _length_prefixed(
        [
            repr(float(temperature)).encode("utf-8"),
            str(int(max_new_tokens)).encode("utf-8"),
            *(stop.encode("utf-8") for stop in stop_sequences),
        ]
    )
    return _length_prefixed(
        [
            backend_id.encode("utf-8"),
            model_name.encode("utf-8"),
            role.encode("utf-8"),
            prompt.encode("utf-8"),
            image_digest.encode("utf-8"),
            decoding_blob,
        ]
    )


def key_of(
    backend_id: str,
    model_name: str,
    role: str,
    prompt: str,
    image_digest: str,
    temperature: float,
    max_new_tokens: int,
    stop_sequences: Sequence[str],
) -> str:
    """The cache key: sha256 hex of :func:`encode_call`."""
    return sha256_hex(
        encode_call(
            backend_id,
            model_name,
            role,
            prompt,
            image_digest,
            temperature,
            max_new_tokens,
            stop_sequences,
        )
    )


@dataclass(frozen=True, slots=True)
class CacheEntry:
    key: str
    completion: str
    created_at: str
    backend_id: str


@dataclass(frozen=True, slots=True)
class CacheStats:
    entries: int
    log_records: int
    hits: int
    misses: int


class CallCache:
    """Keyed completion store: in-memory index over an append-only JSONL log.

    With ``directory=None`` the cache is memory-only (useful for tests and
    single runs); with a directory it persists across processes. Writes are
    serialized with a lock; a re-put of an identical entry is a no-op, and a
    different completion under the same key wins as the last write.
    """

    def __init__(self, directory: str | Path | None = None):
        self._dir = Path(directory) if directory is not None else None
        self._lock = threading.Lock()
        self._index: dict[str, CacheEntry] = {}
        self._log_records = 0
        self.hits = 0
        self.misses = 0
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
            self._load()

    @property
    def log_path(self) -> Path | None:
        return None if self._dir is None else self._dir / LOG_NAME

    def _load(self) -> None:
        path = self.log_path
        if path is None or not path.exists():
            return
        with path.open("r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    entry = CacheEntry(
                        key=record["key"],
                        completion=record["completion"],
                        created_at=record["created_at"],
                        backend_id=record["backend_id"],
                    )
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise CacheCorruptError(f"{path}:{lineno}: undecodable cache record ({exc})") from exc
                if not is_digest(entry.key):
                    raise CacheCorruptError(f"{path}:{lineno}: malformed cache key {entry.key!r}")
                self._index[entry.key] = entry
                self._log_records += 1

    def get(self, key: str) -> CacheEntry | None:
        with self._lock:
            entry = self._index.get(key)
            if entry is None:
                self.misses += 1
            else:
                self.hits += 1
            return entry

    def put(self, key: str, entry: CacheEntry) -> None:
        if entry.key != key:
            raise InvalidArgumentError("cache entry key does not match put key")
        if not is_digest(key):
            raise InvalidArgumentError("cache keys are sha256 hex digests")
        with self._lock:
            existing = self._index.get(key)
            if existing is not None and existing.completion == entry.completion:
                return
            self._append(entry)
            self._index[key] = entry

    def _append(self, entry: CacheEntry) -> None:
        path = self.log_path
        if path is not None:
            line = json.dumps(
                {
                    "key": entry.key,
                    "completion": entry.completion,
                    "created_at": entry.created_at,
                    "backend_id": entry.backend_id,
                },
                sort_keys=True,
            )
            try:
                with path.open("a", encoding="utf-8") as handle:
                    handle.write(line + "\n")
                    handle.flush()
            except OSError as exc:
                raise OutputError(f"cannot append to cache log {path}: {exc}") from exc
        self._log_records += 1

    def compact(self) -> int:
        """Rewrite the log to one record per live key; returns records dropped."""
        with self._lock:
            dropped = self._log_records - len(self._index)
            path = self.log_path
            if path is not None:
                tmp = path.with_suffix(".log.tmp")
                try:
                    with tmp.open("w", encoding="utf-8") as handle:
                        for key in sorted(self._index):
                            entry = self._index[key]
                            handle.write(
                                json.dumps(
                                    {
                                        "key": entry.key,
                                        "completion": entry.completion,
                                        "created_at": entry.created_at,
                                        "backend_id": entry.backend_id,
                                    },
                                    sort_keys=True,
                                )
                                + "\n"
                            )
                    tmp.replace(path)
                except OSError as exc:
                    raise OutputError(f"cannot compact cache log {path}: {exc}") from exc
            self._log_records = len(self._index)
            return dropped

    def stats(self) -> CacheStats:
        with self._lock:
            return CacheStats(
                entries=len(self._index),
                log_records=self._log_records,
                hits=self.hits,
                misses=self.misses,
            )

    def __len__(self) -> int:
        return len(self._index)
