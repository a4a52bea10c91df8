"""TOML run configuration.

One file wires a whole run: three backend sections, the dataset, and optional
run/report knobs. Relative paths (scripts, dataset roots, cache and demo
files) resolve against the config file's own directory, so a config is
portable together with its fixtures. Credentials never appear here — an http
backend names an environment variable via ``auth_ref``.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backends import (
    BackendDescriptor,
    DEFAULT_DECODING,
    DecodingParams,
    KIND_HTTP,
    KIND_SCRIPTED,
    RetryPolicy,
    ROLE_ANSWERER,
    ROLE_CAPTIONER,
    ROLE_REASONER,
)
from .datasets import DatasetManifest
from .errors import ConfigError, RethinkError
from .evaluation import METRIC_KINDS
from .pipeline import RunConfig

#: config section name -> backend role
ROLE_SECTIONS = {
    "captioner": ROLE_CAPTIONER,
    "reasoner": ROLE_REASONER,
    "answerer": ROLE_ANSWERER,
}

_BACKEND_KEYS = {
    "kind", "backend_id", "endpoint", "model_name", "auth_ref", "script",
    "max_in_flight", "decoding", "retry",
}
_DECODING_KEYS = {"temperature", "max_new_tokens", "stop_sequences"}
_RETRY_KEYS = {"max_retries", "backoff_base_s"}
_RUN_KEYS = {
    "demo_count", "demo_source", "fallback_policy", "concurrency", "cache",
    "cache_dir", "llm_shortcut", "caption_instruction",
}
_DATASET_KEYS = {"name", "format", "root", "split", "limit", "seed"}
_REPORT_KEYS = {"name", "metric", "vqa_subset_averaged"}


@dataclass(frozen=True)
class AppConfig:
    """A fully resolved configuration for one CLI invocation."""

    run: RunConfig
    dataset: DatasetManifest
    report_name: str = "ours"
    metric: str | None = None
    vqa_subset_averaged: bool = False


def load_config(path: str | Path) -> AppConfig:
    """Read and validate a TOML config file."""
    path = Path(path)
    try:
        with path.open("rb") as handle:
            doc = tomllib.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    base = path.parent
    _check_keys(doc, {"backends", "run", "dataset", "report"}, str(path))

    backends_section = doc.get("backends")
    if not isinstance(backends_section, dict):
        raise ConfigError(f"{path}: missing [backends.*] sections")
    _check_keys(backends_section, set(ROLE_SECTIONS), f"{path}: [backends]")
    descriptors: dict[str, BackendDescriptor] = {}
    for section_name, role in ROLE_SECTIONS.items():
        section = backends_section.get(section_name)
        if not isinstance(section, dict):
            raise ConfigError(f"{path}: missing [backends.{section_name}] section")
        descriptors[role] = _descriptor(
            section, role, base, f"{path}: [backends.{section_name}]"
        )

    run_section = doc.get("run", {})
    _check_keys(run_section, _RUN_KEYS, f"{path}: [run]")
    cache_enabled = bool(run_section.get("cache", True))
    cache_dir = run_section.get("cache_dir")
    if cache_dir is not None:
        cache_dir = _resolve(cache_dir, base)
    elif cache_enabled:
        cache_dir = str(base / ".rethink-cache")
    demo_source = run_section.get("demo_source")
    try:
        run = RunConfig(
            backends=descriptors,
            demo_count=run_section.get("demo_count", 0),
            demo_source=_resolve(demo_source, base) if demo_source else None,
            fallback_policy=run_section.get("fallback_policy", "fail"),
            concurrency_limit=run_section.get("concurrency", 4),
            cache_enabled=cache_enabled,
            cache_dir=cache_dir,
            llm_shortcut=bool(run_section.get("llm_shortcut", False)),
            caption_instruction=run_section.get("caption_instruction", ""),
        )
    except (RethinkError, TypeError) as exc:
        raise ConfigError(f"{path}: [run]: {exc}") from exc

    dataset_section = doc.get("dataset")
    if not isinstance(dataset_section, dict):
        raise ConfigError(f"{path}: missing [dataset] section")
    _check_keys(dataset_section, _DATASET_KEYS, f"{path}: [dataset]")
    try:
        dataset = DatasetManifest(
            name=dataset_section.get("name", ""),
            format=dataset_section.get("format", ""),
            root=_resolve(dataset_section.get("root", ""), base),
            split=dataset_section.get("split", ""),
            limit=dataset_section.get("limit"),
            seed=dataset_section.get("seed"),
        )
    except (RethinkError, TypeError) as exc:
        raise ConfigError(f"{path}: [dataset]: {exc}") from exc

    report_section = doc.get("report", {})
    _check_keys(report_section, _REPORT_KEYS, f"{path}: [report]")
    metric = report_section.get("metric")
    if metric is not None and metric not in METRIC_KINDS:
        raise ConfigError(
            f"{path}: [report]: unknown metric {metric!r} (expected one of {METRIC_KINDS})"
        )
    return AppConfig(
        run=run,
        dataset=dataset,
        report_name=report_section.get("name", "ours"),
        metric=metric,
        vqa_subset_averaged=bool(report_section.get("vqa_subset_averaged", False)),
    )


def _descriptor(
    section: dict, role: str, base: Path, where: str
) -> BackendDescriptor:
    _check_keys(section, _BACKEND_KEYS, where)
    kind = section.get("kind")
    if kind not in (KIND_HTTP, KIND_SCRIPTED):
        raise ConfigError(
            f"{where}: kind must be {KIND_HTTP!r} or {KIND_SCRIPTED!r}, got {kind!r}"
        )
    decoding_section = section.get("decoding", {})
    _check_keys(decoding_section, _DECODING_KEYS, f"{where}.decoding")
    retry_section = section.get("retry", {})
    _check_keys(retry_section, _RETRY_KEYS, f"{where}.retry")
    defaults = DEFAULT_DECODING[role]
    script = section.get("script")
    try:
        decoding = DecodingParams(
            temperature=decoding_section.get("temperature", defaults.temperature),
            max_new_tokens=decoding_section.get("max_new_tokens", defaults.max_new_tokens),
            stop_sequences=tuple(
                decoding_section.get("stop_sequences", defaults.stop_sequences)
            ),
        )
        retry_defaults = RetryPolicy()
        retry = RetryPolicy(
            max_retries=retry_section.get("max_retries", retry_defaults.max_retries),
            backoff_base_s=retry_section.get("backoff_base_s", retry_defaults.backoff_base_s),
        )
        return BackendDescriptor(
            backend_id=section.get("backend_id", role),
            role=role,
            kind=kind,
            endpoint=section.get("endpoint"),
            model_name=section.get("model_name"),
            auth_ref=section.get("auth_ref"),
            script=_resolve(script, base) if script else None,
            decoding=decoding,
            retry=retry,
            max_in_flight=section.get("max_in_flight", 4),
        )
    except (RethinkError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def apply_overrides(
    app: AppConfig,
    *,
    limit: int | None = None,
    seed: int | None = None,
    concurrency: int | None = None,
    no_cache: bool = False,
) -> AppConfig:
    """Fold CLI flags over the file config (flags win)."""
    dataset = app.dataset
    run = app.run
    if limit is not None:
        dataset = replace(dataset, limit=limit)
    if seed is not None:
        dataset = replace(dataset, seed=seed)
    if concurrency is not None:
        run = replace(run, concurrency_limit=concurrency)
    if no_cache:
        run = replace(run, cache_enabled=False, cache_dir=None)
    return replace(app, dataset=dataset, run=run)


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a table")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")


def _resolve(value: str, base: Path) -> str:
    candidate = Path(value)
    return value if candidate.is_absolute() else str(base / candidate)
