"""Exception taxonomy shared across the package.

The split that matters operationally: :class:`BackendUnavailableError` is the
only retryable failure; everything else either aborts the run (configuration,
usage) or fails a single instance and lets the run continue (stage failures).
"""

from __future__ import annotations


class RethinkError(Exception):
    """Base class for every error this package raises on purpose."""


class InvalidArgumentError(RethinkError, ValueError):
    """A caller violated an operation's precondition."""


class UnsupportedArityError(InvalidArgumentError):
    """A sequence template was asked for more positions than it has words for."""


class ConfigError(RethinkError):
    """Non-retryable configuration problem.

    Covers unreadable/invalid config files, bad descriptor combinations,
    role mismatches, missing credentials, and HTTP 4xx responses.
    """


class BackendUnavailableError(RethinkError):
    """Transport-level failure talking to a model endpoint; safe to retry."""


class UnscriptedPromptError(RethinkError):
    """A scripted backend has no entry for the requested call."""

    def __init__(self, role: str, digest: str):
        super().__init__(f"no scripted completion for role={role} match_digest={digest}")
        self.role = role
        self.digest = digest


class InputUnavailableError(RethinkError):
    """An image locator could not be resolved to readable bytes."""


class EmptyCompletionError(RethinkError):
    """A backend returned empty text where a completion is required."""


class StageFailureError(RethinkError):
    """A pipeline stage failed for one instance.

    ``str()`` yields the trace failure marker, ``"<stage>: <message>"``.
    """

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message


class LoadError(RethinkError):
    """A dataset or trace file could not be parsed."""


class OutputError(RethinkError):
    """An output path could not be written."""


class CacheCorruptError(RethinkError):
    """The cache log contains a record that cannot be decoded."""


class MetricUndefinedError(RethinkError):
    """A metric was asked to score an instance it is undefined for."""


class EmptyReportError(RethinkError):
    """An aggregate was requested over zero scored instances."""
