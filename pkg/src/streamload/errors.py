"""Exception types shared across the toolkit."""

from __future__ import annotations


class StreamloadError(Exception):
    """Base class for all toolkit errors."""


class InvalidParam(StreamloadError, ValueError):
    """A parameter is outside its documented domain."""


class MetricUndefined(StreamloadError, ValueError):
    """The requested metric is not defined for this record (e.g. too few tokens)."""


class EmptyInput(StreamloadError, ValueError):
    """An aggregation was asked to summarize nothing."""


class Saturated(StreamloadError, ValueError):
    """Queue utilization is at or above 1; the steady-state quantity diverges."""


class InsufficientHardware(StreamloadError, RuntimeError):
    """The host does not have enough cores for the requested load."""


class InsufficientData(StreamloadError, ValueError):
    """Not enough stages/points for the requested analysis."""


class TokenizerUnavailable(StreamloadError, RuntimeError):
    """The configured tokenizer could not be constructed."""


class FormatError(StreamloadError, ValueError):
    """A file or payload does not match the documented schema."""


class ConfigError(StreamloadError, ValueError):
    """A configuration document failed validation; message names the field."""


class TargetUnreachable(StreamloadError, ConnectionError):
    """The target server did not accept a probe connection."""


class StageAborted(StreamloadError, RuntimeError):
    """A load stage was aborted (error-rate threshold exceeded or interrupted)."""


class BindError(StreamloadError, OSError):
    """The mock server could not bind its listen address."""


class MockStartFailure(StreamloadError, RuntimeError):
    """A locally launched mock server did not become ready."""
