"""Exception hierarchy shared across the package.

CLI exit-code mapping: ConfigError (and subclasses) -> 2, DataError (and
subclasses) -> 3, DivergenceError -> 4, anything else -> 1.
"""


class RemoteDetError(Exception):
    """Base class for all package errors."""


class ShapeError(RemoteDetError, ValueError):
    """Raised when tensor shapes are inconsistent with an op's contract."""


class ValidationError(RemoteDetError, ValueError):
    """Raised when parameter values violate a precondition (e.g. non-finite)."""


class EvaluationError(RemoteDetError, RuntimeError):
    """Raised when a user-supplied function produces a non-finite value."""


class ConfigError(RemoteDetError, ValueError):
    """Invalid configuration, flags, or model/checkpoint mismatch."""


class CheckpointVersionError(ConfigError):
    """Checkpoint file has an unsupported version or incompatible metadata."""


class DataError(RemoteDetError, ValueError):
    """Invalid dataset, annotation, or image content."""


class ParseError(DataError):
    """Malformed annotation line; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class VocabularyError(DataError):
    """Annotation references a class name outside the configured vocabulary."""


class DivergenceError(RemoteDetError, RuntimeError):
    """Training produced a non-finite loss; carries epoch/step context."""

    def __init__(self, message: str, epoch: int, step: int):
        self.epoch = epoch
        self.step = step
        super().__init__(f"{message} (epoch {epoch}, step {step})")
