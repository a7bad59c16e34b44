"""Exception types raised across the package."""

from __future__ import annotations

from typing import Any


class SaaaError(ValueError):
    """Base class for all domain errors."""


class ShapeError(SaaaError):
    """Tensor shapes do not conform for an operation."""


class InvalidArgumentError(SaaaError):
    """An argument is outside its documented domain."""


class EmptyQuestionError(SaaaError):
    """A question has no tokens left after tokenization."""


class InvalidStateError(SaaaError):
    """An operation was applied to a value in the wrong state."""


class InvalidRecordError(SaaaError):
    """A dataset record violates the record format."""


class ConfigurationError(SaaaError):
    """A fatal configuration problem; the command line exits with status 2."""


class FeatureFormatError(SaaaError):
    """A feature file is malformed.

    Attributes:
        offset: The byte offset at which the problem was detected.
    """

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(SaaaError):
    """A checkpoint cannot be loaded.

    Attributes:
        found_version: The version read from the file, if it got that far.
        expected_version: The version this package writes.
    """

    def __init__(
        self,
        message: str,
        found_version: int | None = None,
        expected_version: int | None = None,
    ) -> None:
        if found_version is not None:
            message = (
                f"{message} (file version {found_version}, "
                f"supported version {expected_version})"
            )
        super().__init__(message)
        self.found_version = found_version
        self.expected_version = expected_version


class TrainingDivergedError(SaaaError):
    """The training loss became non-finite.

    Attributes:
        step: The optimizer step at which the loss was observed.
        dump: Diagnostic values captured at that step.
    """

    def __init__(self, step: int, dump: dict[str, Any]) -> None:
        super().__init__(f"Non-finite loss at step {step}: {dump}")
        self.step = step
        self.dump = dump


class SkipExample(Exception):
    """Signals that an example has no usable answers and must be skipped.

    Callers count skips; it is not a `SaaaError`.
    """
