"""
Error types shared across the detection pipeline.
"""

from typing import Optional


class PipelineError(Exception):
    """Base class for all pipeline errors."""


class DatasetFormatError(PipelineError, ValueError):
    """A dataset record could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownEventTypeError(PipelineError, LookupError):
    """An event name is not part of the event catalog."""

    def __init__(self, name: str, line: Optional[int] = None):
        self.name = name
        self.line = line
        message = f"unknown event type: {name!r}"
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NoAnchorStoryError(PipelineError, ValueError):
    """An attack needs a story the drive does not contain."""

    def __init__(self, kind: str, story: str, drive_id: str = ""):
        self.kind = kind
        self.story = story
        self.drive_id = drive_id
        super().__init__(f"no anchor story for {kind}: drive {drive_id or '?'} has no {story!r}")


class InsufficientDrivesError(PipelineError, ValueError):
    """Not enough (compatible) drives to build the requested set."""


class TrainingError(PipelineError, ValueError):
    """Model training received unusable input."""


class ModelValidationError(PipelineError, ValueError):
    """A model or detector bundle is internally inconsistent."""


class SessionError(PipelineError, ValueError):
    """An ingested event does not fit the vehicle's session state."""


class UnregisteredVehicleError(PipelineError, LookupError):
    """No detector bundle is registered for the vehicle."""

    def __init__(self, vehicle_id: str):
        self.vehicle_id = vehicle_id
        super().__init__(f"vehicle {vehicle_id!r} has no registered model")


class ConfigError(PipelineError, ValueError):
    """Configuration file or values are invalid."""
