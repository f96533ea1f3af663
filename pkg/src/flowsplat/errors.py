"""Exception types shared across the package."""


class FlowSplatError(Exception):
    pass


class ConfigError(FlowSplatError, ValueError):
    pass


class ProjectionDegenerateError(FlowSplatError, ValueError):
    pass


class InvalidDepthError(FlowSplatError, ValueError):
    pass


class CutLocusError(FlowSplatError, ValueError):
    """Rotation too close to pi for a unique logarithm."""


class DegenerateGaussianError(FlowSplatError, ValueError):
    pass


class CorrespondenceError(FlowSplatError, ValueError):
    pass


class EmptySupportError(FlowSplatError, ValueError):
    pass


class AlignmentFailure(FlowSplatError, RuntimeError):
    pass


class GenerationError(FlowSplatError, RuntimeError):
    pass


class NumericalFailure(FlowSplatError, FloatingPointError):
    """A loss term or gradient went non-finite; ``term`` names the culprit."""

    def __init__(self, term: str, message: str | None = None):
        self.term = term
        super().__init__(message or f"non-finite value in {term}")


class CheckpointError(FlowSplatError, IOError):
    pass
