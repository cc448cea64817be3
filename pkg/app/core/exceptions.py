from typing import Optional


class NavWorldError(Exception):
    """Base class for every domain failure raised by the toolkit."""


class ConfigError(NavWorldError):
    pass


class ShapeError(NavWorldError):
    pass


class OutOfBoundsError(NavWorldError):
    pass


class GenerationError(NavWorldError):
    pass


class DegenerateScaleError(NavWorldError):
    pass


class NormalizationError(NavWorldError):
    pass


class InsufficientHistoryError(NavWorldError):
    pass


class SingularSystemError(NavWorldError):
    pass


class RangeError(NavWorldError):
    pass


class ConstantTargetError(NavWorldError):
    pass


class PlanningError(NavWorldError):
    pass


class DegenerateEmbeddingError(NavWorldError):
    pass


class EmptyInputError(NavWorldError):
    pass


class ArtifactNotFoundError(NavWorldError):
    def __init__(self, path, what: str = "artifact"):
        self.path = path
        super().__init__(f"{what} not found: {path}")


class ChecksumError(NavWorldError):
    pass


class _SteppedError(NavWorldError):
    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class DivergenceError(_SteppedError):
    pass


class NumericError(_SteppedError):
    pass
