"""Exception types.  Each carries the CLI exit code it maps to."""


class TryOnError(Exception):
    exit_code = 1


class ValidationError(TryOnError, ValueError):
    """Bad configuration or arguments (invalid ranges, unknown keys, shapes)."""

    exit_code = 2


class ShapeError(ValidationError):
    pass


class ParameterRangeError(ValidationError):
    pass


class GeometryError(ValidationError):
    pass


class DegenerateSampleError(ValidationError):
    pass


class UsageError(ValidationError):
    pass


class DependencyError(TryOnError):
    """An upstream artifact (checkpoint, dataset) is missing."""

    exit_code = 3


class NumericalError(TryOnError, ArithmeticError):
    """Singular systems, non-invertible warps, NaN losses."""

    exit_code = 4


class TrainingDivergedError(NumericalError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss
