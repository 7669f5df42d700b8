"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Invalid configuration or hyperparameter."""


class DomainError(ValueError):
    """Value outside the mathematical domain of an operation (e.g. non-positive scale)."""


class EncodingError(ValueError):
    """Integer code cannot be represented at the requested bit-width."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite.

    ``last_good`` holds the parameter snapshot taken before the failing step.
    """

    def __init__(self, message, last_good=None, iteration=None):
        super().__init__(message)
        self.last_good = last_good
        self.iteration = iteration
