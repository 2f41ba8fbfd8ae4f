"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Arguments violate an operation's preconditions."""


class EmptyStatsError(InvalidInputError):
    """Pitch statistics requested over a set with no voiced frames."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class InvalidStateError(RuntimeError):
    """An intermediate result is structurally impossible (e.g. zero-length expansion)."""


class UndefinedMetricError(ArithmeticError):
    """A metric has no defined value for the given inputs."""


class ProviderError(RuntimeError):
    """An embedding provider failed to produce embeddings."""

    def __init__(self, identifier, message):
        super().__init__(f"[{identifier}] {message}")
        self.identifier = identifier


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the path of the diagnostic dump."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
