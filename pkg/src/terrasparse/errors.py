class DimensionError(ValueError):
    """Operand shapes do not agree."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid hyperparameters. ``violations`` lists every problem found."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [message])


class CorruptionError(RuntimeError):
    """Internal state (indices, caches, checkpoints) is inconsistent."""


class TrainingDiverged(RuntimeError):
    pass
