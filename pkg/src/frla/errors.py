"""Exception hierarchy shared by every module."""


class FRLAError(Exception):
    """Base class for all package errors."""


class ShapeError(FRLAError, ValueError):
    pass


class UsageError(FRLAError, ValueError):
    pass


class DomainError(FRLAError, ValueError):
    """Input outside the mathematical domain of an operation (e.g. negative probabilities)."""


class EmptyBatchError(FRLAError, ValueError):
    pass


class DegenerateInputError(FRLAError, ValueError):
    """Raised when a pooled feature has zero norm (dead encoder)."""


class CheckpointError(FRLAError):
    pass


class DatasetError(FRLAError):
    pass


class ConfigError(FRLAError):
    pass


class TrainingError(FRLAError):
    pass


class EvaluationError(FRLAError):
    pass


class ReportError(FRLAError):
    pass
