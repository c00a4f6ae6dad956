"""Exception hierarchy shared by every isda_lab module."""


class IsdaError(Exception):
    """Base class for all isda_lab errors."""


class DomainError(IsdaError, ValueError):
    """An input violates an operation's precondition."""


class NumericError(IsdaError, ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message: str, *, index: int | None = None) -> None:
        if index is not None:
            message = f"{message} (sample {index})"
        super().__init__(message)
        self.index = index


class IndefiniteMatrixError(NumericError):
    """Cholesky factorization failed even at the largest allowed jitter."""


class DivergenceError(NumericError):
    """Training loss became non-finite."""

    def __init__(self, message: str, *, iteration: int) -> None:
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


class ConfigError(IsdaError, ValueError):
    """Experiment config failed schema validation."""


class DatasetError(IsdaError, ValueError):
    """Dataset files or split requests are malformed."""


class SnapshotError(IsdaError, ValueError):
    """Binary snapshot or checkpoint cannot be decoded."""
