"""Exception hierarchy. Each class maps to one CLI exit code."""


class LusinError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1


class ConfigError(LusinError):
    """Malformed or inconsistent run configuration."""

    exit_code = 2


class BudgetError(LusinError):
    """A certified bound could not be met, or a precondition on budgets failed."""

    exit_code = 3

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class GridTooCoarseError(LusinError):
    """The ambient grid cannot realize a requested budget."""

    exit_code = 4


class EmptyDomainError(LusinError):
    """An operation needs at least one included cell."""

    exit_code = 4


class FingerprintMismatchError(LusinError):
    """Two reports describe different inputs and cannot be compared."""

    exit_code = 5
