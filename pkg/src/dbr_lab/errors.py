"""Exception types shared across the package."""


class DbrLabError(Exception):
    """Base class for all package errors."""


class PreconditionViolation(DbrLabError, ValueError):
    pass


class SupportViolation(DbrLabError, ValueError):
    """A target measure puts mass where the reference measure has none."""


class ClassSizeError(DbrLabError, ValueError):
    pass


class ClassTooLarge(DbrLabError, ValueError):
    pass


class SingularSystem(DbrLabError, ArithmeticError):
    pass


class EmptyVersionSpace(DbrLabError, RuntimeError):
    """Raised when the confidence set excludes every candidate."""

    def __init__(self, message, episode=None):
        super().__init__(message)
        self.episode = episode


class ConfigError(DbrLabError, ValueError):
    pass


class ScenarioError(DbrLabError, ValueError):
    pass
