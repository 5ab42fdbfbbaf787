"""Exception hierarchy shared across the package."""


class AnidsError(Exception):
    """Base class for every error raised by this package."""


class NotPositiveDefinite(AnidsError, ValueError):
    pass


class DomainError(AnidsError, ValueError):
    pass


class ParseError(AnidsError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CoincidentAtoms(AnidsError, ValueError):
    pass


class Diverged(AnidsError, RuntimeError):
    pass


class DimensionMismatch(AnidsError, ValueError):
    pass


class EmptyMask(AnidsError, ValueError):
    pass


class MissingLabels(AnidsError, ValueError):
    pass


class NonFiniteGradient(AnidsError, FloatingPointError):
    pass
