"""Exception hierarchy shared across the package."""


class IflabError(Exception):
    """Base class for all errors raised by iflab."""


class DimensionError(IflabError, ValueError):
    pass


class DefinitenessError(IflabError, ValueError):
    """Raised when a matrix that must be positive definite is not.

    ``pivot`` holds the zero-based index of the first failing pivot, or
    ``None`` when the failing entry is not a factorization pivot (for
    example a non-positive diagonal preconditioner entry).
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class NonFiniteError(IflabError, FloatingPointError):
    pass


class SizeError(IflabError, ValueError):
    pass


class LabelError(IflabError, ValueError):
    pass


class EmptySetError(IflabError, ValueError):
    pass


class DivergenceError(IflabError, RuntimeError):
    def __init__(self, message, last_finite_step=None, seed_index=None):
        super().__init__(message)
        self.last_finite_step = last_finite_step
        self.seed_index = seed_index


class ParseError(IflabError, ValueError):
    pass


class UsageError(IflabError, ValueError):
    pass


class PartitionError(IflabError, ValueError):
    pass
