"""Exception hierarchy shared by every module."""
from __future__ import annotations


class SpotfolioError(Exception):
    """Base class for all library errors."""


class InputError(SpotfolioError):
    """Bad or inconsistent input data (CLI exit code 2)."""


class MalformedRow(InputError):
    def __init__(self, path, line, reason):
        self.path = str(path)
        self.line = line
        self.reason = reason
        super().__init__(f"{self.path}:{line}: {reason}")


class DuplicateMarket(InputError):
    pass


class NonPositiveValue(InputError):
    pass


class UnknownMarket(InputError):
    pass


class EmptyTrace(InputError):
    pass


class NoPriorObservation(InputError):
    pass


class NoCommonWindow(InputError):
    pass


class EmptySeries(InputError):
    pass


class LengthMismatch(InputError):
    pass


class TooShort(InputError):
    pass


class NonSymmetricInput(InputError):
    pass


class InvalidSpec(InputError):
    pass


class NoCandidateMarkets(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class TooManyMarkets(InputError):
    pass


class KOutOfRange(InputError):
    pass


class UnknownApp(SpotfolioError):
    pass


class StaleCache(SpotfolioError):
    pass


class TraceHorizonExceeded(SpotfolioError):
    pass


class NotConverged(SpotfolioError):
    """Iteration cap reached before the optimality gap closed.

    ``best`` holds the best feasible portfolio found and ``gap`` an upper
    bound on how far its objective is from the optimum.
    """

    def __init__(self, best, gap, iterations):
        self.best = best
        self.gap = gap
        self.iterations = iterations
        super().__init__(
            f"solver stopped after {iterations} iterations with gap {gap:.3e}"
        )
