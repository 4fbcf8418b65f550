"""Exception hierarchy shared across the package.

Validation problems (bad arguments, malformed inputs) map to CLI exit code 2,
numerical problems (divergence, non-convergence) to exit code 3.
"""

from __future__ import annotations


class PertmapError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(PertmapError, ValueError):
    """An argument violates a documented precondition."""


class NumericalFailureError(PertmapError, RuntimeError):
    """A numerical routine failed to converge or produced non-finite values."""


class UnsupportedOperationError(PertmapError, TypeError):
    """The computation graph contains a primitive the engine cannot differentiate."""


class DegenerateEffectError(InvalidArgumentError):
    """The observational and interventional distributions are indistinguishable,
    so an effect-relative quantity is undefined."""


class UndefinedMetricError(InvalidArgumentError):
    """A metric is undefined for the given inputs (e.g. no positive labels)."""


class UndefinedCorrelationError(UndefinedMetricError):
    """A correlation is undefined because one input has zero variance."""
