"""Exception taxonomy shared by all modules.

Every failure mode raised on purpose by this package derives from
:class:`DPhaseError`, so callers can catch one base class at scan level
and keep going.  Two outcomes that look like failures are deliberately
*not* exceptions: a Nehari projection that does not exist is reported by
returning ``None`` from the projection routine, and a lambda value that
admits no nontrivial solution is reported with the ``Degenerate`` result
type in :mod:`dphase.eigensolve`.
"""

from __future__ import annotations


class DPhaseError(Exception):
    """Base class for all package-specific errors."""


class InvalidWeight(DPhaseError):
    """A coefficient or weight sample violates its sign/nontriviality rules."""


class InvalidGeometry(DPhaseError):
    """Truncation radius, resolution, or radial dimension out of range."""


class DimensionError(DPhaseError):
    """An array has the wrong length or shape for this grid."""


class DomainError(DPhaseError):
    """A scalar argument lies outside the admissible domain."""


class NumericError(DPhaseError):
    """Non-finite data where finite values are required."""


class RegimeError(DPhaseError):
    """The exponent ordering does not match the requested operation."""


class PositivityError(DPhaseError):
    """An input field must be strictly positive on interior nodes but is not."""


class IndefiniteConstraint(DPhaseError):
    """A sign-constrained integral (for example a Rayleigh denominator) is <= 0."""


class NoConvergence(DPhaseError):
    """An iterative solve stagnated before reaching its residual target.

    The best iterate found so far is attached as ``best`` (an EigenPair)
    when one exists, so scans can log partial information.
    """

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best
