"""Double-phase modular, Luxemburg norm, and the weighted energy norm.

The modular of a cell field f is

    rho(f) = integral of a(x) |f|^p + |f|^q

and the Luxemburg norm is the unique positive lam with rho(f/lam) = 1
(zero for the zero field).  Norm and modular control each other through
the power sandwich: with pmin = min(p, q) and pmax = max(p, q),

    ||f|| < 1  implies  ||f||^pmax <= rho(f) <= ||f||^pmin

and the two bounds swap roles for ||f|| > 1.  Those bounds bracket the
bisection run by :func:`luxemburg_norm`, so the root is always enclosed.

The energy norm of a Dirichlet field u adds a coercive zero-order term
driven by the envelope weight max(m2, (1+|x|)^(-q)):

    ||u||_E = ||grad u||_luxemburg + (integral |u|^q envelope)^(1/q)
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DomainError, NumericError, RegimeError
from .grid import Grid, GridFunction

__all__ = [
    "Regime",
    "Exponents",
    "NormReport",
    "double_phase_integrand",
    "integrand_at_cell",
    "modular_value",
    "luxemburg_norm",
    "e_norm",
    "single_phase_modular",
    "sandwich_check",
]


class Regime(Enum):
    P_LESS_Q = "PLessQ"
    Q_LESS_P = "QLessP"


@dataclass(frozen=True)
class Exponents:
    """Growth exponents of one problem instance.

    p and q are the two phase exponents, both in (1, N) and distinct;
    N is the ambient dimension.  ``r`` is an optional single-phase
    exponent used by the auxiliary weighted problem; when present it
    must lie in (1, N) as well.
    """

    p: float
    q: float
    dimension: int
    r: float | None = None

    def __post_init__(self):
        n = self.dimension
        if int(n) != n or n < 2:
            raise DomainError(f"ambient dimension must be an integer >= 2, got {n}")
        for name in ("p", "q"):
            value = getattr(self, name)
            if not (np.isfinite(value) and 1.0 < value < n):
                raise DomainError(
                    f"exponent {name} must lie in (1, {n}), got {value}"
                )
        if self.p == self.q:
            raise DomainError("exponents p and q must be distinct")
        if self.r is not None and not (np.isfinite(self.r) and 1.0 < self.r < n):
            raise DomainError(f"exponent r must lie in (1, {n}), got {self.r}")

    @property
    def regime(self) -> Regime:
        return Regime.P_LESS_Q if self.p < self.q else Regime.Q_LESS_P

    @property
    def pmin(self) -> float:
        return min(self.p, self.q)

    @property
    def pmax(self) -> float:
        return max(self.p, self.q)

    @property
    def q_star(self) -> float:
        """Critical Sobolev exponent of q: qN/(N-q)."""
        return self.q * self.dimension / (self.dimension - self.q)

    def require_regime(self, regime: Regime, what: str) -> None:
        if self.regime is not regime:
            raise RegimeError(
                f"{what} requires exponent ordering {regime.value}, "
                f"got p={self.p}, q={self.q}"
            )


@dataclass(frozen=True)
class NormReport:
    """Norm/modular audit record for one field."""

    modular: float
    luxemburg: float
    lower_sandwich: float
    upper_sandwich: float
    e_norm: float
    lq_norm: float

    def to_json_dict(self) -> dict:
        return {
            "modular": self.modular,
            "luxemburg": self.luxemburg,
            "lowerSandwich": self.lower_sandwich,
            "upperSandwich": self.upper_sandwich,
            "eNorm": self.e_norm,
            "lqNorm": self.lq_norm,
        }


def _magnitude(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Pointwise magnitude of a per-cell field, scalar or vector valued."""
    f = np.asarray(f, dtype=float)
    if f.ndim == 2:
        f = np.hypot(f[:, 0], f[:, 1])
    if f.shape != (grid.n_cells,):
        raise NumericError(
            f"expected per-cell field of length {grid.n_cells}, got shape {f.shape}"
        )
    if not np.isfinite(f).all():
        raise NumericError("field contains non-finite entries")
    return np.abs(f)


def double_phase_integrand(t, a, exp: Exponents):
    """Pointwise growth integrand a * t^p + t^q for t >= 0.

    Vectorized over both ``t`` and the local weight values ``a``.
    Raises DomainError for negative t.
    """
    t = np.asarray(t, dtype=float)
    if (t < 0).any():
        raise DomainError("integrand argument t must be nonnegative")
    return np.asarray(a, dtype=float) * t ** exp.p + t ** exp.q


def integrand_at_cell(cell: int, t: float, exp: Exponents, grid: Grid) -> float:
    """Growth integrand evaluated with the a-sample of one grid cell."""
    if not 0 <= cell < grid.n_cells:
        raise DomainError(f"cell index {cell} out of range [0, {grid.n_cells})")
    return float(double_phase_integrand(t, grid.a_cells[cell], exp))


def modular_value(f: np.ndarray, exp: Exponents, grid: Grid) -> float:
    """Modular rho(f) = integral of a |f|^p + |f|^q over the domain."""
    mag = _magnitude(f, grid)
    return grid.integrate(grid.a_cells * mag ** exp.p + mag ** exp.q)


def single_phase_modular(f: np.ndarray, r: float, grid: Grid) -> float:
    """Weighted single-phase modular: integral of a |f|^r."""
    if not (np.isfinite(r) and r > 1.0):
        raise DomainError(f"exponent r must exceed 1, got {r}")
    mag = _magnitude(f, grid)
    return grid.integrate(grid.a_cells * mag ** r)


def luxemburg_norm(f: np.ndarray, exp: Exponents, grid: Grid, tol: float = 1e-12) -> float:
    """Luxemburg norm of a per-cell field by bracketed bisection.

    The power sandwich gives the initial bracket
    [rho^(1/pmax), rho^(1/pmin)] (orientation depending on rho vs 1),
    and lam -> rho(f/lam) is strictly decreasing, so plain bisection is
    stable even for strongly unbalanced exponents.  The iteration stops
    once the bracket is below ``tol`` absolutely or 1e-12 relatively.
    """
    if not (np.isfinite(tol) and tol > 0):
        raise DomainError(f"tolerance must be positive, got {tol}")
    mag = _magnitude(f, grid)
    if mag.max() == 0.0:
        return 0.0
    a_mag_p = grid.a_cells * mag ** exp.p
    mag_q = mag ** exp.q

    def rho(lam: float) -> float:
        return grid.integrate(a_mag_p * lam ** -exp.p + mag_q * lam ** -exp.q)

    rho0 = grid.integrate(a_mag_p + mag_q)
    if rho0 == 1.0:
        return 1.0
    lo = rho0 ** (1.0 / exp.pmax)
    hi = rho0 ** (1.0 / exp.pmin)
    if lo > hi:
        lo, hi = hi, lo
    # the sandwich bracket is exact in real arithmetic; widen a touch for round-off
    while rho(lo) < 1.0 and lo > 1e-300:
        lo *= 0.5
    while rho(hi) > 1.0 and hi < 1e300:
        hi *= 2.0
    while hi - lo > tol and hi - lo > 1e-12 * hi:
        mid = 0.5 * (lo + hi)
        if rho(mid) > 1.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def e_norm(u: GridFunction, exp: Exponents, tol: float = 1e-12) -> float:
    """Energy norm: Luxemburg norm of the gradient plus the envelope Lq term."""
    grid = u.grid
    grad_part = luxemburg_norm(u.grad, exp, grid, tol)
    zero_order = grid.integrate(grid.envelope_cells * np.abs(u.cells) ** exp.q)
    return grad_part + zero_order ** (1.0 / exp.q)


def lq_norm(f: np.ndarray, q: float, grid: Grid) -> float:
    """Plain Lq norm of a per-cell field (embedding diagnostics)."""
    mag = _magnitude(f, grid)
    return grid.integrate(mag ** q) ** (1.0 / q)


def sandwich_check(
    f: np.ndarray,
    exp: Exponents,
    grid: Grid,
    u: GridFunction | None = None,
    tol: float = 1e-12,
) -> NormReport:
    """Norm/modular report for one field.

    ``lower_sandwich`` and ``upper_sandwich`` are the power bounds that
    must enclose the modular for the computed Luxemburg norm.  When the
    field is the value trace of a Dirichlet function, pass ``u`` as well
    and the report records its energy norm; otherwise that slot is 0.
    """
    rho = modular_value(f, exp, grid)
    lam = luxemburg_norm(f, exp, grid, tol)
    if lam <= 1.0:
        lower, upper = lam ** exp.pmax, lam ** exp.pmin
    else:
        lower, upper = lam ** exp.pmin, lam ** exp.pmax
    return NormReport(
        modular=rho,
        luxemburg=lam,
        lower_sandwich=lower,
        upper_sandwich=upper,
        e_norm=0.0 if u is None else e_norm(u, exp, tol),
        lq_norm=lq_norm(f, exp.q, grid),
    )
