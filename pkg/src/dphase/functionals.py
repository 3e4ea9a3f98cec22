"""Discrete energy functionals, their nodal gradients, and inequality kernels.

All functionals are assembled from three named sub-integrals of a
Dirichlet field u (per-cell gradient g, centroid values uc):

    aGradP = integral a |g|^p
    gradQ  = integral |g|^q
    mTerm  = integral m |uc|^q      (m = m1 - m2, split also recorded)

Values are computed with exact powers of the gradient magnitude.
Gradients regularize the degenerate flux weight |g|^(r-2) as
(g^2 + eps^2)^((r-2)/2); eps never enters the values, so value output is
bit-identical across eps choices.  The automatic eps is 1e-6 times the
mean gradient magnitude of the field at hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, IndefiniteConstraint, NumericError, PositivityError
from .grid import GridFunction
from .modular import Exponents, Regime

__all__ = [
    "Regularization",
    "FunctionalValue",
    "energy",
    "nehari_constraint",
    "phase_energy",
    "single_phase_energy",
    "nehari_scale",
    "rayleigh_single",
    "rayleigh_double",
    "picone_single",
    "picone_double",
    "monotonicity_gap",
    "MONOTONICITY_CONSTANT",
]

# empirical constant for the strong-monotonicity gap; a randomized sweep
# over r in {1.5, 2, 3} leaves a factor ~2 margin below this value
MONOTONICITY_CONSTANT = 4.0


@dataclass(frozen=True)
class Regularization:
    """Gradient-flux smoothing parameter.

    ``eps=None`` resolves to 1e-6 times the mean gradient magnitude of
    the field being differentiated.  ``eps=0`` is legal only when every
    gradient exponent in play is >= 2 (otherwise the flux weight is
    singular where the gradient vanishes).
    """

    eps: float | None = None

    def resolve(self, grad_mag: np.ndarray, min_exponent: float) -> float:
        if self.eps is None:
            return 1e-6 * float(grad_mag.mean())
        if not np.isfinite(self.eps) or self.eps < 0:
            raise DomainError(f"regularization eps must be >= 0, got {self.eps}")
        if self.eps == 0.0 and min_exponent < 2.0:
            raise DomainError(
                f"eps = 0 needs all gradient exponents >= 2, got exponent {min_exponent}"
            )
        return float(self.eps)


DEFAULT_REG = Regularization()


@dataclass(frozen=True)
class FunctionalValue:
    """Value, nodal gradient, and named sub-integrals of one functional.

    ``value`` is always recomputable from ``components`` via the
    defining formula.  ``constraint`` carries the associated manifold
    quantity when the functional has one, else None.
    """

    value: float
    gradient: np.ndarray
    components: dict = field(default_factory=dict)
    constraint: float | None = None


def _odd_power(v: np.ndarray, exponent: float) -> np.ndarray:
    """sign(v) |v|^exponent, finite at 0 for exponent > 0."""
    return np.sign(v) * np.abs(v) ** exponent


def _safe_power(mag: np.ndarray, exponent: float) -> np.ndarray:
    """mag^exponent with the convention 0^negative = 0 (used against zero fluxes)."""
    if exponent >= 0:
        return mag ** exponent
    out = np.zeros_like(mag)
    pos = mag > 0
    out[pos] = mag[pos] ** exponent
    return out


def _dot(g1: np.ndarray, g2: np.ndarray) -> np.ndarray:
    if g1.ndim == 1:
        return g1 * g2
    return g1[:, 0] * g2[:, 0] + g1[:, 1] * g2[:, 1]


def _flux_weight(mag: np.ndarray, r: float, eps: float) -> np.ndarray:
    """Regularized weight W with flux = W * g, W = (|g|^2 + eps^2)^((r-2)/2)."""
    if eps == 0.0:
        return _safe_power(mag, r - 2.0)
    return (mag * mag + eps * eps) ** ((r - 2.0) / 2.0)


def _scatter_grad_flux(u: GridFunction, weight_cells: np.ndarray) -> np.ndarray:
    """Nodal vector of d/du [sum w_c W_c |g_c|^2-style terms]: G^T (w W g)."""
    if u.grad.ndim == 1:
        return u.grid.scatter_flux(weight_cells * u.grad)
    return u.grid.scatter_flux(weight_cells[:, None] * u.grad)


def _components(u: GridFunction, exp: Exponents) -> dict:
    g = u.grid
    mag = u.grad_magnitude
    uq = np.abs(u.cells) ** exp.q
    return {
        "aGradP": g.integrate(g.a_cells * mag ** exp.p),
        "gradQ": g.integrate(mag ** exp.q),
        "mTerm": g.integrate(g.m_cells * uq),
        "m1Term": g.integrate(g.m1_cells * uq),
        "m2Term": g.integrate(g.m2_cells * uq),
    }


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not np.isfinite(lam):
        raise NumericError(f"lambda must be finite, got {lam}")
    return lam


def _mass_gradient(u: GridFunction, exponent: float) -> np.ndarray:
    """Nodal gradient of integral m |uc|^exponent, without the exponent factor."""
    g = u.grid
    return g.scatter_cells(g.quad_weights * g.m_cells * _odd_power(u.cells, exponent - 1.0))


def _zero_boundary(u: GridFunction, vec: np.ndarray) -> np.ndarray:
    vec[u.grid.boundary] = 0.0
    return vec


def energy(u: GridFunction, lam: float, exp: Exponents,
           reg: Regularization = DEFAULT_REG) -> FunctionalValue:
    """Constrained-minimization energy J(u) = aGradP/p + gradQ/q - lam*mTerm/q."""
    lam = _check_lambda(lam)
    comp = _components(u, exp)
    value = comp["aGradP"] / exp.p + comp["gradQ"] / exp.q - lam * comp["mTerm"] / exp.q
    g = u.grid
    mag = u.grad_magnitude
    eps = reg.resolve(mag, exp.pmin)
    wp = _flux_weight(mag, exp.p, eps)
    wq = _flux_weight(mag, exp.q, eps)
    grad = _scatter_grad_flux(u, g.quad_weights * (g.a_cells * wp + wq))
    grad -= lam * _mass_gradient(u, exp.q)
    return FunctionalValue(value, _zero_boundary(u, grad), comp)


def nehari_constraint(u: GridFunction, lam: float, exp: Exponents,
                      reg: Regularization = DEFAULT_REG) -> FunctionalValue:
    """Nehari constraint I(u) = aGradP + gradQ - lam*mTerm (zero on the manifold)."""
    lam = _check_lambda(lam)
    comp = _components(u, exp)
    value = comp["aGradP"] + comp["gradQ"] - lam * comp["mTerm"]
    g = u.grid
    mag = u.grad_magnitude
    eps = reg.resolve(mag, exp.pmin)
    wp = _flux_weight(mag, exp.p, eps)
    wq = _flux_weight(mag, exp.q, eps)
    grad = _scatter_grad_flux(
        u, g.quad_weights * (exp.p * g.a_cells * wp + exp.q * wq)
    )
    grad -= lam * exp.q * _mass_gradient(u, exp.q)
    return FunctionalValue(value, _zero_boundary(u, grad), comp)


def phase_energy(u: GridFunction, exp: Exponents,
                 reg: Regularization = DEFAULT_REG) -> FunctionalValue:
    """Two-phase Dirichlet energy aGradP/p + gradQ/q with its sphere constraint.

    The constraint slot carries (1/q) mTerm, the quantity fixed to 1 on
    the normalization sphere of the min-max sequence.
    """
    comp = _components(u, exp)
    value = comp["aGradP"] / exp.p + comp["gradQ"] / exp.q
    g = u.grid
    mag = u.grad_magnitude
    eps = reg.resolve(mag, exp.pmin)
    wp = _flux_weight(mag, exp.p, eps)
    wq = _flux_weight(mag, exp.q, eps)
    grad = _scatter_grad_flux(u, g.quad_weights * (g.a_cells * wp + wq))
    return FunctionalValue(
        value, _zero_boundary(u, grad), comp, constraint=comp["mTerm"] / exp.q
    )


def single_phase_energy(u: GridFunction, r: float,
                        reg: Regularization = DEFAULT_REG) -> FunctionalValue:
    """Weighted single-phase energy: integral a |grad u|^r.

    Components reuse the standard slots with this operation's exponent:
    aGradP holds the energy itself, mTerm the constraint integral m|u|^r.
    """
    r = float(r)
    if not (np.isfinite(r) and r > 1.0):
        raise DomainError(f"exponent r must exceed 1, got {r}")
    g = u.grid
    mag = u.grad_magnitude
    value = g.integrate(g.a_cells * mag ** r)
    ur = np.abs(u.cells) ** r
    comp = {
        "aGradP": value,
        "gradQ": 0.0,
        "mTerm": g.integrate(g.m_cells * ur),
        "m1Term": g.integrate(g.m1_cells * ur),
        "m2Term": g.integrate(g.m2_cells * ur),
    }
    eps = reg.resolve(mag, r)
    wr = _flux_weight(mag, r, eps)
    grad = r * _scatter_grad_flux(u, g.quad_weights * g.a_cells * wr)
    return FunctionalValue(value, _zero_boundary(u, grad), comp, constraint=comp["mTerm"])


def nehari_scale(u: GridFunction, lam: float, exp: Exponents) -> float | None:
    """Scaling that projects |u| onto the Nehari set, or None when impossible.

    In the p < q regime the ray through |u| crosses {I = 0} at

        t = (aGradP / (lam*mTerm - gradQ))^(1/(q-p))

    evaluated on |u|.  A nonpositive (or round-off small) denominator
    means the ray misses the set entirely; that outcome is a regular
    result, not an error, hence the None return.
    """
    lam = _check_lambda(lam)
    exp.require_regime(Regime.P_LESS_Q, "Nehari projection")
    au = abs(u)
    comp = _components(au, exp)
    numer = comp["aGradP"]
    denom = lam * comp["mTerm"] - comp["gradQ"]
    scale = abs(lam) * abs(comp["mTerm"]) + comp["gradQ"]
    if numer <= 0.0 or denom <= 1e-12 * scale:
        return None
    return float((numer / denom) ** (1.0 / (exp.q - exp.p)))


def rayleigh_single(u: GridFunction, r: float) -> float:
    """Single-phase Rayleigh quotient: integral a|grad u|^r over integral m|u|^r."""
    r = float(r)
    if not (np.isfinite(r) and r > 1.0):
        raise DomainError(f"exponent r must exceed 1, got {r}")
    g = u.grid
    numer = g.integrate(g.a_cells * u.grad_magnitude ** r)
    denom = g.integrate(g.m_cells * np.abs(u.cells) ** r)
    if denom <= 0.0:
        raise IndefiniteConstraint(
            f"Rayleigh denominator integral m|u|^r = {denom:.6g} is not positive"
        )
    return numer / denom


def rayleigh_double(u: GridFunction, exp: Exponents) -> float:
    """Two-phase Rayleigh quotient: (aGradP/p + gradQ/q) over (mTerm/q)."""
    comp = _components(u, exp)
    denom = comp["mTerm"] / exp.q
    if denom <= 0.0:
        raise IndefiniteConstraint(
            f"Rayleigh denominator (1/q) integral m|u|^q = {denom:.6g} is not positive"
        )
    return (comp["aGradP"] / exp.p + comp["gradQ"] / exp.q) / denom


def _positive_pair_cells(u: GridFunction, v: GridFunction):
    for name, f in (("u", u), ("v", v)):
        vals = f.values[f.grid.interior]
        if vals.size == 0 or vals.min() <= 1e-12 * max(vals.max(), 0.0) or vals.max() <= 0:
            raise PositivityError(
                f"field {name} must be strictly positive on interior nodes"
            )
    if u.grid is not v.grid:
        raise DomainError("Picone kernels need both fields on the same grid")
    return u.cells, v.cells


def _picone_pair_terms(gu, gv, ratio, grad_exp: float, ratio_exp: float):
    """One direction of the expanded Picone integrand.

    (1 + (s-1) rho^s) |gu|^t - s rho^(s-1) |gu|^(t-2) gu.gv
    with t = grad_exp, s = ratio_exp, rho = v/u evaluated per cell.
    """
    mag = np.abs(gu) if gu.ndim == 1 else np.hypot(gu[:, 0], gu[:, 1])
    s = ratio_exp
    cross = _safe_power(mag, grad_exp - 2.0) * _dot(gu, gv)
    return (1.0 + (s - 1.0) * ratio ** s) * mag ** grad_exp - s * ratio ** (s - 1.0) * cross


def picone_single(u: GridFunction, v: GridFunction, r: float) -> float:
    """Symmetrized single-phase Picone gap, nonnegative for positive pairs.

    Integrates a(x) times the expanded kernel in both (u, v) orderings.
    Zero exactly when the pair is proportional.  Raises PositivityError
    unless both fields are strictly positive on interior nodes.
    """
    r = float(r)
    if not (np.isfinite(r) and r > 1.0):
        raise DomainError(f"exponent r must exceed 1, got {r}")
    uc, vc = _positive_pair_cells(u, v)
    g = u.grid
    forward = _picone_pair_terms(u.grad, v.grad, vc / uc, r, r)
    backward = _picone_pair_terms(v.grad, u.grad, uc / vc, r, r)
    return g.integrate(g.a_cells * (forward + backward))


def picone_double(u: GridFunction, v: GridFunction, exp: Exponents) -> float:
    """Two-phase Picone gap, nonnegative for positive pairs when q < p.

    Combines the a-weighted p-gradient kernel with q-power ratios and
    the pure q kernel.  The Young-inequality split behind the p-part
    needs q < p; the reversed ordering is rejected with RegimeError
    because no analogous bound is available there.
    """
    exp.require_regime(Regime.Q_LESS_P, "two-phase Picone kernel")
    uc, vc = _positive_pair_cells(u, v)
    g = u.grid
    p, q = exp.p, exp.q
    part_p = _picone_pair_terms(u.grad, v.grad, vc / uc, p, q) \
        + _picone_pair_terms(v.grad, u.grad, uc / vc, p, q)
    part_q = _picone_pair_terms(u.grad, v.grad, vc / uc, q, q) \
        + _picone_pair_terms(v.grad, u.grad, uc / vc, q, q)
    return g.integrate(g.a_cells * part_p + part_q)


def monotonicity_gap(z1: np.ndarray, z2: np.ndarray, r: float, grid,
                     constant: float = MONOTONICITY_CONSTANT):
    """Both sides of the integrated strong-monotonicity inequality.

    Returns (lhs, rhs) with

        lhs = integral |z1 - z2|^r
        rhs = constant * pairing^(theta/2) * mass^(1 - theta/2)

    where pairing integrates (|z1|^(r-2) z1 - |z2|^(r-2) z2).(z1 - z2),
    mass integrates |z1|^r + |z2|^r, and theta = r for 1 < r < 2, else 2.
    lhs <= rhs holds for every field pair; the default constant carries
    an empirical safety margin of about 2.
    """
    r = float(r)
    if not (np.isfinite(r) and r > 1.0):
        raise DomainError(f"exponent r must exceed 1, got {r}")
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    if z1.shape != z2.shape:
        raise DomainError(f"field shapes differ: {z1.shape} vs {z2.shape}")
    theta = r if r < 2.0 else 2.0
    mag1 = np.abs(z1) if z1.ndim == 1 else np.hypot(z1[:, 0], z1[:, 1])
    mag2 = np.abs(z2) if z2.ndim == 1 else np.hypot(z2[:, 0], z2[:, 1])
    diff = z1 - z2
    magd = np.abs(diff) if diff.ndim == 1 else np.hypot(diff[:, 0], diff[:, 1])
    if z1.ndim == 1:
        sigma_diff = _safe_power(mag1, r - 2.0) * z1 - _safe_power(mag2, r - 2.0) * z2
    else:
        sigma_diff = _safe_power(mag1, r - 2.0)[:, None] * z1 \
            - _safe_power(mag2, r - 2.0)[:, None] * z2
    pairing = grid.integrate(np.maximum(_dot(sigma_diff, diff), 0.0))
    mass = grid.integrate(mag1 ** r + mag2 ** r)
    lhs = grid.integrate(magd ** r)
    rhs = constant * pairing ** (theta / 2.0) * mass ** (1.0 - theta / 2.0)
    return lhs, rhs
