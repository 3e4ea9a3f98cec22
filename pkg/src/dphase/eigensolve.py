"""Constrained solvers for the two-phase and auxiliary single-phase problems.

Strategy shared by all solves: projected descent on the relevant energy
over its constraint set, with the descent direction smoothed through the
inverse Dirichlet stiffness matrix (a Sobolev-metric gradient), Armijo
backtracking, exact radial re-projection after every step, deterministic
multi-start, and an optional Newton polish of the first-order system
once descent has located the basin.  Saddle-type min-max modes are
approximated from above by maximizing over sampled symmetric subspaces
and then polished with the same Newton step; those modes are flagged
``heuristic`` in their metadata.

Residuals are always measured on the weak form of the relevant
Euler-Lagrange equation, in the max norm over interior nodes, scaled by
max(1, energy norm of the iterate).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from . import functionals as fn
from .errors import DomainError, NoConvergence, NumericError
from .functionals import (
    DEFAULT_REG,
    Regularization,
    _flux_weight,
    _mass_gradient,
    _odd_power,
    _safe_power,
    _scatter_grad_flux,
)
from .grid import Grid, GridFunction
from .modular import Exponents, Regime, e_norm

logger = logging.getLogger(__name__)

__all__ = [
    "SolverConfig",
    "EigenPair",
    "Degenerate",
    "solve_single_phase",
    "reference_principal",
    "solve_nehari",
    "solve_min_max",
    "pde_residual",
]


@dataclass(frozen=True)
class SolverConfig:
    """Iteration budget and tolerances shared by every solve."""

    max_iters: int = 2000
    tol_residual: float = 1e-8
    tol_stagnation: float = 1e-12
    restarts: int = 4
    deflation_strength: float = 100.0
    step_rule: str = "Armijo"
    seed: int = 0

    def __post_init__(self):
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise DomainError(f"max_iters must be a positive integer, got {self.max_iters}")
        if not (np.isfinite(self.tol_residual) and self.tol_residual > 0):
            raise DomainError(f"tol_residual must be positive, got {self.tol_residual}")
        if not (np.isfinite(self.tol_stagnation) and self.tol_stagnation >= 0):
            raise DomainError(f"tol_stagnation must be >= 0, got {self.tol_stagnation}")
        if int(self.restarts) != self.restarts or self.restarts < 1:
            raise DomainError(f"restarts must be a positive integer, got {self.restarts}")
        if not (np.isfinite(self.deflation_strength) and self.deflation_strength > 0):
            raise DomainError(
                f"deflation_strength must be positive, got {self.deflation_strength}"
            )
        if self.step_rule not in ("Armijo", "FixedDecay"):
            raise DomainError(f"step_rule must be Armijo or FixedDecay, got {self.step_rule}")
        if int(self.seed) != self.seed:
            raise DomainError(f"seed must be an integer, got {self.seed}")


@dataclass
class EigenPair:
    """One converged (or best-effort) eigenpair with solver metadata."""

    eigenvalue: float
    u: GridFunction
    residual: float
    iterations: int
    regime: str
    constraint_value: float
    heuristic: bool = False
    meta: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "lambda": self.eigenvalue,
            "residual": self.residual,
            "iterations": self.iterations,
            "regime": self.regime,
            "constraintValue": self.constraint_value,
            "heuristic": self.heuristic,
        }


@dataclass(frozen=True)
class Degenerate:
    """Outcome of a Nehari solve whose constraint set is unreachable.

    Below the reference eigenvalue no ray admits a Nehari projection, so
    the only solution is the trivial one.  This is a regular result of a
    lambda scan, not an error.
    """

    lam: float
    attempts: int
    message: str = "no ray admits a Nehari projection; only the trivial solution remains"


# ---------------------------------------------------------------------------
# starts and small helpers


def _bump_values(dist: np.ndarray, radius: float) -> np.ndarray:
    t2 = (dist / radius) ** 2
    out = np.zeros_like(dist)
    inside = t2 < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - t2[inside]))
    return out


def _distances(grid: Grid, center) -> np.ndarray:
    nodes = grid.nodes
    if nodes.ndim == 1:
        return np.abs(nodes - center)
    return np.hypot(nodes[:, 0] - center[0], nodes[:, 1] - center[1])


def _random_start(grid: Grid, rng: np.random.Generator, signed: bool = False) -> np.ndarray:
    """Smooth random bump mixture concentrated where m1 is largest."""
    center = grid.nodes[int(np.argmax(grid.weights.m1))]
    radius = grid.geometry.radius
    vals = np.zeros(grid.n_nodes)
    for _ in range(3):
        if grid.nodes.ndim == 1:
            c = center + rng.uniform(-0.2, 0.2) * radius
        else:
            c = center + rng.uniform(-0.2, 0.2, size=2) * radius
        width = radius * rng.uniform(0.15, 0.4)
        amp = rng.uniform(0.4, 1.0)
        if signed:
            amp *= rng.choice([-1.0, 1.0])
        vals += amp * _bump_values(_distances(grid, c), width)
    if np.abs(vals).max() < 1e-12:
        vals = _bump_values(_distances(grid, center), 0.5 * radius)
    return vals


def _colinearity(grid: Grid, c1: np.ndarray, c2: np.ndarray) -> float:
    w = grid.quad_weights
    n1 = math.sqrt(float(np.dot(w * c1, c1)))
    n2 = math.sqrt(float(np.dot(w * c2, c2)))
    if n1 == 0.0 or n2 == 0.0:
        return 0.0
    return abs(float(np.dot(w * c1, c2))) / (n1 * n2)


def _v_norm(u: GridFunction, coeff_cells: np.ndarray, r: float) -> float:
    """Single-phase space norm analogue used to scale residuals."""
    g = u.grid
    seminorm = g.integrate(coeff_cells * u.grad_magnitude ** r) ** (1.0 / r)
    zero = g.integrate(g.envelope_cells * np.abs(u.cells) ** r) ** (1.0 / r)
    return seminorm + zero


# ---------------------------------------------------------------------------
# descent engine


@dataclass
class _DescentOut:
    values: np.ndarray
    value: float
    residual: float
    multiplier: float
    iterations: int
    converged: bool


def _descend(grid, value_grad, constraint_grad, scale_fn, project, start,
             cfg: SolverConfig, callback=None) -> _DescentOut | None:
    """Projected, stiffness-preconditioned descent with Armijo backtracking.

    ``project`` maps raw nodal values onto the constraint set or returns
    None when no projection exists; a None on the initial point aborts
    (the caller counts the failed attempt), a None inside the line
    search just halves the step.
    """
    idx = np.flatnonzero(grid.interior)
    vals = project(np.asarray(start, dtype=float))
    if vals is None:
        return None
    u = grid.function(vals)
    f, gr = value_grad(u)
    armijo = cfg.step_rule == "Armijo"
    history: list[float] = [f]
    theta = 0.0
    res = np.inf
    converged = False
    iterations = 0

    def kkt(gr_vec, u_now):
        c = constraint_grad(u_now)
        ci = c[idx]
        cc = float(np.dot(ci, ci))
        th = float(np.dot(gr_vec[idx], ci) / cc) if cc > 0 else 0.0
        rvec = gr_vec - th * c
        return th, rvec, float(np.abs(rvec[idx]).max()) / scale_fn(u_now)

    for it in range(1, cfg.max_iters + 1):
        iterations = it
        theta, rvec, res = kkt(gr, u)
        if res <= cfg.tol_residual:
            converged = True
            break
        d = grid.stiffness_solve(rvec)
        slope = float(np.dot(rvec[idx], d[idx]))
        if not np.isfinite(slope) or slope <= 0.0:
            d = rvec
            slope = float(np.dot(rvec[idx], rvec[idx]))
        step = 1.0 if armijo else 1.0 / (1.0 + it / 50.0)
        accepted = False
        while step > 1e-16:
            cand = project(u.values - step * d)
            if cand is not None:
                cu = grid.function(cand)
                fc, gc = value_grad(cu)
                good = np.isfinite(fc) and (
                    fc <= f - 1e-4 * step * slope if armijo else True
                )
                if good:
                    u, f, gr = cu, fc, gc
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            break
        if callback is not None:
            callback(it, u)
        history.append(f)
        if len(history) > 25:
            old = history[-26]
            if old - f <= cfg.tol_stagnation * max(1.0, abs(old)):
                break

    if not converged:
        theta, _, res = kkt(gr, u)
        converged = res <= cfg.tol_residual
    return _DescentOut(u.values.copy(), f, res, theta, iterations, converged)


# ---------------------------------------------------------------------------
# Hessians and Newton polish


def _flux_hessian(grid: Grid, u: GridFunction, coeff: np.ndarray, r: float,
                  eps: float) -> sparse.csr_matrix:
    """Jacobian of the nodal flux gradient G^T (w coeff W_r(g) g)."""
    mag = u.grad_magnitude
    if eps > 0.0:
        m2 = mag * mag + eps * eps
        w_flux = m2 ** ((r - 2.0) / 2.0)
        curv = (r - 2.0) * m2 ** ((r - 4.0) / 2.0)
    else:
        w_flux = _safe_power(mag, r - 2.0)
        curv = (r - 2.0) * _safe_power(mag, r - 4.0)
    w = grid.quad_weights * coeff
    if grid.grad_dim == 1:
        g = grid._grads[0]
        diag = sparse.diags(w * (w_flux + curv * u.grad * u.grad))
        return (g.T @ diag @ g).tocsr()
    gx_mat, gy_mat = grid._grads
    gx, gy = u.grad[:, 0], u.grad[:, 1]
    dxx = sparse.diags(w * (w_flux + curv * gx * gx))
    dyy = sparse.diags(w * (w_flux + curv * gy * gy))
    dxy = sparse.diags(w * curv * gx * gy)
    out = gx_mat.T @ dxx @ gx_mat + gy_mat.T @ dyy @ gy_mat
    out = out + gx_mat.T @ dxy @ gy_mat + gy_mat.T @ dxy @ gx_mat
    return out.tocsr()


def _mass_hessian(grid: Grid, u: GridFunction, s: float) -> sparse.csr_matrix:
    """A^T diag(w m |uc|^(s-2)) A, the curvature kernel of integral m|uc|^s."""
    diag = sparse.diags(grid.quad_weights * grid.m_cells * _safe_power(np.abs(u.cells), s - 2.0))
    return (grid._avg.T @ diag @ grid._avg).tocsr()


def _polish(grid: Grid, values: np.ndarray, grad_fn, hess_fn, scale_fn,
            cons_fn=None, max_iter: int = 40):
    """Damped Newton on the first-order system, optionally with one constraint.

    ``cons_fn(u) -> (value - target, grad, hess)`` when present adds a
    bordered multiplier unknown.  Returns (values, multiplier, scaled
    residual, newton_steps) for the best iterate seen; the caller
    decides whether to adopt it.
    """
    idx = np.flatnonzero(grid.interior)
    u = grid.function(values)

    def full_residual(u_now):
        gr = grad_fn(u_now)
        if cons_fn is None:
            return gr, None, 0.0, gr
        cval, cgrad, _ = cons_fn(u_now)
        ci = cgrad[idx]
        cc = float(np.dot(ci, ci))
        th = float(np.dot(gr[idx], ci) / cc) if cc > 0 else 0.0
        return gr, cgrad, th, gr - th * cgrad

    gr, cgrad, theta, rvec = full_residual(u)
    cval = cons_fn(u)[0] if cons_fn is not None else 0.0

    def merit(rv, cv):
        return math.sqrt(float(np.dot(rv[idx], rv[idx])) + cv * cv)

    best = (u.values.copy(), theta, float(np.abs(rvec[idx]).max()) / scale_fn(u))
    best_merit = merit(rvec, cval)
    steps = 0
    for _ in range(max_iter):
        h = hess_fn(u)
        if cons_fn is not None:
            _, cgrad, chess = cons_fn(u)
            h = h - theta * chess
            hi = h[idx][:, idx]
            ci = cgrad[idx]
            jac = sparse.bmat(
                [[hi, -ci[:, None]], [ci[None, :], None]], format="csc"
            )
            rhs = -np.concatenate([(gr - theta * cgrad)[idx], [cval]])
        else:
            jac = h[idx][:, idx].tocsc()
            rhs = -gr[idx]
        try:
            delta = spsolve(jac, rhs)
        except Exception:
            break
        if not np.isfinite(delta).all():
            break
        tau = 1.0
        improved = False
        while tau > 1e-6:
            cand = u.values.copy()
            cand[idx] += tau * delta[: len(idx)]
            th_new = theta + tau * delta[-1] if cons_fn is not None else 0.0
            cu = grid.function(cand)
            gr_new = grad_fn(cu)
            if cons_fn is not None:
                cval_new, cgrad_new, _ = cons_fn(cu)
                rv_new = gr_new - th_new * cgrad_new
            else:
                cval_new, cgrad_new, rv_new = 0.0, None, gr_new
            m_new = merit(rv_new, cval_new)
            if np.isfinite(m_new) and m_new < (1.0 - 1e-4 * tau) * best_merit:
                u, gr, theta, cval = cu, gr_new, th_new, cval_new
                rvec = rv_new
                best_merit = m_new
                scaled = float(np.abs(rvec[idx]).max()) / scale_fn(u)
                best = (u.values.copy(), theta, scaled)
                improved = True
                steps += 1
                break
            tau *= 0.5
        if not improved:
            break
    return best[0], best[1], best[2], steps


# ---------------------------------------------------------------------------
# single-phase solves


def _single_phase_packs(grid: Grid, coeff: np.ndarray, r: float,
                        reg: Regularization):
    def psi_value_grad(u: GridFunction):
        mag = u.grad_magnitude
        value = grid.integrate(coeff * mag ** r)
        eps = reg.resolve(mag, r)
        flux_w = grid.quad_weights * coeff * _flux_weight(mag, r, eps)
        grad = r * _scatter_grad_flux(u, flux_w)
        grad[grid.boundary] = 0.0
        return value, grad

    def cons_value(u: GridFunction) -> float:
        return grid.integrate(grid.m_cells * np.abs(u.cells) ** r)

    def cons_grad(u: GridFunction) -> np.ndarray:
        v = r * _mass_gradient(u, r)
        v[grid.boundary] = 0.0
        return v

    def cons_pack(u: GridFunction):
        return cons_value(u) - 1.0, cons_grad(u), r * (r - 1.0) * _mass_hessian(grid, u, r)

    def psi_hess(u: GridFunction):
        eps = reg.resolve(u.grad_magnitude, r)
        return r * _flux_hessian(grid, u, coeff, r, eps)

    def project(vals: np.ndarray):
        vals = np.array(vals, dtype=float)
        vals[grid.boundary] = 0.0
        uc = grid.cell_average(vals)
        c = grid.integrate(grid.m_cells * np.abs(uc) ** r)
        scale = grid.integrate(np.abs(grid.m_cells) * np.abs(uc) ** r)
        if c <= 1e-12 * scale or scale == 0.0:
            return None
        return vals * c ** (-1.0 / r)

    def scale_fn(u: GridFunction) -> float:
        return max(1.0, _v_norm(u, coeff, r))

    return psi_value_grad, psi_hess, cons_value, cons_grad, cons_pack, project, scale_fn


def _penalized_value_grad(grid: Grid, base_value_grad, priors: list, strength: float):
    """Add strength * sum of squared normalized overlaps with prior modes."""
    w = grid.quad_weights

    def value_grad(u: GridFunction):
        value, grad = base_value_grad(u)
        uc = u.cells
        nu = float(np.dot(w * uc, uc))
        if nu == 0.0:
            return value, grad
        gu = grid.scatter_cells(w * uc)
        for prior in priors:  # prior cells are unit vectors in the w metric
            s = float(np.dot(w * uc, prior))
            value += strength * s * s / nu
            pen_grad = (2.0 * s / nu) * grid.scatter_cells(w * prior) \
                - (2.0 * s * s / (nu * nu)) * gu
            grad += strength * pen_grad
        grad[grid.boundary] = 0.0
        return value, grad

    return value_grad


def _single_phase_modes(grid: Grid, coeff: np.ndarray, r: float, k: int,
                        cfg: SolverConfig, regime_label: str) -> list[EigenPair]:
    reg = DEFAULT_REG
    (psi_vg, psi_hess, cons_value, cons_grad, cons_pack, project,
     scale_fn) = _single_phase_packs(grid, coeff, r, reg)
    w = grid.quad_weights

    def eigen_residual(u: GridFunction):
        _, gr = psi_vg(u)
        cg = cons_grad(u)
        idx = grid.interior
        cc = float(np.dot(cg[idx], cg[idx]))
        th = float(np.dot(gr[idx], cg[idx]) / cc) if cc > 0 else 0.0
        return float(np.abs((gr - th * cg)[idx]).max()) / scale_fn(u)

    pairs: list[EigenPair] = []
    priors: list[np.ndarray] = []
    for mode in range(1, k + 1):
        strength = cfg.deflation_strength * max(
            [1.0] + [abs(p.eigenvalue) for p in pairs]
        )
        objective = psi_vg if not priors else _penalized_value_grad(
            grid, psi_vg, priors, strength
        )
        candidates = []
        best_any = None
        for attempt in range(cfg.restarts):
            rng = np.random.default_rng([cfg.seed, 11, mode, attempt])
            start = _random_start(grid, rng, signed=mode > 1)
            out = _descend(grid, objective, cons_grad, scale_fn, project, start, cfg)
            if out is None:
                continue
            vals, _, scaled, steps = _polish(
                grid, out.values, lambda u: psi_vg(u)[1], psi_hess, scale_fn,
                cons_fn=cons_pack,
            )
            u = grid.function(vals)
            drifted = any(_colinearity(grid, u.cells, p) > 0.999 for p in priors)
            if drifted or scaled > out.residual:
                u = grid.function(out.values)
                scaled = eigen_residual(u)
            value, _ = psi_vg(u)
            cval = cons_value(u)
            mu = value / cval
            record = (mu, u, scaled, out.iterations + steps)
            if best_any is None or scaled < best_any[2]:
                best_any = record
            if scaled <= cfg.tol_residual:
                candidates.append(record)
        if not candidates:
            partial = None
            if best_any is not None:
                partial = EigenPair(
                    best_any[0], best_any[1], best_any[2], best_any[3],
                    regime_label, cons_value(best_any[1]), heuristic=mode > 1,
                )
            raise NoConvergence(
                f"single-phase mode {mode} did not reach residual "
                f"{cfg.tol_residual:g} in {cfg.restarts} restarts",
                best=partial,
            )
        candidates.sort(key=lambda rec: rec[0])
        mu, u, scaled, iters = candidates[0]
        colin = 1.0
        for i in range(len(candidates)):
            for j in range(i + 1, len(candidates)):
                colin = min(
                    colin,
                    _colinearity(grid, candidates[i][1].cells, candidates[j][1].cells),
                )
        if mode == 1 and u.values[grid.interior].sum() < 0:
            u = u.scaled(-1.0)
        norm = math.sqrt(float(np.dot(w * u.cells, u.cells)))
        priors.append(u.cells / norm)
        vals_interior = u.values[grid.interior]
        pairs.append(EigenPair(
            eigenvalue=mu,
            u=u,
            residual=scaled,
            iterations=iters,
            regime=regime_label,
            constraint_value=cons_value(u),
            heuristic=mode > 1,
            meta={
                "level": mu,
                "restarts_converged": len(candidates),
                "restart_colinearity": colin,
                "sign_change": bool(
                    vals_interior.min() < 0 < vals_interior.max()
                ),
            },
        ))
    pairs.sort(key=lambda p: p.eigenvalue)
    return pairs


def solve_single_phase(grid: Grid, r: float, k: int, cfg: SolverConfig) -> list[EigenPair]:
    """First k modes of the weighted single-phase problem on {integral m|u|^r = 1}.

    The principal mode is a genuine constrained minimum; higher modes
    come from penalized deflation against the already-found ones and are
    flagged heuristic.  Raises NoConvergence (best iterate attached)
    when a mode cannot reach the residual target.
    """
    r = float(r)
    if not (np.isfinite(r) and r > 1.0):
        raise DomainError(f"exponent r must exceed 1, got {r}")
    if int(k) != k or k < 1:
        raise DomainError(f"mode count k must be a positive integer, got {k}")
    return _single_phase_modes(grid, grid.a_cells, r, int(k), cfg, "SinglePhase")


def reference_principal(grid: Grid, q: float, cfg: SolverConfig) -> EigenPair:
    """Principal eigenpair of the plain q-Laplacian quotient on this grid.

    Same machinery as :func:`solve_single_phase` but with unit gradient
    weight, giving the threshold eigenvalue below which the two-phase
    problem only has the trivial solution.
    """
    q = float(q)
    if not (np.isfinite(q) and q > 1.0):
        raise DomainError(f"exponent q must exceed 1, got {q}")
    pair = _single_phase_modes(grid, np.ones(grid.n_cells), q, 1, cfg, "SinglePhase")[0]
    pair.meta["reference"] = True
    return pair


# ---------------------------------------------------------------------------
# Nehari minimization (p < q)


def solve_nehari(grid: Grid, lam: float, exp: Exponents, cfg: SolverConfig,
                 reference: GridFunction | None = None, callback=None):
    """Minimize the energy over the Nehari set at spectral parameter lam.

    Returns an EigenPair on success and :class:`Degenerate` when no
    start admits a Nehari projection, which is the exact discrete
    outcome for lam at or below the q-Laplacian reference eigenvalue.
    ``reference`` optionally supplies the reference eigenfunction used
    as the first start (a scan should compute it once and share it).
    ``callback(iteration, u)`` observes every accepted descent iterate.
    """
    exp.require_regime(Regime.P_LESS_Q, "Nehari minimization")
    lam = float(lam)
    if not np.isfinite(lam):
        raise NumericError(f"lambda must be finite, got {lam}")
    if lam < 0:
        raise DomainError(f"lambda must be nonnegative, got {lam}")
    if lam == 0.0:
        return Degenerate(lam=0.0, attempts=0)
    reg = DEFAULT_REG

    def value_grad(u: GridFunction):
        fv = fn.energy(u, lam, exp, reg)
        return fv.value, fv.gradient

    def cons_grad(u: GridFunction):
        return fn.nehari_constraint(u, lam, exp, reg).gradient

    def scale_fn(u: GridFunction) -> float:
        return max(1.0, e_norm(u, exp))

    def project(vals: np.ndarray):
        av = np.abs(np.asarray(vals, dtype=float))
        av[grid.boundary] = 0.0
        u = grid.function(av)
        t = fn.nehari_scale(u, lam, exp)
        if t is None:
            return None
        return t * av

    def grad_fn(u: GridFunction):
        return fn.energy(u, lam, exp, reg).gradient

    def hess_fn(u: GridFunction):
        eps = reg.resolve(u.grad_magnitude, exp.pmin)
        h = _flux_hessian(grid, u, grid.a_cells, exp.p, eps)
        h = h + _flux_hessian(grid, u, np.ones(grid.n_cells), exp.q, eps)
        return h - lam * (exp.q - 1.0) * _mass_hessian(grid, u, exp.q)

    starts = []
    if reference is not None:
        starts.append(np.array(reference.values))
    else:
        ref_pair = reference_principal(grid, exp.q, cfg)
        starts.append(np.array(ref_pair.u.values))
    for attempt in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, 23, attempt])
        starts.append(_random_start(grid, rng))

    attempts = 0
    results = []
    best_any = None
    for start in starts:
        attempts += 1
        out = _descend(grid, value_grad, cons_grad, scale_fn, project, start,
                       cfg, callback=callback)
        if out is None:
            continue
        u_desc = grid.function(out.values)
        scale_desc = e_norm(u_desc, exp)
        vals, _, scaled, steps = _polish(grid, out.values, grad_fn, hess_fn, scale_fn)
        u = grid.function(vals)
        # reject a polish that walked toward the trivial solution or grew worse
        if scaled > out.residual or e_norm(u, exp) < 0.5 * scale_desc:
            u, scaled, steps = u_desc, out.residual, 0
        level = fn.energy(u, lam, exp, reg).value
        record = (level, u, scaled, out.iterations + steps)
        if best_any is None or scaled < best_any[2]:
            best_any = record
        if scaled <= cfg.tol_residual:
            results.append(record)
    if not results:
        if best_any is None:
            return Degenerate(lam=lam, attempts=attempts)
        pair = EigenPair(
            lam, best_any[1], best_any[2], best_any[3], "NehariPLessQ",
            fn.nehari_constraint(best_any[1], lam, exp).value,
            meta={"level": best_any[0], "attempts": attempts},
        )
        raise NoConvergence(
            f"Nehari solve at lambda={lam:g} stalled at residual {best_any[2]:.3g}",
            best=pair,
        )
    results.sort(key=lambda rec: rec[0])
    level, u, scaled, iters = results[0]
    if u.values[grid.interior].sum() < 0:
        u = u.scaled(-1.0)
    return EigenPair(
        eigenvalue=lam,
        u=u,
        residual=scaled,
        iterations=iters,
        regime="NehariPLessQ",
        constraint_value=fn.nehari_constraint(u, lam, exp).value,
        heuristic=False,
        meta={"level": level, "attempts": attempts, "starts_admissible": len(results)},
    )


# ---------------------------------------------------------------------------
# min-max sequence (q < p)


def _sphere_directions(k: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if k == 1:
        return np.array([[1.0]])
    if k == 2:
        theta = np.linspace(0.0, math.pi, count, endpoint=False)
        return np.column_stack([np.cos(theta), np.sin(theta)])
    if k == 3:
        i = np.arange(count)
        z = 1.0 - (i + 0.5) / count  # hemisphere; the functional is even
        rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        phi = i * math.pi * (3.0 - math.sqrt(5.0))
        return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
    d = rng.standard_normal((count, k))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _subspace_basis(grid: Grid, rng: np.random.Generator, k: int):
    """k w-orthonormal smooth fields supported where m is solidly positive."""
    m = grid.weights.m1 - grid.weights.m2
    top = m.max()
    if top <= 0:
        return None
    good = np.flatnonzero((m >= 0.25 * top) & grid.interior)
    if len(good) < k:
        return None
    radius = grid.geometry.radius
    w = grid.quad_weights
    basis = []
    for _ in range(k):
        for _ in range(20):  # resample until independent
            i = int(rng.choice(good))
            center = grid.nodes[i]
            width = radius * rng.uniform(0.08, 0.25)
            vals = _bump_values(_distances(grid, center), width)
            j = int(rng.choice(good))
            vals += rng.uniform(-0.6, 0.6) * _bump_values(
                _distances(grid, grid.nodes[j]), width * rng.uniform(0.6, 1.2)
            )
            vals[grid.boundary] = 0.0
            cells = grid.cell_average(vals)
            for b_vals, b_cells in basis:
                proj = float(np.dot(w * cells, b_cells))
                vals = vals - proj * b_vals
                cells = cells - proj * b_cells
            norm = math.sqrt(float(np.dot(w * cells, cells)))
            if norm > 1e-8:
                basis.append((vals / norm, cells / norm))
                break
        else:
            return None
    b_mat = np.column_stack([b[0] for b in basis])
    return b_mat


def _subspace_sup(grid: Grid, exp: Exponents, b_mat: np.ndarray,
                  rng: np.random.Generator, reg: Regularization):
    """Largest constrained energy over one symmetric subspace, or None.

    None signals an inadmissible subspace: some direction in it has a
    nonpositive weighted mass, so the constraint sphere is unbounded
    there and the supremum carries no information.
    """
    q, p = exp.q, exp.p
    k = b_mat.shape[1]
    w = grid.quad_weights
    uc_cols = np.column_stack([grid.cell_average(b_mat[:, j]) for j in range(k)])
    if grid.grad_dim == 1:
        g_cols = np.column_stack([grid.gradient(b_mat[:, j]) for j in range(k)])
    else:
        g_cols = np.stack([grid.gradient(b_mat[:, j]) for j in range(k)], axis=2)

    count = {1: 1, 2: 256, 3: 1024}.get(k, 2048)
    dirs = _sphere_directions(k, count, rng)
    uc_all = uc_cols @ dirs.T  # (n_cells, count)
    mass_all = (w * grid.m_cells) @ np.abs(uc_all) ** q
    abs_mass = (w * np.abs(grid.m_cells)) @ np.abs(uc_all) ** q
    if np.any(mass_all <= 1e-6 * abs_mass):
        return None
    if grid.grad_dim == 1:
        mag_all = np.abs(g_cols @ dirs.T)
    else:
        gx = g_cols[:, 0, :] @ dirs.T
        gy = g_cols[:, 1, :] @ dirs.T
        mag_all = np.hypot(gx, gy)
    a_all = (w * grid.a_cells) @ mag_all ** p
    b_all = w @ mag_all ** q
    s_all = (q / mass_all) ** (1.0 / q)
    phi_all = s_all ** p * a_all / p + s_all ** q * b_all / q
    order = int(np.argmax(phi_all))
    d = dirs[order]

    def f_and_grad(d_vec: np.ndarray):
        u_vals = b_mat @ d_vec
        uc = uc_cols @ d_vec
        mass = float(np.dot(w * grid.m_cells, np.abs(uc) ** q))
        if mass <= 0:
            return None, None
        s = (q / mass) ** (1.0 / q)
        u = grid.function(s * u_vals)
        fv = fn.phase_energy(u, exp, reg)
        dgdd = q * (uc_cols.T @ (w * grid.m_cells * _odd_power(uc, q - 1.0)))
        dsdd = -(s / (q * mass)) * dgdd
        inner = float(np.dot(fv.gradient, u_vals))
        grad = s * (b_mat.T @ fv.gradient) + inner * dsdd
        return fv.value, grad

    f, gr = f_and_grad(d)
    if f is None:
        return None
    step = 0.5
    for _ in range(80):
        tangent = gr - float(np.dot(gr, d)) * d
        t_norm = np.linalg.norm(tangent)
        if t_norm < 1e-12 * max(1.0, abs(f)):
            break
        cand = d + step * tangent
        cand /= np.linalg.norm(cand)
        fc, gc = f_and_grad(cand)
        if fc is not None and fc > f:
            d, f, gr = cand, fc, gc
            step *= 1.3
        else:
            step *= 0.5
            if step < 1e-10:
                break
    uc = uc_cols @ d
    mass = float(np.dot(w * grid.m_cells, np.abs(uc) ** q))
    s = (q / mass) ** (1.0 / q)
    return f, s * (b_mat @ d)


def solve_min_max(grid: Grid, k_modes: int, exp: Exponents, cfg: SolverConfig) -> list[EigenPair]:
    """First k critical levels of the two-phase energy on its sphere (q < p).

    Mode 1 is a direct constrained minimum.  Higher modes are sampled
    min-max estimates over random symmetric subspaces (an approximation
    from above, flagged heuristic) refined by a bordered Newton step.
    Each reported eigenvalue is the Lagrange multiplier
    (aGradP + gradQ)/q of its critical point, which always exceeds the
    critical level itself in this regime.
    """
    exp.require_regime(Regime.Q_LESS_P, "min-max sequence")
    if int(k_modes) != k_modes or k_modes < 1:
        raise DomainError(f"mode count must be a positive integer, got {k_modes}")
    k_modes = int(k_modes)
    reg = DEFAULT_REG
    q = exp.q

    def value_grad(u: GridFunction):
        fv = fn.phase_energy(u, exp, reg)
        return fv.value, fv.gradient

    def grad_fn(u: GridFunction):
        return fn.phase_energy(u, exp, reg).gradient

    def hess_fn(u: GridFunction):
        eps = reg.resolve(u.grad_magnitude, exp.pmin)
        h = _flux_hessian(grid, u, grid.a_cells, exp.p, eps)
        return h + _flux_hessian(grid, u, np.ones(grid.n_cells), exp.q, eps)

    def cons_grad(u: GridFunction):
        v = _mass_gradient(u, q)
        v[grid.boundary] = 0.0
        return v

    def cons_fn(u: GridFunction):
        cval = grid.integrate(grid.m_cells * np.abs(u.cells) ** q) / q - 1.0
        return cval, cons_grad(u), (q - 1.0) * _mass_hessian(grid, u, q) / 1.0

    def scale_fn(u: GridFunction) -> float:
        return max(1.0, e_norm(u, exp))

    def project(vals: np.ndarray):
        vals = np.array(vals, dtype=float)
        vals[grid.boundary] = 0.0
        uc = grid.cell_average(vals)
        c = grid.integrate(grid.m_cells * np.abs(uc) ** q)
        scale = grid.integrate(np.abs(grid.m_cells) * np.abs(uc) ** q)
        if scale == 0.0 or c <= 1e-12 * scale:
            return None
        return vals * (q / c) ** (1.0 / q)

    def multiplier(u: GridFunction) -> float:
        comp = fn.phase_energy(u, exp, reg).components
        return (comp["aGradP"] + comp["gradQ"]) / q

    def refine(vals: np.ndarray):
        out_vals, _, scaled, steps = _polish(
            grid, vals, grad_fn, hess_fn, scale_fn, cons_fn=cons_fn
        )
        u = grid.function(out_vals)
        return u, scaled, steps

    pairs: list[EigenPair] = []

    # mode 1: direct minimization with multi-start
    candidates = []
    best_any = None
    for attempt in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, 31, attempt])
        out = _descend(grid, value_grad, cons_grad, scale_fn, project,
                       _random_start(grid, rng), cfg)
        if out is None:
            continue
        u, scaled, steps = refine(out.values)
        if scaled > out.residual:
            u, scaled, steps = grid.function(out.values), out.residual, 0
        fv = fn.phase_energy(u, exp, reg)
        record = (fv.value, u, scaled, out.iterations + steps)
        if best_any is None or scaled < best_any[2]:
            best_any = record
        if scaled <= cfg.tol_residual:
            candidates.append(record)
    if not candidates:
        partial = None
        if best_any is not None:
            partial = EigenPair(
                multiplier(best_any[1]), best_any[1], best_any[2], best_any[3],
                "MinMaxQLessP", fn.phase_energy(best_any[1], exp, reg).constraint,
            )
        raise NoConvergence(
            f"min-max principal mode stalled above residual {cfg.tol_residual:g}",
            best=partial,
        )
    candidates.sort(key=lambda rec: rec[0])
    level, u1, scaled, iters = candidates[0]
    colin = 1.0
    for i in range(len(candidates)):
        for j in range(i + 1, len(candidates)):
            colin = min(colin, _colinearity(grid, candidates[i][1].cells,
                                            candidates[j][1].cells))
    if u1.values[grid.interior].sum() < 0:
        u1 = u1.scaled(-1.0)
    pairs.append(EigenPair(
        eigenvalue=multiplier(u1),
        u=u1,
        residual=scaled,
        iterations=iters,
        regime="MinMaxQLessP",
        constraint_value=fn.phase_energy(u1, exp, reg).constraint,
        heuristic=False,
        meta={
            "level": level,
            "minmax_estimate": level,
            "restarts_converged": len(candidates),
            "restart_colinearity": colin,
        },
    ))

    for mode in range(2, k_modes + 1):
        sampled = []
        for s in range(cfg.restarts):
            rng = np.random.default_rng([cfg.seed, 37, mode, s])
            b_mat = _subspace_basis(grid, rng, mode)
            if b_mat is None:
                continue
            sup = _subspace_sup(grid, exp, b_mat, rng, reg)
            if sup is None:
                continue
            sampled.append(sup)
        if not sampled:
            raise NoConvergence(
                f"no admissible symmetric subspace found for mode {mode}"
            )
        sampled.sort(key=lambda rec: rec[0])
        chosen = None
        for estimate, vals in sampled:
            u, scaled, steps = refine(vals)
            too_close = any(
                _colinearity(grid, u.cells, prev.u.cells) > 0.999 for prev in pairs
            )
            if scaled <= cfg.tol_residual and not too_close:
                chosen = (estimate, u, scaled, steps)
                break
            if chosen is None:
                chosen = (estimate, u, scaled, steps)
        estimate, u, scaled, steps = chosen
        vals_int = u.values[grid.interior]
        pairs.append(EigenPair(
            eigenvalue=multiplier(u),
            u=u,
            residual=scaled,
            iterations=steps,
            regime="MinMaxQLessP",
            constraint_value=fn.phase_energy(u, exp, reg).constraint,
            heuristic=True,
            meta={
                "level": fn.phase_energy(u, exp, reg).value,
                "minmax_estimate": estimate,
                "subspace_samples": len(sampled),
                "sign_change": bool(vals_int.min() < 0 < vals_int.max()),
            },
        ))
    head, tail = pairs[0], sorted(pairs[1:], key=lambda p: p.eigenvalue)
    return [head] + tail


# ---------------------------------------------------------------------------
# residual


def pde_residual(u: GridFunction, lam: float, exp: Exponents,
                 reg: Regularization = DEFAULT_REG) -> float:
    """Scaled weak-form residual of the two-phase equation at (u, lam).

    Max norm of the discrete Euler-Lagrange gradient over interior
    nodes, divided by max(1, energy norm of u).  Zero fields give zero.
    """
    fv = fn.energy(u, lam, exp, reg)
    scale = max(1.0, e_norm(u, exp))
    return float(np.abs(fv.gradient[u.grid.interior]).max()) / scale
