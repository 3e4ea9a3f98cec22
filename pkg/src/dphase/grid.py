"""Truncated-domain grids with exact-measure midpoint quadrature.

Conventions used throughout the package:

* Function values live on nodes.  Gradients and every integrand live on
  cells.  :meth:`Grid.cell_average` interpolates nodal data at the cell
  centroid, which keeps quadrature exact for affine integrands in every
  geometry mode.
* Quadrature weights are exact cell measures (interval lengths, tensor
  cell areas, spherical shell volumes), so the discrete measure of the
  truncated domain matches the continuum one to round-off.
* Homogeneous Dirichlet data is imposed on the truncation boundary:
  :class:`GridFunction` values are zeroed there on construction.

Three geometry modes are supported: ``Interval1D`` for (-R, R),
``RadialN`` for radially symmetric problems on the ball of radius R in
dimension N >= 2 (reduced to one radial coordinate with the r^(N-1)
Jacobian), and ``Tensor2D`` for the square (-R, R)^2.
"""

from __future__ import annotations

import logging
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import (
    DimensionError,
    InvalidGeometry,
    InvalidWeight,
    NumericError,
)

logger = logging.getLogger(__name__)

INTERVAL = "Interval1D"
RADIAL = "RadialN"
TENSOR = "Tensor2D"
MODES = (INTERVAL, RADIAL, TENSOR)


def _locked(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# weight descriptors


@dataclass(frozen=True)
class Weight:
    """Symbolic coefficient profile, sampled on grid nodes at build time.

    kind         formula (d = distance from ``center``)
    ----         ------------------------------------------------------
    constant     amplitude
    gaussian     amplitude * exp(-(d/scale)^2)
    bump         amplitude * exp(1 - 1/(1 - (d/scale)^2)) if d < scale else 0
    power        amplitude * (1 + |x|)^(-scale), measured from the origin

    Profiles are smooth except ``bump``, which is smooth with compact
    support.  Use the factory helpers below instead of the raw
    constructor.
    """

    kind: str
    amplitude: float
    center: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "gaussian", "bump", "power"):
            raise InvalidWeight(f"unknown weight kind {self.kind!r}")
        if not np.isfinite([self.amplitude, self.center, self.scale]).all():
            raise InvalidWeight(f"non-finite parameter in {self}")
        if self.kind in ("gaussian", "bump") and not self.scale > 0:
            raise InvalidWeight(
                f"{self.kind} weight needs a positive scale, got {self.scale}"
            )
        if self.kind == "power" and self.scale < 0:
            raise InvalidWeight(
                f"power weight needs a nonnegative decay exponent, got {self.scale}"
            )

    @property
    def radial_compatible(self) -> bool:
        """True when the profile depends on ``|x|`` only."""
        return self.kind in ("constant", "power") or self.center == 0.0

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Evaluate the profile at an array of node coordinates.

        ``points`` has shape (k,) in one coordinate (interval position or
        radius) or (k, 2) for tensor grids.
        """
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            dist = np.abs(pts - self.center)
            origin = np.abs(pts)
        else:
            dist = np.hypot(pts[:, 0] - self.center, pts[:, 1] - self.center)
            origin = np.hypot(pts[:, 0], pts[:, 1])
        if self.kind == "constant":
            return np.full(len(dist), float(self.amplitude))
        if self.kind == "gaussian":
            return self.amplitude * np.exp(-((dist / self.scale) ** 2))
        if self.kind == "bump":
            t2 = (dist / self.scale) ** 2
            out = np.zeros(len(dist))
            inside = t2 < 1.0
            out[inside] = self.amplitude * np.exp(1.0 - 1.0 / (1.0 - t2[inside]))
            return out
        return self.amplitude * (1.0 + origin) ** (-self.scale)


def constant(value: float) -> Weight:
    return Weight("constant", float(value))


def gaussian(amplitude: float = 1.0, center: float = 0.0, width: float = 1.0) -> Weight:
    return Weight("gaussian", float(amplitude), float(center), float(width))


def bump(amplitude: float = 1.0, center: float = 0.0, radius: float = 1.0) -> Weight:
    return Weight("bump", float(amplitude), float(center), float(radius))


def power_decay(amplitude: float = 1.0, exponent: float = 1.0) -> Weight:
    return Weight("power", float(amplitude), 0.0, float(exponent))


@dataclass(frozen=True)
class WeightSpec:
    """Coefficient bundle for one problem instance.

    ``a`` is the modulating weight of the p-part (nonnegative, not
    identically zero), ``m1`` and ``m2`` the nonnegative parts of the
    indefinite weight m = m1 - m2 (m1 not identically zero), and
    ``decay`` the exponent of the positive envelope weight
    (1 + |x|)^(-decay) that keeps the zero-order norm term coercive.
    ``decay`` should match the q exponent of the run.
    """

    a: Weight
    m1: Weight
    m2: Weight
    decay: float

    def __post_init__(self):
        if not (np.isfinite(self.decay) and self.decay > 0):
            raise InvalidWeight(f"decay exponent must be positive, got {self.decay}")


@dataclass(frozen=True)
class WeightSet:
    """Nodal samples of all coefficient fields on one grid."""

    a: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    omega: np.ndarray
    envelope: np.ndarray  # max(m2, omega), strictly positive


# ---------------------------------------------------------------------------
# geometry and grid


@dataclass(frozen=True)
class Geometry:
    """Truncation geometry descriptor.

    ``dimension`` is the ambient dimension N.  It drives the Jacobian in
    RadialN mode; for Interval1D and Tensor2D it is a declaration used
    only by exponent validation (p, q < N).
    """

    mode: str
    radius: float
    resolution: int
    dimension: int = 3

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidGeometry(f"unknown geometry mode {self.mode!r}")
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise InvalidGeometry(f"truncation radius must be positive, got {self.radius}")
        if int(self.resolution) != self.resolution or self.resolution < 8:
            raise InvalidGeometry(
                f"resolution must be an integer >= 8 cells, got {self.resolution}"
            )
        if int(self.dimension) != self.dimension or self.dimension < 2:
            raise InvalidGeometry(
                f"ambient dimension must be an integer >= 2, got {self.dimension}"
            )


class Grid:
    """Discrete truncated domain: nodes, quadrature, stencils, weights.

    Instances are immutable after construction (arrays are locked) and
    safe to share across threads.  Build with :func:`build_grid`.
    """

    def __init__(self, geometry, nodes, centroids, quad_weights, boundary,
                 avg, grads, weights, weight_spec):
        self.geometry = geometry
        self.nodes = _locked(nodes)
        self.centroids = _locked(centroids)
        self.quad_weights = _locked(quad_weights)
        self.boundary = _locked(boundary)
        self.interior = _locked(~boundary)
        self._avg = avg
        self._grads = grads
        self.weights = weights
        self.weight_spec = weight_spec
        self.a_cells = _locked(avg @ weights.a)
        self.m1_cells = _locked(avg @ weights.m1)
        self.m2_cells = _locked(avg @ weights.m2)
        self.m_cells = _locked(self.m1_cells - self.m2_cells)
        self.envelope_cells = _locked(avg @ weights.envelope)
        self._stiffness_lu = None

    # -- shape helpers ------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.boundary)

    @property
    def n_cells(self) -> int:
        return len(self.quad_weights)

    @property
    def grad_dim(self) -> int:
        return len(self._grads)

    @property
    def measure(self) -> float:
        return float(self.quad_weights.sum())

    # -- node/cell transfer -------------------------------------------------

    def cell_average(self, nodal: np.ndarray) -> np.ndarray:
        """Interpolate a nodal field at cell centroids."""
        nodal = np.asarray(nodal, dtype=float)
        if nodal.shape != (self.n_nodes,):
            raise DimensionError(
                f"expected nodal field of length {self.n_nodes}, got shape {nodal.shape}"
            )
        return self._avg @ nodal

    def gradient(self, nodal: np.ndarray) -> np.ndarray:
        """Per-cell gradient: shape (n_cells,) in one coordinate, (n_cells, 2) on tensor grids."""
        nodal = np.asarray(nodal, dtype=float)
        if nodal.shape != (self.n_nodes,):
            raise DimensionError(
                f"expected nodal field of length {self.n_nodes}, got shape {nodal.shape}"
            )
        if len(self._grads) == 1:
            return self._grads[0] @ nodal
        return np.stack([g @ nodal for g in self._grads], axis=1)

    def scatter_cells(self, cell_data: np.ndarray) -> np.ndarray:
        """Adjoint of cell_average: distribute per-cell data back to nodes."""
        cell_data = np.asarray(cell_data, dtype=float)
        if cell_data.shape != (self.n_cells,):
            raise DimensionError(
                f"expected cell field of length {self.n_cells}, got shape {cell_data.shape}"
            )
        return self._avg.T @ cell_data

    def scatter_flux(self, flux: np.ndarray) -> np.ndarray:
        """Adjoint of gradient: assemble nodal residual from per-cell fluxes.

        ``flux`` has shape (n_cells,) or (n_cells, grad_dim) and is
        multiplied against the gradient stencil transposed.
        """
        flux = np.asarray(flux, dtype=float)
        if len(self._grads) == 1:
            if flux.shape != (self.n_cells,):
                raise DimensionError(f"expected flux of length {self.n_cells}")
            return self._grads[0].T @ flux
        if flux.shape != (self.n_cells, len(self._grads)):
            raise DimensionError(
                f"expected flux of shape ({self.n_cells}, {len(self._grads)})"
            )
        out = self._grads[0].T @ flux[:, 0]
        for k in range(1, len(self._grads)):
            out += self._grads[k].T @ flux[:, k]
        return out

    # -- quadrature ---------------------------------------------------------

    def integrate(self, cells: np.ndarray) -> float:
        """Weighted sum of a per-cell integrand over the truncated domain."""
        cells = np.asarray(cells, dtype=float)
        if cells.shape != (self.n_cells,):
            raise DimensionError(
                f"expected cell field of length {self.n_cells}, got shape {cells.shape}"
            )
        return float(np.dot(self.quad_weights, cells))

    def tail_fraction(self, cells: np.ndarray) -> float:
        """Fraction of a nonnegative integrand carried by the outer 10% of the domain."""
        cells = np.asarray(cells, dtype=float)
        total = self.integrate(cells)
        if total <= 0:
            return 0.0
        if self.centroids.ndim == 1:
            dist = np.abs(self.centroids)
        else:
            dist = np.max(np.abs(self.centroids), axis=1)
        tail = dist > 0.9 * self.geometry.radius
        return float(np.dot(self.quad_weights[tail], cells[tail]) / total)

    # -- fields -------------------------------------------------------------

    def function(self, values: np.ndarray) -> "GridFunction":
        """Wrap nodal values as a Dirichlet field with a consistent gradient.

        Boundary nodes are set to zero (the discrete counterpart of
        compact support in the truncated domain); the per-cell gradient
        and centroid values are derived from the stored stencils.
        """
        values = np.array(values, dtype=float)
        if values.shape != (self.n_nodes,):
            raise DimensionError(
                f"expected nodal field of length {self.n_nodes}, got shape {values.shape}"
            )
        if not np.isfinite(values).all():
            raise NumericError("nodal values must be finite")
        values[self.boundary] = 0.0
        return GridFunction(
            grid=self,
            values=_locked(values),
            grad=_locked(self.gradient(values)),
            cells=_locked(self.cell_average(values)),
        )

    def zero_function(self) -> "GridFunction":
        return self.function(np.zeros(self.n_nodes))

    # -- preconditioner -----------------------------------------------------

    def stiffness_solve(self, residual: np.ndarray) -> np.ndarray:
        """Apply the inverse of the Dirichlet Laplacian stiffness matrix.

        Used as a smoothing metric for descent directions.  Input and
        output are full-length nodal vectors; boundary entries of the
        output are zero.  The factorization is built once and cached.
        """
        if self._stiffness_lu is None:
            w = sparse.diags(self.quad_weights)
            k = self._grads[0].T @ w @ self._grads[0]
            for g in self._grads[1:]:
                k = k + g.T @ w @ g
            idx = np.flatnonzero(self.interior)
            self._stiffness_idx = idx
            self._stiffness_lu = splu(k.tocsc()[idx][:, idx])
        out = np.zeros(self.n_nodes)
        out[self._stiffness_idx] = self._stiffness_lu.solve(
            np.asarray(residual, dtype=float)[self._stiffness_idx]
        )
        return out


@dataclass(frozen=True)
class GridFunction:
    """Nodal field with cached per-cell gradient and centroid values.

    Immutable: arrays are locked at construction, and ``grad``/``cells``
    are always recomputable from ``values`` through the grid stencils.
    """

    grid: Grid
    values: np.ndarray
    grad: np.ndarray
    cells: np.ndarray

    @property
    def grad_magnitude(self) -> np.ndarray:
        if self.grad.ndim == 1:
            return np.abs(self.grad)
        return np.hypot(self.grad[:, 0], self.grad[:, 1])

    def __abs__(self) -> "GridFunction":
        return self.grid.function(np.abs(self.values))

    def scaled(self, factor: float) -> "GridFunction":
        return self.grid.function(self.values * float(factor))


# ---------------------------------------------------------------------------
# construction


def build_grid(geometry: Geometry, weights: WeightSpec) -> Grid:
    """Assemble a grid: nodes, exact-measure quadrature, stencils, weight samples.

    Raises InvalidGeometry for a bad descriptor and InvalidWeight when a
    sampled coefficient violates its sign or nontriviality constraints
    (a >= 0 with max a > 0, m1 >= 0 not identically zero, m2 >= 0, and
    radial profiles only in RadialN mode).
    """
    if geometry.mode == INTERVAL:
        parts = _interval_parts(geometry)
    elif geometry.mode == RADIAL:
        parts = _radial_parts(geometry)
    else:
        parts = _tensor_parts(geometry)
    nodes, centroids, quad, boundary, avg, grads = parts

    if geometry.mode == RADIAL:
        for name in ("a", "m1", "m2"):
            if not getattr(weights, name).radial_compatible:
                raise InvalidWeight(
                    f"weight {name} is not radially symmetric; RadialN mode needs center 0"
                )

    a = weights.a.sample(nodes)
    m1 = weights.m1.sample(nodes)
    m2 = weights.m2.sample(nodes)
    if (a < 0).any():
        raise InvalidWeight("weight a must be nonnegative")
    if a.max() <= 0:
        raise InvalidWeight("weight a vanishes identically")
    if (m1 < 0).any():
        raise InvalidWeight("weight m1 must be nonnegative")
    if m1.max() <= 0:
        raise InvalidWeight("weight m1 vanishes identically")
    if (m2 < 0).any():
        raise InvalidWeight("weight m2 must be nonnegative")
    omega = power_decay(1.0, weights.decay).sample(nodes)
    envelope = np.maximum(m2, omega)

    ws = WeightSet(
        a=_locked(a), m1=_locked(m1), m2=_locked(m2),
        omega=_locked(omega), envelope=_locked(envelope),
    )
    grid = Grid(geometry, nodes, centroids, quad, boundary, avg, grads, ws, weights)
    logger.debug(
        "built %s grid: %d nodes, %d cells, measure %.6g",
        geometry.mode, grid.n_nodes, grid.n_cells, grid.measure,
    )
    return grid


def _interval_parts(geo: Geometry):
    n = int(geo.resolution)
    x = np.linspace(-geo.radius, geo.radius, n + 1)
    h = np.diff(x)
    centroids = 0.5 * (x[:-1] + x[1:])
    quad = h.copy()
    boundary = np.zeros(n + 1, dtype=bool)
    boundary[[0, -1]] = True
    avg = _pair_matrix(n, np.full(n, 0.5))
    grad = _pair_diff_matrix(n, h)
    return x, centroids, quad, boundary, avg, (grad,)


def _radial_parts(geo: Geometry):
    n = int(geo.resolution)
    dim = int(geo.dimension)
    r = np.linspace(0.0, geo.radius, n + 1)
    h = np.diff(r)
    surf = 2.0 * math.pi ** (dim / 2.0) / math.gamma(dim / 2.0)
    # exact shell volumes keep sum(quad) equal to the ball measure
    quad = surf * (r[1:] ** dim - r[:-1] ** dim) / dim
    # volume centroid of each shell in the radial coordinate
    centroids = (dim / (dim + 1.0)) * (
        (r[1:] ** (dim + 1) - r[:-1] ** (dim + 1)) / (r[1:] ** dim - r[:-1] ** dim)
    )
    alpha = (centroids - r[:-1]) / h
    boundary = np.zeros(n + 1, dtype=bool)
    boundary[-1] = True
    avg = _pair_matrix(n, alpha)
    grad = _pair_diff_matrix(n, h)
    return r, centroids, quad, boundary, avg, (grad,)


def _tensor_parts(geo: Geometry):
    n = int(geo.resolution)
    x = np.linspace(-geo.radius, geo.radius, n + 1)
    h = np.diff(x)
    xx, yy = np.meshgrid(x, x, indexing="xy")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])  # node id = iy*(n+1)+ix
    cx, cy = np.meshgrid(0.5 * (x[:-1] + x[1:]), 0.5 * (x[:-1] + x[1:]), indexing="xy")
    centroids = np.column_stack([cx.ravel(), cy.ravel()])  # cell id = cy*n+cx
    hx = np.tile(h, n)
    hy = np.repeat(h, n)
    quad = hx * hy

    n_nodes = (n + 1) ** 2
    boundary = np.zeros(n_nodes, dtype=bool)
    ix = np.arange(n_nodes) % (n + 1)
    iy = np.arange(n_nodes) // (n + 1)
    boundary[(ix == 0) | (ix == n) | (iy == 0) | (iy == n)] = True

    cells = np.arange(n * n)
    ccx = cells % n
    ccy = cells // n
    ll = ccy * (n + 1) + ccx
    lr = ll + 1
    ul = ll + (n + 1)
    ur = ul + 1
    rows = np.repeat(cells, 4)
    cols = np.column_stack([ll, lr, ul, ur]).ravel()

    avg_vals = np.tile([0.25, 0.25, 0.25, 0.25], n * n)
    avg = sparse.csr_matrix((avg_vals, (rows, cols)), shape=(n * n, n_nodes))

    gx_vals = np.column_stack([-0.5 / hx, 0.5 / hx, -0.5 / hx, 0.5 / hx]).ravel()
    gy_vals = np.column_stack([-0.5 / hy, -0.5 / hy, 0.5 / hy, 0.5 / hy]).ravel()
    gx = sparse.csr_matrix((gx_vals, (rows, cols)), shape=(n * n, n_nodes))
    gy = sparse.csr_matrix((gy_vals, (rows, cols)), shape=(n * n, n_nodes))
    return nodes, centroids, quad, boundary, avg, (gx, gy)


def _pair_matrix(n: int, alpha: np.ndarray) -> sparse.csr_matrix:
    """Cells-by-nodes matrix with weights (1-alpha, alpha) on cell endpoints."""
    rows = np.repeat(np.arange(n), 2)
    cols = np.column_stack([np.arange(n), np.arange(1, n + 1)]).ravel()
    vals = np.column_stack([1.0 - alpha, alpha]).ravel()
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n + 1))


def _pair_diff_matrix(n: int, h: np.ndarray) -> sparse.csr_matrix:
    rows = np.repeat(np.arange(n), 2)
    cols = np.column_stack([np.arange(n), np.arange(1, n + 1)]).ravel()
    vals = np.column_stack([-1.0 / h, 1.0 / h]).ravel()
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n + 1))


def integrate(grid: Grid, cells: np.ndarray) -> float:
    """Module-level alias for :meth:`Grid.integrate`."""
    return grid.integrate(cells)


# ---------------------------------------------------------------------------
# field dumps


def dump_field(u: GridFunction, path: str) -> None:
    """Write nodal values as flat text: one ``x[,y] value`` line per node.

    The header line records geometry mode, resolution, and radius so a
    dump is self-describing.  The write is atomic (temp file + rename).
    """
    geo = u.grid.geometry
    lines = [f"# {geo.mode} n={geo.resolution} R={geo.radius:.17g}"]
    nodes = u.grid.nodes
    if nodes.ndim == 1:
        lines.extend(
            f"{x:.17g} {v:.17g}" for x, v in zip(nodes, u.values)
        )
    else:
        lines.extend(
            f"{x:.17g},{y:.17g} {v:.17g}"
            for (x, y), v in zip(nodes, u.values)
        )
    atomic_write(path, "\n".join(lines) + "\n")


def atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".dphase-")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
