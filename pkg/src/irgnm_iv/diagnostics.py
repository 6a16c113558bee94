"""Spectral and noise diagnostics for discretized forward operators.

Materializes the derivative of a forward model as a dense matrix, exposes
its singular spectrum with quadrature weights absorbed (so the matrix SVD
is the operator SVD), bounds the operator-noise level from two Jacobians,
and runs rate-law experiments on a synthetic diagonal model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grids import CodomainElem, GridFn, make_grid, norm
from .irgnm import (
    APrioriStop,
    CgSubproblem,
    ForwardModel,
    IrgnmConfig,
    Linearization,
    SourceCondition,
    irgnm_run,
    lambda_eval,
)
from .penalties import Penalty

MAX_JACOBIAN_COLUMNS = 512


@dataclass(frozen=True)
class JacobianMatrix:
    """Dense derivative matrix with the weights needed for operator SVD.

    ``mat`` maps raw coefficient vectors: ``mat @ h.values`` stacks the
    u-function values of ``deriv_apply(phi, h)`` over its scalar component.
    ``row_weights`` holds the codomain quadrature weights with the scalar
    slot last; ``col_weights`` holds the domain quadrature weights.
    """

    mat: np.ndarray
    row_weights: np.ndarray
    col_weights: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.mat, dtype=np.float64)
        rw = np.asarray(self.row_weights, dtype=np.float64)
        cw = np.asarray(self.col_weights, dtype=np.float64)
        if mat.ndim != 2:
            raise ValueError("jacobian matrix must be two-dimensional")
        if rw.shape != (mat.shape[0],) or cw.shape != (mat.shape[1],):
            raise ValueError("weight vectors do not match the matrix shape")
        if not (np.all(np.isfinite(mat)) and np.all(rw > 0.0) and np.all(cw > 0.0)):
            raise ValueError("jacobian entries must be finite, weights positive")
        for name, arr in (("mat", mat), ("row_weights", rw), ("col_weights", cw)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def weighted(self) -> np.ndarray:
        """Matrix whose Euclidean SVD equals the operator SVD."""
        return np.sqrt(self.row_weights)[:, None] * self.mat / np.sqrt(self.col_weights)[None, :]

    def gram(self) -> np.ndarray:
        b = self.weighted
        return b.T @ b


def assemble_jacobian(model: ForwardModel, phi: GridFn) -> JacobianMatrix:
    """Materialize ``model``'s derivative at ``phi`` column by column."""
    n = phi.grid.n
    if n > MAX_JACOBIAN_COLUMNS:
        raise ValueError(
            f"dense assembly capped at {MAX_JACOBIAN_COLUMNS} columns, got {n}"
        )
    lin = model.linearize(phi)
    probe = lin.apply(GridFn(phi.grid, np.zeros(n)))
    m = probe.ufun.grid.n
    mat = np.empty((m + 1, n))
    basis = np.zeros(n)
    for j in range(n):
        basis[j] = 1.0
        out = lin.apply(GridFn(phi.grid, basis.copy()))
        mat[:m, j] = out.ufun.values
        mat[m, j] = out.scalar
        basis[j] = 0.0
    row_weights = np.append(probe.ufun.grid.weights, model.scalar_weight)
    return JacobianMatrix(mat, row_weights, phi.grid.weights)


def singular_values(jac: JacobianMatrix) -> np.ndarray:
    """Full singular spectrum of the weighted matrix, non-increasing."""
    return np.linalg.svd(jac.weighted, compute_uv=False)


def gamma_bound(j_true: JacobianMatrix, j_est: JacobianMatrix,
                tol: float = 1e-8, max_iter: int = 10_000) -> float:
    """Square root of the spectral norm of the Gram-matrix difference.

    Power iteration runs on the square of the symmetric difference, which
    is positive semidefinite, so sign ties cannot stall convergence and
    the result is exactly symmetric in the two arguments.
    """
    if j_true.mat.shape != j_est.mat.shape:
        raise ValueError("jacobians must share a shape")
    diff = j_true.gram() - j_est.gram()
    sq = diff @ diff
    n = sq.shape[0]
    v = np.random.default_rng(0).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = sq @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        lam_new = float(v @ w)
        v = w / nw
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300):
            lam = lam_new
            break
        lam = lam_new
    return max(lam, 0.0) ** 0.25


class _DiagonalModel(ForwardModel):
    """Linear multiplier model sigma*phi - data on a shared grid."""

    def __init__(self, grid, sigma: np.ndarray, data: np.ndarray):
        self.grid = grid
        self.sigma = sigma
        self.data = data

    def apply(self, phi: GridFn) -> CodomainElem:
        return CodomainElem(GridFn(self.grid, self.sigma * phi.values - self.data), 0.0)

    def deriv_apply(self, phi: GridFn, h: GridFn) -> CodomainElem:
        return CodomainElem(GridFn(self.grid, self.sigma * h.values), 0.0)

    def deriv_adjoint(self, phi: GridFn, y: CodomainElem) -> GridFn:
        return GridFn(self.grid, self.sigma * y.ufun.values)


@dataclass(frozen=True)
class RateFit:
    """Result of a rate-law experiment.

    ``fitted_rate`` is the log-log slope of error against noise level for
    the holder kind, and the estimated exponent p for the logarithmic kind.
    """

    kind: str
    deltas: tuple
    errors: tuple
    fitted_rate: float
    r_squared: float
    degenerate: bool


def rate_experiment(source: SourceCondition, decay: str, decay_rate: float,
                    deltas, dim: int = 200, seed: int = 0,
                    alpha0: float = 1.0, ratio: float = 0.9,
                    k_max: int = 260) -> RateFit:
    """Measure the error-versus-noise law on a synthetic diagonal model.

    The model's singular values follow the requested decay and the true
    solution's coefficients are Lambda(sigma_j^2) * j^(-0.51), normalized,
    which realizes the source condition by construction. Each noise level
    gets the same fixed unit-norm noise direction scaled by delta, and the
    stopping index comes from the a-priori rule with zero operator noise.

    The inner solver runs near machine precision: at the smallest alpha
    the normal equations have condition about 1/alpha, and a loose solve
    would leave errors above the regularization scales being measured.
    """
    deltas = tuple(float(d) for d in deltas)
    if len(deltas) < 2 or any(d <= 0.0 for d in deltas):
        raise ValueError("need at least two positive noise levels")
    j = np.arange(1, dim + 1, dtype=np.float64)
    if decay == "polynomial":
        sigma = j ** (-decay_rate)
    elif decay == "exponential":
        if decay_rate < 0.5:
            raise ValueError("exponential decay rate below 0.5 leaves the "
                             "qualification region of the logarithmic index")
        sigma = np.exp(-decay_rate * j)
    else:
        raise ValueError(f"unknown decay kind {decay!r}")
    grid = make_grid(dim, 0.0, 1.0)
    coeff = np.array([lambda_eval(source, s * s) for s in sigma]) * j ** (-0.51)
    phi_true = GridFn(grid, coeff)
    phi_true = (1.0 / norm(phi_true)) * phi_true
    phi0 = GridFn(grid, np.zeros(dim))
    y_exact = sigma * phi_true.values
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(dim)
    xi /= norm(GridFn(grid, xi))

    errors = []
    for delta in deltas:
        model = _DiagonalModel(grid, sigma, y_exact + delta * xi)
        cfg = IrgnmConfig(
            alpha0=alpha0, ratio=ratio, k_max=k_max,
            subproblem=CgSubproblem(tol=1e-14, max_iter=5000),
            stopping=APrioriStop(delta=delta, gamma=0.0, source=source),
        )
        trace = irgnm_run(model, Penalty("quadratic", phi0=phi0), phi0, cfg)
        errors.append(norm(trace.selected.phi - phi_true))
    errors = tuple(errors)
    if not all(math.isfinite(e) and e > 0.0 for e in errors):
        raise ValueError("rate experiment produced non-positive errors")

    x = np.log(np.asarray(deltas))
    if source.kind == "logarithmic":
        x = np.log(-np.log(np.asarray(deltas)))
    ylog = np.log(np.asarray(errors))
    slope, intercept = np.polyfit(x, ylog, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((ylog - pred) ** 2))
    ss_tot = float(np.sum((ylog - ylog.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0.0 else 0.0
    fitted = float(slope) if source.kind == "holder" else float(-slope)
    return RateFit(
        kind=source.kind,
        deltas=deltas,
        errors=errors,
        fitted_rate=fitted,
        r_squared=r_squared,
        degenerate=(r_squared < 0.5),
    )
