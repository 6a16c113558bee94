"""Synthetic binary-instrument design: exact density, sampler, ground truth.

The design fixes a smooth structural function phi on [0, 1], a binary
instrument with P(W=0) = 2/3, conditional error means mu_0, mu_1 that are
linear in z and integrate against the instrument density to E U = 0, and a
Gaussian error scale 0.09.  The w = 0 instrument density is a truncated
normal on [0, 1]; the w = 1 density is its affine image
f_ZW(z, 1) = 0.625 f_ZW(1.25 z - 0.125, 0), supported on [0.1, 0.9].

That construction makes U independent of W while keeping E[U | Z] != 0, so
a naive regression of Y on Z converges to the wrong limit; `naive_limit`
evaluates that limit and `independence_residual` verifies the identity that
the instrument operator is built on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grids import Grid1D, GridFn, make_grid
from .kde import Sample
from .models import BinaryIVOperator, JointDensityGrid, make_u_grid

__all__ = [
    "SimDesign",
    "true_phi",
    "naive_limit",
    "f_zw",
    "mu_w",
    "exact_density",
    "independence_residual",
    "mean_u",
    "sample",
]


@dataclass(frozen=True)
class SimDesign:
    amplitude: float = 1.0 / 6.0
    phase: float = 0.25
    offset: float = 0.41
    w0: float = 2.0 / 3.0
    mu0_slope: float = 0.2
    mu0_intercept: float = -0.1
    mu1_slope: float = 0.25
    mu1_intercept: float = -0.125
    sigma_u: float = 0.09
    z_mean: float = 0.5
    z_sd: float = 0.3

    def __post_init__(self) -> None:
        if not 0.0 < self.w0 < 1.0:
            raise ValueError("w0 must lie in (0, 1)")
        if self.sigma_u <= 0.0 or self.z_sd <= 0.0:
            raise ValueError("scale parameters must be positive")

    @property
    def w1(self) -> float:
        return 1.0 - self.w0

    @cached_property
    def a(self) -> float:
        """Normalization making the w = 0 instrument density integrate to w0.

        The truncated-normal integral has the closed form
        s * sqrt(pi/2) * [erf((1-m)/(s sqrt 2)) + erf(m/(s sqrt 2))].
        """
        s, m = self.z_sd, self.z_mean
        integral = (
            s
            * math.sqrt(math.pi / 2.0)
            * (math.erf((1.0 - m) / (s * math.sqrt(2.0))) + math.erf(m / (s * math.sqrt(2.0))))
        )
        return self.w0 / integral


def true_phi(design: SimDesign, z):
    return design.amplitude * np.sin(2.0 * np.pi * (np.asarray(z, dtype=np.float64) + design.phase)) + design.offset


def mu_w(design: SimDesign, z, w: int):
    z = np.asarray(z, dtype=np.float64)
    if w == 0:
        return design.mu0_slope * z + design.mu0_intercept
    return design.mu1_slope * z + design.mu1_intercept


def naive_limit(design: SimDesign, z):
    """Limit of regressing Y on Z directly: phi plus the averaged error means."""
    return (
        design.w0 * mu_w(design, z, 0)
        + design.w1 * mu_w(design, z, 1)
        + true_phi(design, z)
    )


def f_zw(design: SimDesign, z, w: int):
    """Joint instrument density f_ZW(z, w); mass w0 and w1 = 1 - w0 per level."""
    z = np.asarray(z, dtype=np.float64)
    if w == 0:
        inside = (z >= 0.0) & (z <= 1.0)
        vals = design.a * np.exp(-0.5 * ((z - design.z_mean) / design.z_sd) ** 2)
        return np.where(inside, vals, 0.0)
    return 0.625 * f_zw(design, 1.25 * z - 0.125, 0)


def mean_u(design: SimDesign, z_grid: Grid1D) -> float:
    """Quadrature value of E U = sum_w int mu_w(z) f_ZW(z, w) dz; 0 by symmetry."""
    integrand = mu_w(design, z_grid.nodes, 0) * f_zw(design, z_grid.nodes, 0) + mu_w(
        design, z_grid.nodes, 1
    ) * f_zw(design, z_grid.nodes, 1)
    return float(z_grid.weights @ integrand)


def exact_density(design: SimDesign, y_grid: Grid1D, z_grid: Grid1D) -> JointDensityGrid:
    """Tabulate f(y, z, w) = f_ZW(z, w) N(y; phi(z) + mu_w(z), sigma_u^2).

    The y window must cover every conditional mean by at least 5 sigma so the
    tabulated density carries the full mass.
    """
    zf = np.linspace(0.0, 1.0, 4001)
    lo_needed = math.inf
    hi_needed = -math.inf
    for w in (0, 1):
        m = true_phi(design, zf) + mu_w(design, zf, w)
        lo_needed = min(lo_needed, float(m.min()) - 5.0 * design.sigma_u)
        hi_needed = max(hi_needed, float(m.max()) + 5.0 * design.sigma_u)
    if y_grid.lo > lo_needed or y_grid.hi < hi_needed:
        raise ValueError(
            f"y window [{y_grid.lo:.4f}, {y_grid.hi:.4f}] does not cover the "
            f"conditional means by 5 sigma: needs [{lo_needed:.4f}, {hi_needed:.4f}]"
        )

    z = z_grid.nodes
    y = y_grid.nodes
    f = np.empty((y_grid.n, z_grid.n, 2))
    norm_c = 1.0 / (design.sigma_u * math.sqrt(2.0 * math.pi))
    for w in (0, 1):
        m = true_phi(design, z) + mu_w(design, z, w)
        gauss = norm_c * np.exp(-0.5 * ((y[:, None] - m[None, :]) / design.sigma_u) ** 2)
        f[:, :, w] = f_zw(design, z, w)[None, :] * gauss

    fZ = GridFn(z_grid, f_zw(design, z, 0) + f_zw(design, z, 1))
    ey = float(
        z_grid.weights
        @ (
            (true_phi(design, z) + mu_w(design, z, 0)) * f_zw(design, z, 0)
            + (true_phi(design, z) + mu_w(design, z, 1)) * f_zw(design, z, 1)
        )
    )
    return JointDensityGrid(y_grid, z_grid, f, design.w0, design.w1, fZ, ey)


def independence_residual(design: SimDesign, y_grid: Grid1D, z_grid: Grid1D) -> float:
    """Sup over the u grid of the two-level cancellation integral at phi.

    With U independent of W, w1 f(u + phi(z), z, 0) - w0 f(u + phi(z), z, 1)
    integrates to zero in z for every u; on grids the value is pure
    discretization error.
    """
    d = exact_density(design, y_grid, z_grid)
    phi = GridFn(z_grid, true_phi(design, z_grid.nodes))
    op = BinaryIVOperator(d, make_u_grid(y_grid, phi, y_grid.n), form="density_form")
    return float(np.max(np.abs(op.apply(phi).ufun.values)))


def sample(design: SimDesign, n: int, seed) -> Sample:
    """Draw n i.i.d. observations of (Y, Z, W).

    Z | W = 0 is drawn by inverse CDF on a 10^4-node tabulation; Z | W = 1
    pushes the same law through the affine transform, matching the density
    rule exactly.  The draw order (W uniforms, Z uniforms, U normals) is
    fixed, so a seed reproduces the sample bit for bit.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)

    w = (rng.random(n) >= design.w0).astype(np.int64)

    zs = np.linspace(0.0, 1.0, 10_000)
    pdf = f_zw(design, zs, 0) / design.w0
    h = zs[1] - zs[0]
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * h * (pdf[1:] + pdf[:-1]))])
    cdf /= cdf[-1]
    z0 = np.interp(rng.random(n), cdf, zs)
    z = np.where(w == 1, (z0 + 0.125) / 1.25, z0)

    means = np.where(w == 1, mu_w(design, z, 1), mu_w(design, z, 0))
    u = means + design.sigma_u * rng.standard_normal(n)
    y = true_phi(design, z) + u
    return Sample(y=y, z=z, w=w, seed=repr(seed))
