"""Convex penalties, subgradients, proximal maps, and Bregman distances.

Three penalty kinds are implemented, all separable across grid nodes:

* ``quadratic``          R(phi) = ||phi - phi0||^2   (squared grid L2, no 1/2)
* ``entropy``            R(phi) = integral phi ln phi, clamped below at a floor
* ``quadratic_with_box`` quadratic plus the indicator of [lower, upper]

Subgradients are stored as plain grid vectors; the dual pairing <g, h> is the
same trapezoid quadrature as the primal inner product.  The Bregman distance
D(phi, psi) = R(phi) - R(psi) - <psi_*, phi - psi> is the error metric of the
convergence theory and is computed from this definition directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grids import GridFn, inner_product

__all__ = ["Penalty", "penalty_eval", "subgradient", "bregman", "prox"]

# dual elements share the primal representation; the pairing is quadrature
SubgradientElem = GridFn

_KINDS = ("quadratic", "entropy", "quadratic_with_box")


@dataclass(frozen=True)
class Penalty:
    """Convex penalty; `phi0` is required for the quadratic kinds only."""

    kind: str
    phi0: Optional[GridFn] = None
    lower: float = -math.inf
    upper: float = math.inf
    entropy_floor: float = 1e-12

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if self.kind in ("quadratic", "quadratic_with_box") and self.phi0 is None:
            raise ValueError(f"{self.kind} penalty requires phi0")
        if self.kind == "quadratic_with_box" and not self.lower < self.upper:
            raise ValueError("box penalty requires lower < upper")
        if self.entropy_floor <= 0.0:
            raise ValueError("entropy floor must be positive")


def _in_box(p: Penalty, phi: GridFn) -> bool:
    return bool(
        np.all(phi.values >= p.lower) and np.all(phi.values <= p.upper)
    )


def penalty_eval(p: Penalty, phi: GridFn) -> float:
    """R(phi); +inf encodes the box indicator outside [lower, upper]."""
    if p.kind == "entropy":
        t = np.maximum(phi.values, p.entropy_floor)
        return float(np.dot(t * np.log(t), phi.grid.weights))
    if p.kind == "quadratic_with_box" and not _in_box(p, phi):
        return math.inf
    d = phi - p.phi0
    return inner_product(d, d)


def subgradient(p: Penalty, phi: GridFn) -> SubgradientElem:
    """An element of the subdifferential of R at phi.

    For the box kind phi must be feasible; the plain quadratic gradient is a
    valid subgradient there because the indicator only adds normal-cone
    directions.
    """
    if p.kind == "entropy":
        t = np.maximum(phi.values, p.entropy_floor)
        return GridFn(phi.grid, np.log(t) + 1.0)
    if p.kind == "quadratic_with_box" and not _in_box(p, phi):
        raise ValueError("subgradient undefined outside the box constraint")
    return 2.0 * (phi - p.phi0)


def bregman(
    p: Penalty, phi: GridFn, psi: GridFn, psi_star: Optional[SubgradientElem] = None
) -> float:
    """Bregman distance R(phi) - R(psi) - <psi_star, phi - psi>.

    `psi_star` defaults to subgradient(p, psi).  Both penalty values must be
    finite.  Non-negative by convexity; equals ||phi - psi||^2 exactly for the
    quadratic kinds.
    """
    r_phi = penalty_eval(p, phi)
    r_psi = penalty_eval(p, psi)
    if not (math.isfinite(r_phi) and math.isfinite(r_psi)):
        raise ValueError("bregman distance needs finite penalty values")
    if psi_star is None:
        psi_star = subgradient(p, psi)
    return r_phi - r_psi - inner_product(psi_star, phi - psi)


def prox(p: Penalty, v: GridFn, tau: float) -> GridFn:
    """argmin over phi of ||phi - v||^2 + tau * R_variable_part(phi).

    All kinds are separable, so the minimization is pointwise: closed form for
    the quadratic kinds (shrink toward phi0, then the box projection, exact
    because the objective is a scalar parabola per node), safeguarded Newton
    for entropy.
    """
    if tau <= 0.0:
        raise ValueError("prox requires tau > 0")
    if p.kind == "quadratic":
        return GridFn(v.grid, (v.values + tau * p.phi0.values) / (1.0 + tau))
    if p.kind == "quadratic_with_box":
        t = (v.values + tau * p.phi0.values) / (1.0 + tau)
        return GridFn(v.grid, np.clip(t, p.lower, p.upper))
    return GridFn(v.grid, _prox_entropy(v.values, tau))


def _prox_entropy(v: np.ndarray, tau: float) -> np.ndarray:
    # pointwise root of g(t) = 2(t - v) + tau(ln t + 1), strictly increasing in t.
    # Newton in x = ln t: gx(x) = 2(e^x - v) + tau(x + 1) is convex and
    # increasing, so one step lands above the root and iteration is monotone.
    x = np.log(np.maximum(v, tau / 4.0))
    for _ in range(80):
        ex = np.exp(x)
        g = 2.0 * (ex - v) + tau * (x + 1.0)
        step = g / (2.0 * ex + tau)
        x = x - step
        if np.max(np.abs(step)) < 1e-16:
            break
    return np.exp(x)
