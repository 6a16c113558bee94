"""Iteratively regularized Gauss-Newton method with convex penalties.

Each outer step linearizes the forward operator at the current iterate and
solves

    min over phi of  ||T (phi - phi_prev) + b||^2  +  alpha_k R(phi)

with b the nonlinear residual at phi_prev and alpha_k = alpha0 * r^k a
geometrically decaying regularization weight.  Iterate 0 is the initial
guess and carries alpha_0.  Quadratic penalties admit a conjugate-gradient
solve of the normal equations; general prox-capable penalties use FISTA.

Stopping is by fixed index, by the a-priori rule (smallest K with
alpha_{K+1} <= max(Theta^{-1}(delta), gamma^2), Theta(t) = sqrt(t) Lambda(t)),
or by a Lepskii balancing rule over the computed trace.
"""

from __future__ import annotations

import csv
import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .grids import CodomainElem, GridFn, codomain_norm, inner_product, norm
from .penalties import Penalty, penalty_eval, prox

__all__ = [
    "Linearization",
    "ForwardModel",
    "SubproblemResult",
    "solve_subproblem_quadratic",
    "solve_subproblem_convex",
    "power_iteration_sq_norm",
    "CgSubproblem",
    "FistaSubproblem",
    "FixedStop",
    "APrioriStop",
    "LepskiiStop",
    "IrgnmConfig",
    "IterateRow",
    "IterateTrace",
    "irgnm_run",
    "alpha_schedule",
    "SourceCondition",
    "lambda_eval",
    "theta_eval",
    "theta_inverse",
    "theta_and_inverse",
    "a_priori_stop_index",
    "lepskii_stop",
    "check_eta_q",
    "rate_bound",
]


# ---------------------------------------------------------------------------
# forward-model contract


@dataclass(frozen=True)
class Linearization:
    """Derivative of a forward model frozen at a point: T and its adjoint.

    ``apply`` maps a direction on the domain grid to the codomain; ``adjoint``
    is exact with respect to the quadrature inner products on both sides.
    """

    apply: Callable[[GridFn], CodomainElem]
    adjoint: Callable[[CodomainElem], GridFn]


class ForwardModel(ABC):
    """Nonlinear operator with a Gateaux derivative and its adjoint."""

    # weight of the scalar row in the codomain inner product
    scalar_weight: float = 1.0

    @abstractmethod
    def apply(self, phi: GridFn) -> CodomainElem: ...

    @abstractmethod
    def deriv_apply(self, phi: GridFn, h: GridFn) -> CodomainElem: ...

    @abstractmethod
    def deriv_adjoint(self, phi: GridFn, y: CodomainElem) -> GridFn: ...

    def linearize(self, phi: GridFn) -> Linearization:
        """Freeze the derivative at phi.  Subclasses may override to cache."""
        return Linearization(
            apply=lambda h: self.deriv_apply(phi, h),
            adjoint=lambda y: self.deriv_adjoint(phi, y),
        )


# ---------------------------------------------------------------------------
# subproblem solvers


@dataclass(frozen=True)
class SubproblemResult:
    phi: Optional[GridFn]
    iters: int
    kkt_residual: float
    status: str  # "converged" | "max_iter" | "nonfinite"

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def solve_subproblem_quadratic(
    lin: Linearization,
    b: CodomainElem,
    alpha: float,
    phi0: GridFn,
    phi_prev: GridFn,
    tol: float = 1e-8,
    max_iter: int = 2000,
    scalar_weight: float = 1.0,
) -> SubproblemResult:
    """Minimize ||T(phi - phi_prev) + b||^2 + alpha ||phi - phi0||^2 by CG.

    Conjugate gradients on the normal equations
    (T*T + alpha I) phi = T*(T phi_prev - b) + alpha phi0, warm-started at
    phi_prev; the operator is strictly positive definite for alpha > 0.
    Terminates when the normal-equation residual norm is <= tol * (1 + ||b||).
    """
    if alpha <= 0.0:
        raise ValueError("subproblem requires alpha > 0")

    def normal_op(x: GridFn) -> GridFn:
        return lin.adjoint(lin.apply(x)) + alpha * x

    rhs = lin.adjoint(lin.apply(phi_prev) - b) + alpha * phi0
    threshold = tol * (1.0 + codomain_norm(b, scalar_weight))

    x = phi_prev
    r = rhs - normal_op(x)
    d = r
    rr = inner_product(r, r)
    res = math.sqrt(max(rr, 0.0))
    iters = 0
    while res > threshold and iters < max_iter:
        ad = normal_op(d)
        dad = inner_product(d, ad)
        if dad <= 0.0 or not math.isfinite(dad):
            return SubproblemResult(None, iters, res, "nonfinite")
        step = rr / dad
        x = x + step * d
        r = r - step * ad
        rr_new = inner_product(r, r)
        d = r + (rr_new / rr) * d
        rr = rr_new
        res = math.sqrt(max(rr, 0.0))
        iters += 1
    if not math.isfinite(res):
        return SubproblemResult(None, iters, res, "nonfinite")
    status = "converged" if res <= threshold else "max_iter"
    return SubproblemResult(x, iters, res, status)


def power_iteration_sq_norm(
    lin: Linearization,
    grid_n: int,
    ref: GridFn,
    steps: int = 20,
    scalar_weight: float = 1.0,
) -> float:
    """Largest eigenvalue of T*T by power iteration (deterministic start)."""
    rng = np.random.default_rng(0)
    v = GridFn(ref.grid, rng.standard_normal(grid_n))
    v = (1.0 / max(norm(v), 1e-300)) * v
    lam = 0.0
    for _ in range(steps):
        w = lin.adjoint(lin.apply(v))
        lam = inner_product(w, v)
        nw = norm(w)
        if nw == 0.0:
            return 0.0
        v = (1.0 / nw) * w
    return max(lam, 0.0)


def solve_subproblem_convex(
    lin: Linearization,
    b: CodomainElem,
    alpha: float,
    p: Penalty,
    phi_prev: GridFn,
    tol: float = 1e-8,
    max_iter: int = 5000,
    scalar_weight: float = 1.0,
) -> SubproblemResult:
    """Minimize ||T(phi - phi_prev) + b||^2 + alpha R(phi) by FISTA.

    Step size 1/L with L = 2 * lambda_max(T*T) estimated by 20 power-iteration
    steps and a 1.1 safety factor.  The penalty enters through its prox; our
    prox solves min ||phi - v||^2 + tau R(phi), so a gradient step of size s
    against alpha R uses tau = 2 s alpha.  Terminates when the proximal
    fixed-point residual ||x - prox(x - s grad(x))|| / s <= tol * (1 + ||b||).
    """
    if alpha <= 0.0:
        raise ValueError("subproblem requires alpha > 0")

    lam = power_iteration_sq_norm(lin, phi_prev.grid.n, phi_prev, 20, scalar_weight)
    lipschitz = 2.0 * lam * 1.1
    if lipschitz <= 0.0:
        lipschitz = 2.0 * alpha  # zero operator: any positive step works
    s = 1.0 / lipschitz
    tau = 2.0 * s * alpha
    threshold = tol * (1.0 + codomain_norm(b, scalar_weight))

    def grad(x: GridFn) -> GridFn:
        return 2.0 * lin.adjoint(lin.apply(x - phi_prev) + b)

    def prox_step(x: GridFn) -> GridFn:
        return prox(p, x - s * grad(x), tau)

    try:
        x = phi_prev
        y = phi_prev
        t = 1.0
        iters = 0
        fp_res = math.inf
        while iters < max_iter:
            x_new = prox_step(y)
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
            x, t = x_new, t_new
            iters += 1
            fp_res = norm(x - prox_step(x)) / s
            if fp_res <= threshold:
                return SubproblemResult(x, iters, fp_res, "converged")
        return SubproblemResult(x, iters, fp_res, "max_iter")
    except (ValueError, FloatingPointError, OverflowError):
        return SubproblemResult(None, iters, math.inf, "nonfinite")


# ---------------------------------------------------------------------------
# configuration and trace


@dataclass(frozen=True)
class CgSubproblem:
    max_iter: int = 2000
    tol: float = 1e-8


@dataclass(frozen=True)
class FistaSubproblem:
    max_iter: int = 5000
    tol: float = 1e-8


@dataclass(frozen=True)
class FixedStop:
    k: int


@dataclass(frozen=True)
class APrioriStop:
    delta: float
    gamma: float
    source: "SourceCondition"


@dataclass(frozen=True)
class LepskiiStop:
    kappa: float = 1.0
    delta_proxy: Optional[float] = None


Stopping = Union[FixedStop, APrioriStop, LepskiiStop]


@dataclass(frozen=True)
class IrgnmConfig:
    alpha0: float = 1.0
    ratio: float = 0.9
    k_max: int = 60
    subproblem: Union[CgSubproblem, FistaSubproblem] = CgSubproblem()
    stopping: Stopping = LepskiiStop()
    # tangential-cone constant for admissibility reporting only; the solver
    # never uses it (it is an assumption of the theory, not an input)
    eta: float = 0.0

    def __post_init__(self) -> None:
        if self.alpha0 <= 0.0:
            raise ValueError("alpha0 must be positive")
        if not 0.0 < self.ratio < 1.0:
            raise ValueError("ratio must lie in (0, 1)")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")


def alpha_schedule(cfg: IrgnmConfig, k: int) -> float:
    """alpha_k = alpha0 * r^k; satisfies alpha_k <= q alpha_{k+1}, q = 1/r."""
    if k < 0:
        raise ValueError("k must be >= 0")
    return cfg.alpha0 * cfg.ratio**k


@dataclass(frozen=True)
class IterateRow:
    k: int
    alpha: float
    phi: GridFn
    residual_norm: float
    subproblem_iters: int
    kkt_residual: float


@dataclass(frozen=True)
class IterateTrace:
    rows: tuple
    stop_index: int
    stop_reason: str

    def __post_init__(self) -> None:
        alphas = [r.alpha for r in self.rows]
        if any(b >= a for a, b in zip(alphas, alphas[1:])):
            raise ValueError("trace alphas must be strictly decreasing")
        if not 0 <= self.stop_index < len(self.rows):
            raise ValueError("stop_index outside trace")

    @property
    def selected(self) -> IterateRow:
        return self.rows[self.stop_index]

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "alpha", "residual_norm", "subproblem_iters", "kkt_residual"])
            for r in self.rows:
                w.writerow(
                    [
                        r.k,
                        f"{r.alpha:.17g}",
                        f"{r.residual_norm:.17g}",
                        r.subproblem_iters,
                        f"{r.kkt_residual:.17g}",
                    ]
                )

    def save_sidecar(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {
                    "stop_index": self.stop_index,
                    "stop_reason": self.stop_reason,
                    "iterates": len(self.rows),
                    "final_alpha": self.rows[-1].alpha,
                    "selected_residual_norm": self.selected.residual_norm,
                },
                fh,
                indent=2,
            )
            fh.write("\n")


# ---------------------------------------------------------------------------
# outer loop


def irgnm_run(
    model: ForwardModel,
    p: Penalty,
    phi0: GridFn,
    cfg: IrgnmConfig,
) -> IterateTrace:
    """Run the regularized Gauss-Newton iteration from initial guess phi0.

    Iterate k solves the linearized subproblem at alpha_k = alpha0 * r^k;
    the trace records every iterate with its residual norm and subproblem
    diagnostics.  The stop index is chosen by cfg.stopping; subproblem
    non-convergence or non-finite values halt the loop with the corresponding
    stop reason.
    """
    if not math.isfinite(penalty_eval(p, phi0)):
        raise ValueError("initial guess has infinite penalty value")
    use_cg = isinstance(cfg.subproblem, CgSubproblem)
    if use_cg and p.kind != "quadratic":
        raise ValueError(
            "conjugate-gradient subproblems require the plain quadratic penalty; "
            "configure the fista subproblem for entropy or box penalties"
        )

    if isinstance(cfg.stopping, FixedStop):
        if not 0 <= cfg.stopping.k <= cfg.k_max:
            raise ValueError("fixed stop index outside [0, k_max]")
        k_last = cfg.stopping.k
    elif isinstance(cfg.stopping, APrioriStop):
        st = cfg.stopping
        k_last = a_priori_stop_index(cfg, st.source, st.delta, st.gamma)
        if k_last > cfg.k_max:
            raise ValueError(
                f"a-priori stop index {k_last} exceeds k_max {cfg.k_max}"
            )
    else:
        k_last = cfg.k_max

    sw = model.scalar_weight
    phi = phi0
    residual = model.apply(phi)
    rows = [IterateRow(0, alpha_schedule(cfg, 0), phi, codomain_norm(residual, sw), 0, 0.0)]
    reason = None

    for k in range(1, k_last + 1):
        alpha = alpha_schedule(cfg, k)
        lin = model.linearize(phi)
        try:
            if use_cg:
                sub = solve_subproblem_quadratic(
                    lin, residual, alpha, p.phi0, phi,
                    cfg.subproblem.tol, cfg.subproblem.max_iter, sw,
                )
            else:
                sub = solve_subproblem_convex(
                    lin, residual, alpha, p, phi,
                    cfg.subproblem.tol, cfg.subproblem.max_iter, sw,
                )
        except (ValueError, FloatingPointError, OverflowError):
            reason = "numerical_blowup"
            break
        if sub.status == "nonfinite":
            reason = "numerical_blowup"
            break
        if sub.status == "max_iter":
            reason = "subproblem_failure"
            break
        phi = sub.phi
        try:
            residual = model.apply(phi)
        except (ValueError, FloatingPointError, OverflowError):
            reason = "numerical_blowup"
            break
        res_norm = codomain_norm(residual, sw)
        if not math.isfinite(res_norm):
            reason = "numerical_blowup"
            break
        rows.append(IterateRow(k, alpha, phi, res_norm, sub.iters, sub.kkt_residual))

    computed_last = rows[-1].k
    if reason is None:
        if isinstance(cfg.stopping, FixedStop):
            reason, stop_index = "fixed", computed_last
        elif isinstance(cfg.stopping, APrioriStop):
            reason, stop_index = "a_priori", computed_last
        else:
            stop_index = _lepskii_from_rows(rows, cfg.stopping)
            reason = "lepskii"
    else:
        # halted early; still pick the best available iterate under the rule
        if isinstance(cfg.stopping, LepskiiStop) and len(rows) > 1:
            stop_index = _lepskii_from_rows(rows, cfg.stopping)
        else:
            stop_index = computed_last

    return IterateTrace(tuple(rows), stop_index, reason)


def _lepskii_from_rows(rows, stopping: LepskiiStop) -> int:
    dp = stopping.delta_proxy
    if dp is None:
        dp = rows[-1].residual_norm
    alphas = {r.k: r.alpha for r in rows}
    trace = IterateTrace(tuple(rows), len(rows) - 1, "pending")
    return lepskii_stop(
        trace, stopping.kappa, lambda k: dp / math.sqrt(alphas[k])
    )


def lepskii_stop(
    trace: IterateTrace,
    kappa: float = 1.0,
    noise_proxy: Optional[Callable[[int], float]] = None,
    delta_proxy: Optional[float] = None,
) -> int:
    """Balancing stop: K = min{k : ||phi_m - phi_k|| <= 4 rho_m for all m > k}.

    rho_m = kappa * noise_proxy(m); the default proxy is delta_proxy /
    sqrt(alpha_m) with delta_proxy the last iterate's residual norm, the
    noise-propagation order of the quadratic-penalty theory.  Index positions
    run over trace rows; the vacuous case returns the last index, a
    single-row trace returns 0.
    """
    rows = trace.rows
    if len(rows) == 0:
        raise ValueError("lepskii_stop needs a non-empty trace")
    if len(rows) == 1:
        return 0
    if noise_proxy is None:
        dp = delta_proxy if delta_proxy is not None else rows[-1].residual_norm
        noise_proxy = lambda k: dp / math.sqrt(
            next(r.alpha for r in rows if r.k == k)
        )
    rho = [kappa * noise_proxy(r.k) for r in rows]
    if any(b < a - 1e-15 for a, b in zip(rho, rho[1:])):
        raise ValueError("lepskii noise proxy must be non-decreasing in k")
    for i in range(len(rows)):
        if all(
            norm(rows[m].phi - rows[i].phi) <= 4.0 * rho[m]
            for m in range(i + 1, len(rows))
        ):
            return rows[i].k
    return rows[-1].k


# ---------------------------------------------------------------------------
# source conditions and rate functions


@dataclass(frozen=True)
class SourceCondition:
    """Index function Lambda: t^mu (Hoelder) or (-ln t)^(-p) (logarithmic).

    `beta` is the multiplier of the variational source condition; it enters
    the theory's constants only and is carried for reporting, never used by
    the solver.
    """

    kind: str
    mu: float = math.nan
    p: float = math.nan
    beta: float = 1.0

    def __post_init__(self) -> None:
        if self.kind == "holder":
            if not 0.0 < self.mu <= 0.5:
                raise ValueError("holder exponent mu must lie in (0, 1/2]")
        elif self.kind == "logarithmic":
            if not self.p > 0.0:
                raise ValueError("logarithmic exponent p must be positive")
        else:
            raise ValueError(f"unknown source condition kind {self.kind!r}")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")


def lambda_eval(sc: SourceCondition, t: float) -> float:
    """Lambda(t); domain t > 0 (Hoelder) or 0 < t <= e^{-1} (logarithmic).

    t = 0 returns the limit value 0 for both kinds.
    """
    if t < 0.0:
        raise ValueError("lambda_eval needs t >= 0")
    if t == 0.0:
        return 0.0
    if sc.kind == "holder":
        return t**sc.mu
    if t > math.exp(-1.0):
        raise ValueError(
            "logarithmic source condition needs t <= e^{-1} "
            "(operator scaled so ||T*T|| <= e^{-1})"
        )
    return (-math.log(t)) ** (-sc.p)


def theta_eval(sc: SourceCondition, t: float) -> float:
    """Theta(t) = sqrt(t) * Lambda(t), strictly increasing on the domain."""
    return math.sqrt(t) * lambda_eval(sc, t)


def theta_inverse(sc: SourceCondition, s: float) -> float:
    """Theta^{-1}(s) by bisection in log t; round trip accurate to 1e-12 * s."""
    if s < 0.0:
        raise ValueError("theta_inverse needs s >= 0")
    if s == 0.0:
        return 0.0
    t_hi = math.exp(-1.0) if sc.kind == "logarithmic" else 1.0
    if sc.kind == "logarithmic":
        if s > theta_eval(sc, t_hi):
            raise ValueError("s outside the range of Theta on (0, e^{-1}]")
    else:
        while theta_eval(sc, t_hi) < s:
            t_hi *= 2.0
            if t_hi > 1e300:
                raise ValueError("s outside the range of Theta")
    t_lo = t_hi
    while theta_eval(sc, t_lo) > s:
        t_lo *= 0.25
        if t_lo < 1e-300:
            return 0.0
    lo, hi = math.log(t_lo), math.log(t_hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if theta_eval(sc, math.exp(mid)) < s:
            lo = mid
        else:
            hi = mid
    return math.exp(hi)


def theta_and_inverse(sc: SourceCondition, s: float):
    """Theta evaluated at s, plus a handle computing Theta^{-1}."""
    return theta_eval(sc, s), (lambda y: theta_inverse(sc, y))


def a_priori_stop_index(
    cfg: IrgnmConfig, sc: SourceCondition, delta: float, gamma: float
) -> int:
    """Smallest K >= 0 with alpha_{K+1} <= max(Theta^{-1}(delta), gamma^2).

    Requires alpha0 strictly above the threshold; delta = gamma = 0 has no
    finite stop index and is rejected.
    """
    if delta < 0.0 or gamma < 0.0:
        raise ValueError("noise levels must be non-negative")
    threshold = max(
        theta_inverse(sc, delta) if delta > 0.0 else 0.0, gamma * gamma
    )
    if threshold == 0.0:
        raise ValueError("delta = gamma = 0 admits no finite stop index")
    if not cfg.alpha0 > threshold:
        raise ValueError(
            f"a-priori rule needs alpha0 > max(Theta^-1(delta), gamma^2) "
            f"= {threshold:.6g}, got alpha0 = {cfg.alpha0:.6g}"
        )
    k = 0
    while alpha_schedule(cfg, k + 1) > threshold:
        k += 1
        if k > 1_000_000:
            raise ValueError("stop index did not terminate; ratio too close to 1?")
    return k


def check_eta_q(eta: float, q: float) -> bool:
    """Admissibility: 4 eta (1 + eta) (1 - eta)^{-3} < q^{-3/2}, strict."""
    if not 0.0 <= eta < 1.0:
        raise ValueError("eta must lie in [0, 1)")
    if not q > 1.0:
        raise ValueError("q must exceed 1")
    return 4.0 * eta * (1.0 + eta) / (1.0 - eta) ** 3 < q ** (-1.5)


def rate_bound(sc: SourceCondition, delta: float, gamma: float) -> float:
    """Bregman-distance rate bound Lambda(max(Theta^{-1}(delta), gamma^2))^2."""
    if delta < 0.0 or gamma < 0.0:
        raise ValueError("noise levels must be non-negative")
    t = max(theta_inverse(sc, delta) if delta > 0.0 else 0.0, gamma * gamma)
    if t == 0.0:
        raise ValueError("rate bound degenerates at delta = gamma = 0")
    return lambda_eval(sc, t) ** 2
