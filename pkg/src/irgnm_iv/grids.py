"""Uniform-grid substrate: quadrature, interpolation, cumulative integrals.

Real-valued functions of one variable are sampled on uniform grids.  All inner
products use the trapezoid rule, which is second-order accurate and exact for
the piecewise-linear representation used throughout.  The codomain of the
instrumental-regression operators is the direct sum of such a function space
and a scalar row (the mean constraint), represented by `CodomainElem`.

All types are immutable value objects; operations return new instances.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "Grid1D",
    "GridFn",
    "CodomainElem",
    "make_grid",
    "const_fn",
    "inner_product",
    "norm",
    "codomain_inner",
    "codomain_norm",
    "interp_eval",
    "interp_eval_clamped",
    "cumtrapz",
    "save_gridfn_csv",
    "load_gridfn_csv",
]


@dataclass(frozen=True)
class Grid1D:
    """Uniform partition of [lo, hi] into n nodes, node(i) = lo + i*h."""

    n: int
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not isinstance(self.n, (int, np.integer)) or self.n < 2:
            raise ValueError(f"grid needs at least 2 nodes, got n={self.n}")
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError("grid endpoints must be finite")
        if not self.hi > self.lo:
            raise ValueError(f"grid needs hi > lo, got [{self.lo}, {self.hi}]")

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    @cached_property
    def nodes(self) -> np.ndarray:
        x = np.linspace(self.lo, self.hi, self.n)
        x.flags.writeable = False
        return x

    @cached_property
    def weights(self) -> np.ndarray:
        # trapezoid weights: h at interior nodes, h/2 at the two endpoints
        w = np.full(self.n, self.h)
        w[0] = w[-1] = 0.5 * self.h
        w.flags.writeable = False
        return w


def make_grid(n: int, lo: float, hi: float) -> Grid1D:
    """Build a uniform grid with n >= 2 nodes on [lo, hi], hi > lo."""
    return Grid1D(int(n), float(lo), float(hi))


@dataclass(frozen=True, eq=False)
class GridFn:
    """Function values sampled on a Grid1D; entries must be finite."""

    grid: Grid1D
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float, copy=True)
        if v.shape != (self.grid.n,):
            raise ValueError(
                f"values shape {v.shape} does not match grid size {self.grid.n}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("GridFn values must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    # vector-space arithmetic (same grid required); scalars multiply pointwise
    def __add__(self, other: "GridFn") -> "GridFn":
        _check_same_grid(self, other)
        return GridFn(self.grid, self.values + other.values)

    def __sub__(self, other: "GridFn") -> "GridFn":
        _check_same_grid(self, other)
        return GridFn(self.grid, self.values - other.values)

    def __neg__(self) -> "GridFn":
        return GridFn(self.grid, -self.values)

    def __mul__(self, a: float) -> "GridFn":
        return GridFn(self.grid, self.values * float(a))

    __rmul__ = __mul__


def const_fn(grid: Grid1D, c: float) -> GridFn:
    """Constant function c on the given grid."""
    return GridFn(grid, np.full(grid.n, float(c)))


def _check_same_grid(f: GridFn, g: GridFn) -> None:
    if f.grid != g.grid:
        raise ValueError(f"grid mismatch: {f.grid} vs {g.grid}")


def inner_product(f: GridFn, g: GridFn) -> float:
    """Trapezoid approximation of the L2 inner product of f and g.

    Symmetric by construction: the pointwise product is formed first, so
    inner_product(f, g) and inner_product(g, f) are bitwise equal.
    """
    _check_same_grid(f, g)
    return float(np.dot(f.values * g.values, f.grid.weights))


def norm(f: GridFn) -> float:
    """Trapezoid L2 norm."""
    return math.sqrt(max(inner_product(f, f), 0.0))


@dataclass(frozen=True, eq=False)
class CodomainElem:
    """Element of L2(u-grid) + R: a grid function and a scalar row."""

    ufun: GridFn
    scalar: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.scalar):
            raise ValueError("CodomainElem scalar must be finite")

    def __add__(self, other: "CodomainElem") -> "CodomainElem":
        return CodomainElem(self.ufun + other.ufun, self.scalar + other.scalar)

    def __sub__(self, other: "CodomainElem") -> "CodomainElem":
        return CodomainElem(self.ufun - other.ufun, self.scalar - other.scalar)

    def __neg__(self) -> "CodomainElem":
        return CodomainElem(-self.ufun, -self.scalar)

    def __mul__(self, a: float) -> "CodomainElem":
        return CodomainElem(self.ufun * a, self.scalar * float(a))

    __rmul__ = __mul__


def codomain_inner(a: CodomainElem, b: CodomainElem, scalar_weight: float = 1.0) -> float:
    """Inner product on the direct sum; the scalar row carries `scalar_weight`."""
    return inner_product(a.ufun, b.ufun) + scalar_weight * a.scalar * b.scalar


def codomain_norm(y: CodomainElem, scalar_weight: float = 1.0) -> float:
    """sqrt(||ufun||^2 + scalar_weight * scalar^2)."""
    return math.sqrt(max(codomain_inner(y, y, scalar_weight), 0.0))


def interp_eval(f: GridFn, x):
    """Piecewise-linear interpolation; 0 outside [lo, hi].

    Densities are tabulated on a window containing essentially all mass, so
    zero extension is the correct off-window convention for them.  Accepts a
    scalar or an array; returns a matching float or array.
    """
    out = np.interp(x, f.grid.nodes, f.values, left=0.0, right=0.0)
    return float(out) if np.isscalar(x) else out


def interp_eval_clamped(f: GridFn, x):
    """Piecewise-linear interpolation with flat extension beyond the window.

    For cumulative functions, which saturate at their endpoint values rather
    than vanishing off the window.
    """
    out = np.interp(x, f.grid.nodes, f.values)
    return float(out) if np.isscalar(x) else out


def cumtrapz(f: GridFn) -> GridFn:
    """Running trapezoid integral from lo; first entry 0."""
    v = f.values
    inc = 0.5 * f.grid.h * (v[1:] + v[:-1])
    out = np.concatenate(([0.0], np.cumsum(inc)))
    return GridFn(f.grid, out)


def save_gridfn_csv(f: GridFn, path) -> None:
    """Write `x,value` rows at full double precision (17 significant digits)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "value"])
        for x, v in zip(f.grid.nodes, f.values):
            w.writerow([f"{x:.17g}", f"{v:.17g}"])


def load_gridfn_csv(path) -> GridFn:
    """Read a GridFn written by save_gridfn_csv; grid recovered from the x column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["x", "value"]:
        raise ValueError(f"not a GridFn CSV (bad header): {path}")
    x = np.array([float(r[0]) for r in rows[1:]])
    v = np.array([float(r[1]) for r in rows[1:]])
    if len(x) < 2:
        raise ValueError(f"GridFn CSV needs at least 2 rows: {path}")
    grid = Grid1D(len(x), float(x[0]), float(x[-1]))
    return GridFn(grid, v)
