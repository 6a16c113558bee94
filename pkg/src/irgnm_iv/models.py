"""Forward operators for instrumental regression with a binary instrument.

The data enter through a joint density of (Y, Z, W) tabulated on a y-z grid
per instrument level w in {0, 1}.  The main operator maps a structural
function phi on the z grid to a u-indexed function

    density form:  ufun(u) = int [w1 f(u + phi(z), z, 0) - w0 f(u + phi(z), z, 1)] dz
    cdf form:      same with the y-CDF G in place of f

plus a scalar row <phi, fZ> - E[Y] that pins down the additive constant the
u-row cannot see.  A quantile operator with the same density container is
provided as a second model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grids import CodomainElem, Grid1D, GridFn, inner_product, make_grid
from .irgnm import ForwardModel, Linearization

__all__ = [
    "JointDensityGrid",
    "BinaryIVOperator",
    "QuantileIVOperator",
    "make_u_grid",
    "save_density_bundle",
    "load_density_bundle",
]


# ---------------------------------------------------------------------------
# density container


@dataclass(frozen=True)
class JointDensityGrid:
    """Joint density of (Y, Z, W) on a tensor grid, W binary.

    `f` has shape (ny, nz, 2) with level w in the last axis.  The y-partial
    `dfy` (central differences, one-sided at the boundary) and the y-CDF `G`
    (cumulative trapezoid) are derived once and cached.  `fZ` is the marginal
    instrument density and `EY` the outcome mean; together they fix the
    additive constant of the structural function.
    """

    y_grid: Grid1D
    z_grid: Grid1D
    f: np.ndarray
    w0: float
    w1: float
    fZ: GridFn
    EY: float

    def __post_init__(self) -> None:
        f = np.array(self.f, dtype=np.float64, copy=True)
        if f.shape != (self.y_grid.n, self.z_grid.n, 2):
            raise ValueError(
                f"f must have shape (ny, nz, 2) = "
                f"({self.y_grid.n}, {self.z_grid.n}, 2), got {f.shape}"
            )
        if not np.all(np.isfinite(f)):
            raise ValueError("density values must be finite")
        if np.any(f < 0.0):
            raise ValueError("density values must be non-negative")
        f.setflags(write=False)
        object.__setattr__(self, "f", f)
        if not (0.0 < self.w0 < 1.0 and 0.0 < self.w1 < 1.0):
            raise ValueError("instrument level weights must lie in (0, 1)")
        if abs(self.w0 + self.w1 - 1.0) > 1e-12:
            raise ValueError("instrument level weights must sum to 1")
        if self.fZ.grid != self.z_grid:
            raise ValueError("fZ must live on the z grid")
        if np.any(self.fZ.values < 0.0):
            raise ValueError("fZ must be non-negative")
        wy = self.y_grid.weights
        wz = self.z_grid.weights
        total = float(wy @ (f[:, :, 0] + f[:, :, 1]) @ wz)
        if abs(total - 1.0) > 0.02:
            raise ValueError(f"joint density mass {total:.4f} deviates from 1 by > 2%")
        z_mass = float(self.fZ.values @ wz)
        if abs(z_mass - 1.0) > 0.02:
            raise ValueError(f"fZ mass {z_mass:.4f} deviates from 1 by > 2%")

    @cached_property
    def dfy(self) -> np.ndarray:
        """partial f / partial y, central inside and one-sided at the ends."""
        h = self.y_grid.h
        d = np.empty_like(self.f)
        d[1:-1] = (self.f[2:] - self.f[:-2]) / (2.0 * h)
        d[0] = (self.f[1] - self.f[0]) / h
        d[-1] = (self.f[-1] - self.f[-2]) / h
        d.setflags(write=False)
        return d

    @cached_property
    def G(self) -> np.ndarray:
        """y-CDF per (z, w): cumulative trapezoid of f along y, 0 at the floor."""
        h = self.y_grid.h
        mids = 0.5 * h * (self.f[1:] + self.f[:-1])
        g = np.concatenate([np.zeros((1,) + self.f.shape[1:]), np.cumsum(mids, axis=0)])
        g.setflags(write=False)
        return g

    def level_weight(self, w: int) -> float:
        return self.w0 if w == 0 else self.w1


# ---------------------------------------------------------------------------
# columnwise interpolation on the y grid

_ZERO = "zero"
_FLAT = "flat"


def _interp_columns(grid: Grid1D, table: np.ndarray, args: np.ndarray, mode: str) -> np.ndarray:
    """Linear interpolation of table[:, j] at args[..., j], vectorized.

    `mode` fixes the off-grid convention: densities vanish ("zero"), CDFs
    saturate at their boundary values ("flat").
    """
    t = (args - grid.lo) / grid.h
    idx = np.clip(np.floor(t).astype(np.int64), 0, grid.n - 2)
    frac = t - idx
    cols = np.arange(table.shape[1])
    lo = table[idx, cols]
    hi = table[idx + 1, cols]
    out = lo + frac * (hi - lo)
    below = t < 0.0
    above = t > grid.n - 1.0
    if mode == _ZERO:
        out[below | above] = 0.0
    else:
        out = np.where(below, np.broadcast_to(table[0, cols], out.shape), out)
        out = np.where(above, np.broadcast_to(table[-1, cols], out.shape), out)
    return out


def make_u_grid(y_grid: Grid1D, phi_ref: GridFn, n_u: int) -> Grid1D:
    """u grid: the y window shifted by the reference level of phi.

    The operator evaluates the density at u + phi(z); centering the window at
    the mean of phi_ref keeps those arguments inside the y window wherever
    the density is non-negligible.
    """
    shift = float(np.mean(phi_ref.values))
    return make_grid(n_u, y_grid.lo - shift, y_grid.hi - shift)


# ---------------------------------------------------------------------------
# binary-instrument operator


class BinaryIVOperator(ForwardModel):
    """Root-finding operator for the structural function under a binary instrument.

    `form` selects the kernel of the u row: "density_form" pairs the joint
    density against the instrument weights, "cdf_form" integrates once and
    uses the y-CDF (smoother; the default for estimation).  The derivative
    kernel is the y-derivative of the apply kernel, so the cdf form
    differentiates into the density itself.
    """

    def __init__(
        self,
        density: JointDensityGrid,
        u_grid: Grid1D,
        form: str = "cdf_form",
        scalar_weight: float = 1.0,
    ):
        if form not in ("density_form", "cdf_form"):
            raise ValueError(f"unknown operator form {form!r}")
        if scalar_weight <= 0.0:
            raise ValueError("scalar_weight must be positive")
        self.density = density
        self.u_grid = u_grid
        self.form = form
        self.scalar_weight = scalar_weight
        d = density
        # combined two-level kernels; the no-information case w1 f0 = w0 f1
        # cancels these tables identically
        if form == "density_form":
            self._apply_table = d.w1 * d.f[:, :, 0] - d.w0 * d.f[:, :, 1]
            self._apply_mode = _ZERO
            self._deriv_table = d.w1 * d.dfy[:, :, 0] - d.w0 * d.dfy[:, :, 1]
        else:
            self._apply_table = d.w1 * d.G[:, :, 0] - d.w0 * d.G[:, :, 1]
            self._apply_mode = _FLAT
            self._deriv_table = d.w1 * d.f[:, :, 0] - d.w0 * d.f[:, :, 1]

    def _args(self, phi: GridFn) -> np.ndarray:
        return self.u_grid.nodes[:, None] + phi.values[None, :]

    def apply(self, phi: GridFn) -> CodomainElem:
        if phi.grid != self.density.z_grid:
            raise ValueError("phi must live on the z grid")
        kernel = _interp_columns(
            self.density.y_grid, self._apply_table, self._args(phi), self._apply_mode
        )
        ufun = GridFn(self.u_grid, kernel @ self.density.z_grid.weights)
        scalar = inner_product(phi, self.density.fZ) - self.density.EY
        return CodomainElem(ufun, scalar)

    def _kernel_matrix(self, phi: GridFn) -> np.ndarray:
        return _interp_columns(
            self.density.y_grid, self._deriv_table, self._args(phi), _ZERO
        )

    def deriv_apply(self, phi: GridFn, h: GridFn) -> CodomainElem:
        return self._lin_from_kernel(self._kernel_matrix(phi)).apply(h)

    def deriv_adjoint(self, phi: GridFn, y: CodomainElem) -> GridFn:
        return self._lin_from_kernel(self._kernel_matrix(phi)).adjoint(y)

    def _lin_from_kernel(self, kernel: np.ndarray) -> Linearization:
        d = self.density
        wz = d.z_grid.weights
        wu = self.u_grid.weights
        fz = d.fZ.values
        sw = self.scalar_weight

        def apply(h: GridFn) -> CodomainElem:
            ufun = GridFn(self.u_grid, kernel @ (wz * h.values))
            return CodomainElem(ufun, float((wz * fz) @ h.values))

        def adjoint(y: CodomainElem) -> GridFn:
            vals = kernel.T @ (wu * y.ufun.values) + sw * y.scalar * fz
            return GridFn(d.z_grid, vals)

        return Linearization(apply=apply, adjoint=adjoint)

    def linearize(self, phi: GridFn) -> Linearization:
        """Freeze the kernel matrix once; matrix products do the rest."""
        return self._lin_from_kernel(self._kernel_matrix(phi))


# ---------------------------------------------------------------------------
# instrumental quantile operator


class QuantileIVOperator(ForwardModel):
    """Quantile analog: per instrument level, int G(phi(z), z, w) dz - q f_W(w).

    The two level values form the codomain's u row on a fixed two-node grid;
    the scalar row is unused (there is no additive normalization to pin).
    """

    def __init__(self, density: JointDensityGrid, q: float, scalar_weight: float = 1.0):
        if not 0.0 < q < 1.0:
            raise ValueError("quantile level q must lie in (0, 1)")
        self.density = density
        self.q = q
        self.scalar_weight = scalar_weight
        self.w_grid = make_grid(2, 0.0, 1.0)

    def _level_values(self, phi: GridFn, table_axis: str) -> np.ndarray:
        d = self.density
        args = phi.values[None, :]  # one y-argument per z node
        out = np.empty(2)
        for w in (0, 1):
            table = d.G[:, :, w] if table_axis == "G" else d.f[:, :, w]
            mode = _FLAT if table_axis == "G" else _ZERO
            vals = _interp_columns(d.y_grid, table, args, mode)[0]
            out[w] = vals @ d.z_grid.weights
        return out

    def apply(self, phi: GridFn) -> CodomainElem:
        if phi.grid != self.density.z_grid:
            raise ValueError("phi must live on the z grid")
        d = self.density
        vals = self._level_values(phi, "G")
        vals -= self.q * np.array([d.w0, d.w1])
        return CodomainElem(GridFn(self.w_grid, vals), 0.0)

    def _kernel_matrix(self, phi: GridFn) -> np.ndarray:
        d = self.density
        args = phi.values[None, :]
        rows = [
            _interp_columns(d.y_grid, d.f[:, :, w], args, _ZERO)[0] for w in (0, 1)
        ]
        return np.vstack(rows)

    def deriv_apply(self, phi: GridFn, h: GridFn) -> CodomainElem:
        return self._lin_from_kernel(self._kernel_matrix(phi)).apply(h)

    def deriv_adjoint(self, phi: GridFn, y: CodomainElem) -> GridFn:
        return self._lin_from_kernel(self._kernel_matrix(phi)).adjoint(y)

    def _lin_from_kernel(self, kernel: np.ndarray) -> Linearization:
        d = self.density
        wz = d.z_grid.weights
        ww = self.w_grid.weights

        def apply(h: GridFn) -> CodomainElem:
            return CodomainElem(GridFn(self.w_grid, kernel @ (wz * h.values)), 0.0)

        def adjoint(y: CodomainElem) -> GridFn:
            return GridFn(d.z_grid, kernel.T @ (ww * y.ufun.values))

        return Linearization(apply=apply, adjoint=adjoint)

    def linearize(self, phi: GridFn) -> Linearization:
        return self._lin_from_kernel(self._kernel_matrix(phi))


# ---------------------------------------------------------------------------
# portable serialization: JSON header plus one CSV block per instrument level


def save_density_bundle(d: JointDensityGrid, path) -> None:
    header = {
        "y_grid": {"n": d.y_grid.n, "lo": d.y_grid.lo, "hi": d.y_grid.hi},
        "z_grid": {"n": d.z_grid.n, "lo": d.z_grid.lo, "hi": d.z_grid.hi},
        "w0": d.w0,
        "w1": d.w1,
        "EY": d.EY,
        "fZ": [float(v) for v in d.fZ.values],
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for w in (0, 1):
            fh.write(f"w={w}\n")
            for row in d.f[:, :, w]:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_density_bundle(path) -> JointDensityGrid:
    with open(path) as fh:
        lines = fh.read().splitlines()
    header = json.loads(lines[0])
    yg = make_grid(**header["y_grid"])
    zg = make_grid(**header["z_grid"])
    ny, nz = yg.n, zg.n
    f = np.empty((ny, nz, 2))
    pos = 1
    for w in (0, 1):
        if lines[pos] != f"w={w}":
            raise ValueError(f"malformed density bundle: expected 'w={w}' block at line {pos + 1}")
        pos += 1
        for i in range(ny):
            f[i, :, w] = np.array(lines[pos].split(","), dtype=np.float64)
            pos += 1
    fZ = GridFn(zg, np.asarray(header["fZ"], dtype=np.float64))
    return JointDensityGrid(yg, zg, f, header["w0"], header["w1"], fZ, header["EY"])
