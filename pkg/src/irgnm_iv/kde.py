"""Kernel density estimation of the joint (Y, Z, W) law on evaluation grids.

Product Gaussian kernels per instrument level with Silverman's rule per
dimension, reflection at the z boundaries 0 and 1 so no instrument mass
leaks outside the unit interval, and a y window wide enough that the
Gaussian tails carry negligible mass.  The estimate is assembled directly
into the density container the forward operators consume.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grids import Grid1D, GridFn, make_grid
from .models import JointDensityGrid

__all__ = [
    "Sample",
    "KdeConfig",
    "silverman_bandwidth",
    "kde_fit",
    "default_grids",
    "marginals",
    "save_sample_csv",
    "load_sample_csv",
]


@dataclass(frozen=True)
class Sample:
    y: np.ndarray
    z: np.ndarray
    w: np.ndarray
    seed: Optional[str] = None

    def __post_init__(self) -> None:
        y = np.array(self.y, dtype=np.float64, copy=True)
        z = np.array(self.z, dtype=np.float64, copy=True)
        w = np.array(self.w, dtype=np.int64, copy=True)
        if not (y.ndim == z.ndim == w.ndim == 1 and len(y) == len(z) == len(w)):
            raise ValueError("y, z, w must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
            raise ValueError("sample values must be finite")
        if np.any((z < 0.0) | (z > 1.0)):
            raise ValueError("z values must lie in [0, 1]")
        if not np.all((w == 0) | (w == 1)):
            raise ValueError("w values must be 0 or 1")
        for arr, name in ((y, "y"), (z, "z"), (w, "w")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class KdeConfig:
    bandwidth_rule: str = "silverman"
    h_y: Optional[float] = None
    h_z: Optional[float] = None
    y_window_pad: float = 4.0
    n_y: int = 256
    n_z: int = 256

    def __post_init__(self) -> None:
        if self.bandwidth_rule not in ("silverman", "fixed"):
            raise ValueError(f"unknown bandwidth rule {self.bandwidth_rule!r}")
        if self.bandwidth_rule == "fixed":
            if self.h_y is None or self.h_z is None or self.h_y <= 0.0 or self.h_z <= 0.0:
                raise ValueError("fixed bandwidth rule needs positive h_y and h_z")
        if self.y_window_pad <= 0.0:
            raise ValueError("y_window_pad must be positive")
        if self.n_y < 2 or self.n_z < 2:
            raise ValueError("grid sizes must be >= 2")


def silverman_bandwidth(x: np.ndarray) -> float:
    """0.9 min(std, IQR/1.34) m^{-1/5}; robust spread guards against outliers."""
    x = np.asarray(x, dtype=np.float64)
    m = len(x)
    if m < 2:
        raise ValueError("bandwidth selection needs at least 2 points")
    q25, q75 = np.quantile(x, [0.25, 0.75])
    spread = min(float(np.std(x, ddof=1)), (q75 - q25) / 1.34)
    if spread <= 0.0:
        raise ValueError(
            "sample spread is zero; Silverman's rule degenerates "
            "(use the fixed bandwidth rule)"
        )
    return 0.9 * spread * m ** (-0.2)


def _bandwidths(s: Sample, cfg: KdeConfig):
    """(h_y, h_z) per instrument level; rejects levels with < 2 points."""
    out = []
    for w in (0, 1):
        mask = s.w == w
        if int(mask.sum()) < 2:
            raise ValueError(f"instrument level w={w} has fewer than 2 points")
        if cfg.bandwidth_rule == "fixed":
            out.append((cfg.h_y, cfg.h_z))
        else:
            out.append(
                (silverman_bandwidth(s.y[mask]), silverman_bandwidth(s.z[mask]))
            )
    return out


def default_grids(s: Sample, cfg: KdeConfig):
    """y grid from the data range padded by y_window_pad bandwidths; z on [0, 1]."""
    bw = _bandwidths(s, cfg)
    h_y = max(b[0] for b in bw)
    pad = cfg.y_window_pad * h_y
    y_grid = make_grid(cfg.n_y, float(s.y.min()) - pad, float(s.y.max()) + pad)
    return y_grid, make_grid(cfg.n_z, 0.0, 1.0)


def _gauss_cols(nodes: np.ndarray, pts: np.ndarray, h: float) -> np.ndarray:
    c = 1.0 / (h * math.sqrt(2.0 * math.pi))
    return c * np.exp(-0.5 * ((nodes[:, None] - pts[None, :]) / h) ** 2)


def _z_cols_reflected(nodes: np.ndarray, pts: np.ndarray, h: float) -> np.ndarray:
    # mirror charges at -z_i and 2 - z_i keep the kernel mass inside [0, 1]
    return (
        _gauss_cols(nodes, pts, h)
        + _gauss_cols(nodes, -pts, h)
        + _gauss_cols(nodes, 2.0 - pts, h)
    )


_CHUNK = 8192


def kde_fit(s: Sample, cfg: KdeConfig, y_grid: Grid1D, z_grid: Grid1D) -> JointDensityGrid:
    """Product-kernel estimate of f(y, z, w) on the given grids.

    Weights are 1/n against the full sample size, so each level integrates to
    its empirical proportion and the two levels together to 1.  The total
    tabulated mass must land in [0.97, 1.01]; a shortfall means the y window
    clips the data.
    """
    bw = _bandwidths(s, cfg)
    f = np.zeros((y_grid.n, z_grid.n, 2))
    for w in (0, 1):
        h_y, h_z = bw[w]
        idx = np.flatnonzero(s.w == w)
        for start in range(0, len(idx), _CHUNK):
            pts = idx[start : start + _CHUNK]
            ky = _gauss_cols(y_grid.nodes, s.y[pts], h_y)
            kz = _z_cols_reflected(z_grid.nodes, s.z[pts], h_z)
            f[:, :, w] += ky @ kz.T
    f /= s.n

    mass = float(y_grid.weights @ (f[:, :, 0] + f[:, :, 1]) @ z_grid.weights)
    if not 0.97 <= mass <= 1.01:
        raise ValueError(
            f"estimated density mass {mass:.4f} outside [0.97, 1.01]; "
            "the y window likely clips the sample"
        )

    h_z_pool = (
        cfg.h_z if cfg.bandwidth_rule == "fixed" else silverman_bandwidth(s.z)
    )
    fz_vals = np.zeros(z_grid.n)
    for start in range(0, s.n, _CHUNK):
        sl = slice(start, start + _CHUNK)
        fz_vals += _z_cols_reflected(z_grid.nodes, s.z[sl], h_z_pool).sum(axis=1)
    fz_vals /= s.n

    w0 = float(np.mean(s.w == 0))
    return JointDensityGrid(
        y_grid, z_grid, f, w0, 1.0 - w0, GridFn(z_grid, fz_vals), float(s.y.mean())
    )


def marginals(d: JointDensityGrid):
    """Integrated marginals: fZ and fY from the table, level masses for fW."""
    wy = d.y_grid.weights
    wz = d.z_grid.weights
    both = d.f[:, :, 0] + d.f[:, :, 1]
    fz = GridFn(d.z_grid, wy @ both)
    fy = GridFn(d.y_grid, both @ wz)
    w0 = float(wy @ d.f[:, :, 0] @ wz)
    w1 = float(wy @ d.f[:, :, 1] @ wz)
    return fz, (w0, w1), fy


# ---------------------------------------------------------------------------
# sample CSV: header y,z,w


def save_sample_csv(s: Sample, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "z", "w"])
        for y, z, w in zip(s.y, s.z, s.w):
            writer.writerow([f"{y:.17g}", f"{z:.17g}", int(w)])


def load_sample_csv(path) -> Sample:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["y", "z", "w"]:
            raise ValueError(f"expected header 'y,z,w' in {path}")
        ys, zs, ws = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                ys.append(float(row[0]))
                zs.append(float(row[1]))
                ws.append(int(row[2]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return Sample(np.array(ys), np.array(zs), np.array(ws))
