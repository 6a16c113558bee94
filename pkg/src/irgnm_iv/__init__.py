"""Iteratively regularized Gauss-Newton estimation for instrumental regression.

Core pieces: a uniform-grid numerical substrate (`grids`), convex penalties
with Bregman distances (`penalties`), the regularized Gauss-Newton loop with
its subproblem solvers and stopping rules (`irgnm`), binary-instrument and
quantile operator models (`models`), kernel density estimation (`kde`), the
synthetic data-generating process (`simulation`), spectral and rate
diagnostics (`diagnostics`), and a batch CLI (`cli`).
"""

__version__ = "0.1.0"
