"""Command line front end: configuration, estimation runs, Monte Carlo tables.

Subcommands: simulate, kde, estimate, montecarlo, svd, rates.  A JSON config
(validated against the published schema) plus dotted-key overrides select the
design, grids, penalty, and solver; the defaults reproduce the reference
simulation study.  Outputs are flat files: CSV tables, JSON summaries, SVG
plots.  Exit codes: 0 success, 1 numerical failure, 2 input error.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources

import numpy as np
from jsonschema import Draft7Validator

from .diagnostics import RateFit, assemble_jacobian, rate_experiment, singular_values
from .grids import GridFn, const_fn, load_gridfn_csv, make_grid, norm, save_gridfn_csv
from .irgnm import (
    CgSubproblem,
    FistaSubproblem,
    FixedStop,
    IrgnmConfig,
    IterateTrace,
    LepskiiStop,
    SourceCondition,
    irgnm_run,
)
from .kde import KdeConfig, default_grids, kde_fit, load_sample_csv, save_sample_csv
from .models import BinaryIVOperator, JointDensityGrid, make_u_grid, save_density_bundle
from .penalties import Penalty
from .simulation import SimDesign, exact_density, naive_limit, sample, true_phi
from .svgplot import Series, histogram, line_plot

__all__ = ["main", "load_config", "DEFAULTS"]

# defaults reproduce the reference study: 256-point grids, alpha_k = 0.9^k,
# quadratic penalty centered at the constant E[Y] initial guess, balancing stop
DEFAULTS = {
    "design": {},
    "grids": {"n_y": 256, "n_z": 256, "n_u": 256, "y_window": [-0.35, 1.25]},
    "kde": {"bandwidth_rule": "silverman", "h_y": None, "h_z": None, "y_window_pad": 4.0},
    "penalty": {
        "kind": "quadratic",
        "phi0": None,
        "lower": None,
        "upper": None,
        "entropy_floor": 1e-12,
    },
    "irgnm": {
        "alpha0": 1.0,
        "ratio": 0.9,
        "k_max": 120,
        "form": "cdf_form",
        "scalar_weight": 1.0,
        "subproblem": {"kind": "cg", "tol": 1e-8, "max_iter": 2000},
        "stopping": {"rule": "lepskii", "kappa": 1.0, "delta_proxy": None, "k": 0},
    },
    "montecarlo": {"R": 100, "n_list": [1000, 10000], "master_seed": 20130415},
    "outputs": {"directory": "irgnm_iv_out"},
}


class CliError(Exception):
    """Classified failure carrying the machine-readable error object."""

    def __init__(self, kind: str, message: str, exit_code: int, **detail):
        super().__init__(message)
        self.kind = kind
        self.exit_code = exit_code
        self.detail = detail

    def as_json(self) -> str:
        return json.dumps({"kind": self.kind, "message": str(self), **self.detail})


# ---------------------------------------------------------------------------
# configuration


def _deep_update(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _set_dotted(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise CliError("config", f"override path {dotted!r} crosses a non-object", 2)
    node[parts[-1]] = value


def parse_overrides(extras) -> dict:
    """Turn trailing `--group.key value` pairs into a nested dict."""
    out: dict = {}
    i = 0
    while i < len(extras):
        key = extras[i]
        if not key.startswith("--") or "." not in key:
            raise CliError("config", f"unrecognized argument {key!r}", 2)
        if i + 1 >= len(extras):
            raise CliError("config", f"override {key!r} is missing a value", 2)
        raw = extras[i + 1]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_dotted(out, key[2:], value)
        i += 2
    return out


def load_config(path=None, overrides=None) -> dict:
    """Merge defaults, the optional config file, and overrides; validate."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise CliError("io", f"config file not found: {path}", 2, path=str(path))
        except json.JSONDecodeError as exc:
            raise CliError("config", f"config is not valid JSON: {exc}", 2, path=str(path))
        if not isinstance(user, dict):
            raise CliError("config", "config root must be a JSON object", 2, path=str(path))
        _deep_update(cfg, user)
    if overrides:
        _deep_update(cfg, overrides)
    schema = json.loads(
        resources.files("irgnm_iv").joinpath("run_config_schema.json").read_text()
    )
    errors = sorted(Draft7Validator(schema).iter_errors(cfg), key=str)
    if errors:
        first = errors[0]
        where = "/".join(str(p) for p in first.absolute_path) or "(root)"
        raise CliError("config", f"config invalid at {where}: {first.message}", 2)
    return cfg


def _design(cfg: dict) -> SimDesign:
    try:
        return SimDesign(**cfg["design"])
    except (TypeError, ValueError) as exc:
        raise CliError("config", f"bad design parameters: {exc}", 2)


def _irgnm_config(cfg: dict) -> IrgnmConfig:
    section = cfg["irgnm"]
    sub = section["subproblem"]
    if sub["kind"] == "cg":
        if cfg["penalty"]["kind"] != "quadratic":
            raise CliError(
                "config", "the cg subproblem applies to the quadratic penalty only", 2
            )
        subproblem = CgSubproblem(max_iter=sub["max_iter"], tol=sub["tol"])
    else:
        subproblem = FistaSubproblem(max_iter=sub["max_iter"], tol=sub["tol"])
    stop_cfg = section["stopping"]
    if stop_cfg["rule"] == "lepskii":
        stopping = LepskiiStop(kappa=stop_cfg["kappa"], delta_proxy=stop_cfg["delta_proxy"])
    else:
        stopping = FixedStop(stop_cfg["k"])
    try:
        return IrgnmConfig(
            alpha0=section["alpha0"],
            ratio=section["ratio"],
            k_max=section["k_max"],
            subproblem=subproblem,
            stopping=stopping,
        )
    except ValueError as exc:
        raise CliError("config", f"bad solver parameters: {exc}", 2)


def _phi0(cfg: dict, density: JointDensityGrid) -> GridFn:
    raw = cfg["penalty"]["phi0"]
    if raw is None:
        return const_fn(density.z_grid, density.EY)
    if isinstance(raw, str) and raw.startswith("constant:"):
        try:
            return const_fn(density.z_grid, float(raw.split(":", 1)[1]))
        except ValueError:
            raise CliError("config", f"bad constant initial guess {raw!r}", 2)
    try:
        fn = load_gridfn_csv(raw)
    except FileNotFoundError:
        raise CliError("io", f"initial guess file not found: {raw}", 2, path=raw)
    except ValueError as exc:
        raise CliError("parse", str(exc), 2, path=str(raw))
    if fn.grid.n != density.z_grid.n or not (
        math.isclose(fn.grid.lo, density.z_grid.lo)
        and math.isclose(fn.grid.hi, density.z_grid.hi)
    ):
        raise CliError("config", "initial guess grid does not match the z grid", 2)
    return GridFn(density.z_grid, fn.values)


def _penalty(cfg: dict, phi0: GridFn) -> Penalty:
    section = cfg["penalty"]
    lower = -math.inf if section["lower"] is None else section["lower"]
    upper = math.inf if section["upper"] is None else section["upper"]
    try:
        return Penalty(
            section["kind"],
            phi0=phi0,
            lower=lower,
            upper=upper,
            entropy_floor=section["entropy_floor"],
        )
    except ValueError as exc:
        raise CliError("config", f"bad penalty: {exc}", 2)


def _workers() -> int:
    cap = os.environ.get("IRGNM_IV_THREADS")
    avail = os.cpu_count() or 1
    if cap is None:
        return avail
    try:
        cap_n = int(cap)
    except ValueError:
        raise CliError("config", f"IRGNM_IV_THREADS is not an integer: {cap!r}", 2)
    if cap_n < 1:
        raise CliError("config", "IRGNM_IV_THREADS must be >= 1", 2)
    return min(avail, cap_n)


def _out_dir(cfg: dict) -> str:
    path = cfg["outputs"]["directory"]
    os.makedirs(path, exist_ok=True)
    return path


def _resolve_out(cfg: dict, explicit, default_name: str) -> str:
    """An explicit --out wins; either way the parent directory exists after."""
    if explicit:
        parent = os.path.dirname(explicit)
        if parent:
            os.makedirs(parent, exist_ok=True)
        return explicit
    return os.path.join(_out_dir(cfg), default_name)


# ---------------------------------------------------------------------------
# shared pipeline pieces


def _exact_density(cfg: dict, design: SimDesign) -> JointDensityGrid:
    grids = cfg["grids"]
    lo, hi = grids["y_window"]
    try:
        return exact_density(
            design, make_grid(grids["n_y"], lo, hi), make_grid(grids["n_z"], 0.0, 1.0)
        )
    except ValueError as exc:
        raise CliError("numerical", str(exc), 1)


def _kde_density(cfg: dict, s) -> JointDensityGrid:
    grids = cfg["grids"]
    kde_cfg = KdeConfig(
        bandwidth_rule=cfg["kde"]["bandwidth_rule"],
        h_y=cfg["kde"]["h_y"],
        h_z=cfg["kde"]["h_z"],
        y_window_pad=cfg["kde"]["y_window_pad"],
        n_y=grids["n_y"],
        n_z=grids["n_z"],
    )
    y_grid, z_grid = default_grids(s, kde_cfg)
    return kde_fit(s, kde_cfg, y_grid, z_grid)


def _load_sample(path):
    try:
        return load_sample_csv(path)
    except FileNotFoundError:
        raise CliError("io", f"sample file not found: {path}", 2, path=str(path))
    except ValueError as exc:
        raise CliError("parse", str(exc), 2, path=str(path))


@dataclass(frozen=True)
class EstimateResult:
    trace: IterateTrace
    phi0: GridFn
    truth: GridFn
    absolute_error: float
    initial_error: float
    normalized_error: float


def _estimate(cfg: dict, design: SimDesign, density: JointDensityGrid) -> EstimateResult:
    phi0 = _phi0(cfg, density)
    u_grid = make_u_grid(density.y_grid, phi0, cfg["grids"]["n_u"])
    model = BinaryIVOperator(
        density, u_grid, cfg["irgnm"]["form"], cfg["irgnm"]["scalar_weight"]
    )
    penalty = _penalty(cfg, phi0)
    try:
        trace = irgnm_run(model, penalty, phi0, _irgnm_config(cfg))
    except ValueError as exc:
        raise CliError("numerical", str(exc), 1)
    z = density.z_grid
    truth = GridFn(z, true_phi(design, z.nodes))
    selected = trace.selected.phi
    absolute = norm(GridFn(z, selected.values - truth.values))
    initial = norm(GridFn(z, phi0.values - truth.values))
    if initial == 0.0:
        raise CliError("numerical", "degenerate initial guess: already at the truth", 1)
    return EstimateResult(trace, phi0, truth, absolute, initial, absolute / initial)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: dict, args) -> int:
    design = _design(cfg)
    try:
        s = sample(design, args.n, args.seed)
    except ValueError as exc:
        raise CliError("config", str(exc), 2)
    out = _resolve_out(cfg, args.out, "sample.csv")
    save_sample_csv(s, out)
    print(json.dumps({"written": out, "n": args.n, "seed": args.seed}))
    return 0


def cmd_kde(cfg: dict, args) -> int:
    s = _load_sample(args.sample)
    try:
        density = _kde_density(cfg, s)
    except ValueError as exc:
        raise CliError("numerical", str(exc), 1)
    out = _resolve_out(cfg, args.out, "density_bundle.txt")
    save_density_bundle(density, out)
    print(json.dumps({"written": out, "n": int(s.y.size), "EY": density.EY}))
    return 0


def cmd_estimate(cfg: dict, args) -> int:
    design = _design(cfg)
    if args.exact:
        density = _exact_density(cfg, design)
        mode = "exact"
    else:
        density = _kde_density_checked(cfg, args.sample)
        mode = "sample"
    result = _estimate(cfg, design, density)
    out = _out_dir(cfg)
    trace = result.trace
    trace.save_csv(os.path.join(out, "trace.csv"))
    trace.save_sidecar(os.path.join(out, "trace.json"))
    save_gridfn_csv(trace.selected.phi, os.path.join(out, "phi_hat.csv"))
    z = density.z_grid.nodes
    line_plot(
        [
            Series(tuple(z), tuple(result.truth.values), "truth"),
            Series(tuple(z), tuple(result.phi0.values), "initial guess"),
            Series(tuple(z), tuple(trace.selected.phi.values), "estimate"),
            Series(tuple(z), tuple(naive_limit(design, z)), "naive regression limit"),
        ],
        os.path.join(out, "overlay.svg"),
        title="structural function estimate",
        x_label="z",
        y_label="phi(z)",
    )
    summary = {
        "mode": mode,
        "stop_index": trace.stop_index,
        "stop_reason": trace.stop_reason,
        "alpha": trace.selected.alpha,
        "residual_norm": trace.selected.residual_norm,
        "absolute_error": result.absolute_error,
        "initial_error": result.initial_error,
        "normalized_error": result.normalized_error,
        "normalized_initial_error": result.initial_error / result.initial_error,
        "grids": cfg["grids"],
    }
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(json.dumps({k: summary[k] for k in (
        "mode", "stop_index", "absolute_error", "normalized_error")}))
    return 0


def _kde_density_checked(cfg: dict, sample_path) -> JointDensityGrid:
    s = _load_sample(sample_path)
    try:
        return _kde_density(cfg, s)
    except ValueError as exc:
        raise CliError("numerical", str(exc), 1)


def _one_replication(cfg, design, n, rep, master_seed) -> float:
    seed = np.random.SeedSequence([master_seed, n, rep])
    s = sample(design, n, seed)
    density = _kde_density(cfg, s)
    return _estimate(cfg, design, density).normalized_error


def cmd_montecarlo(cfg: dict, args) -> int:
    design = _design(cfg)
    mc = cfg["montecarlo"]
    reps = mc["R"]
    out = _out_dir(cfg)
    workers = _workers()
    table_rows = []
    report = {"R": reps, "master_seed": mc["master_seed"], "per_n": []}
    total = 0
    failed = 0
    for n in mc["n_list"]:
        def job(rep, n=n):
            return _one_replication(cfg, design, n, rep, mc["master_seed"])

        outcomes: dict = {}
        if workers <= 1:
            for rep in range(reps):
                try:
                    outcomes[rep] = job(rep)
                except (CliError, ValueError) as exc:
                    outcomes[rep] = str(exc)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {rep: pool.submit(job, rep) for rep in range(reps)}
                for rep, fut in futures.items():
                    try:
                        outcomes[rep] = fut.result()
                    except (CliError, ValueError) as exc:
                        outcomes[rep] = str(exc)
        errors = {rep: v for rep, v in outcomes.items() if isinstance(v, float)}
        failures = {rep: v for rep, v in outcomes.items() if not isinstance(v, float)}
        total += reps
        failed += len(failures)
        if not errors:
            raise CliError("numerical", f"every replication failed at n={n}", 1)
        values = np.array([errors[rep] for rep in sorted(errors)])
        quantiles = np.quantile(values, [0.25, 0.5, 0.75, 0.9])
        median = float(quantiles[1])
        median_rep = min(sorted(errors), key=lambda rep: (abs(errors[rep] - median), rep))
        table_rows.append((n, float(values.mean()), *(float(q) for q in quantiles)))
        histogram(
            values,
            os.path.join(out, f"errors_n{n}.svg"),
            bins=20,
            title=f"normalized errors, n={n}",
            x_label="normalized error",
        )
        report["per_n"].append(
            {
                "n": n,
                "normalized_initial_error": 1.0,
                "errors": {str(rep): errors[rep] for rep in sorted(errors)},
                "failures": {str(rep): failures[rep] for rep in sorted(failures)},
                "median_replication": median_rep,
                "mean": float(values.mean()),
                "quantiles": {"p25": float(quantiles[0]), "p50": median,
                              "p75": float(quantiles[2]), "p90": float(quantiles[3])},
            }
        )
    table_path = os.path.join(out, "table.csv")
    with open(table_path, "w", newline="") as fh:
        fh.write("n,mean,p25,p50,p75,p90\n")
        for row in table_rows:
            fh.write(",".join(f"{v:.17g}" if isinstance(v, float) else str(v) for v in row))
            fh.write("\n")
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    print(json.dumps({"table": table_path, "failures": failed, "replications": total}))
    if failed > 0.05 * total:
        raise CliError(
            "numerical",
            f"{failed} of {total} replications failed (budget 5%)",
            1,
            failures=failed,
            replications=total,
        )
    return 0


def cmd_svd(cfg: dict, args) -> int:
    design = _design(cfg)
    if args.sample:
        density = _kde_density_checked(cfg, args.sample)
    else:
        density = _exact_density(cfg, design)
    z = density.z_grid
    truth = GridFn(z, true_phi(design, z.nodes))
    u_grid = make_u_grid(density.y_grid, const_fn(z, density.EY), cfg["grids"]["n_u"])
    model = BinaryIVOperator(
        density, u_grid, cfg["irgnm"]["form"], cfg["irgnm"]["scalar_weight"]
    )
    try:
        sigma = singular_values(assemble_jacobian(model, truth))
    except ValueError as exc:
        raise CliError("numerical", str(exc), 1)
    out = _out_dir(cfg)
    with open(os.path.join(out, "spectrum.csv"), "w", newline="") as fh:
        fh.write("j,sigma\n")
        for j, s in enumerate(sigma, start=1):
            fh.write(f"{j},{s:.17g}\n")
    fit_n = min(20, len(sigma))
    j = np.arange(1, fit_n + 1, dtype=np.float64)
    logs = np.log(sigma[:fit_n])
    slope, intercept = np.polyfit(j, logs, 1)
    predicted = slope * j + intercept
    ss_res = float(np.sum((logs - predicted) ** 2))
    ss_tot = float(np.sum((logs - logs.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot
    # plot only the part above the relative machine floor; zeros cannot sit
    # on a log axis
    floor = sigma[0] * 1e-17
    keep = int(np.sum(sigma > floor))
    line_plot(
        [Series(tuple(range(1, keep + 1)), tuple(sigma[:keep]))],
        os.path.join(out, "spectrum.svg"),
        title="singular values of the linearized operator",
        x_label="j",
        y_label="sigma_j",
        log_y=True,
    )
    result = {
        "n_values": len(sigma),
        "fit_range": [1, fit_n],
        "slope": float(slope),
        "r_squared": r_squared,
    }
    with open(os.path.join(out, "svd.json"), "w") as fh:
        json.dump(result, fh, indent=2)
        fh.write("\n")
    print(json.dumps(result))
    return 0


def cmd_rates(cfg: dict, args) -> int:
    if args.source_kind == "holder":
        source = SourceCondition("holder", mu=args.mu)
        decay = args.decay if args.decay else "polynomial"
        target = 2.0 * args.mu / (2.0 * args.mu + 1.0)
    else:
        source = SourceCondition("logarithmic", p=args.p)
        decay = args.decay if args.decay else "exponential"
        target = args.p
    if args.decay_rate is not None:
        decay_rate = args.decay_rate
    else:
        # defaults sit where the law is cleanly observable at dim 200:
        # fast polynomial decay for the Hoelder law, the slowest admissible
        # exponential decay for the logarithmic one
        decay_rate = 2.0 if decay == "polynomial" else 0.5
    try:
        deltas = [float(tok) for tok in args.deltas.split(",") if tok.strip()]
    except ValueError:
        raise CliError("config", f"bad --deltas list: {args.deltas!r}", 2)
    try:
        fit: RateFit = rate_experiment(source, decay, decay_rate, deltas)
    except ValueError as exc:
        raise CliError("config", str(exc), 2)
    out = _out_dir(cfg)
    with open(os.path.join(out, "rates.csv"), "w", newline="") as fh:
        fh.write("delta,error\n")
        for d, e in zip(fit.deltas, fit.errors):
            fh.write(f"{d:.17g},{e:.17g}\n")
    line_plot(
        [Series(tuple(-np.log10(fit.deltas)), tuple(fit.errors))],
        os.path.join(out, "rates.svg"),
        title="error versus noise level",
        x_label="-log10 delta",
        y_label="error",
        log_y=True,
    )
    result = {
        "kind": fit.kind,
        "parameter": args.mu if args.source_kind == "holder" else args.p,
        "decay": decay,
        "decay_rate": decay_rate,
        "fitted_rate": fit.fitted_rate,
        "target_rate": target,
        "r_squared": fit.r_squared,
        "degenerate": fit.degenerate,
    }
    with open(os.path.join(out, "rates.json"), "w") as fh:
        json.dump(result, fh, indent=2)
        fh.write("\n")
    print(json.dumps(result))
    if fit.degenerate:
        raise CliError("numerical", "rate fit is degenerate (r^2 < 0.5)", 1, **result)
    return 0


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irgnm-iv",
        description="Iteratively regularized instrument-based estimation of a "
        "structural function, with simulation and diagnostic tools.",
    )
    parser.add_argument("--config", help="JSON run configuration", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic sample to CSV")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("kde", help="estimate the joint density from a sample CSV")
    p.add_argument("--sample", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("estimate", help="run the regularized Newton estimation")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--exact", action="store_true", help="use the exact design density")
    src.add_argument("--sample", default=None, help="sample CSV -> density estimate")

    sub.add_parser("montecarlo", help="replicate sample->estimate and tabulate errors")

    p = sub.add_parser("svd", help="singular value spectrum of the linearized operator")
    p.add_argument("--sample", default=None, help="use a density estimated from this CSV")

    p = sub.add_parser("rates", help="error-versus-noise law on a synthetic model")
    p.add_argument("--source-kind", choices=("holder", "logarithmic"), default="holder")
    p.add_argument("--mu", type=float, default=0.5)
    p.add_argument("--p", type=float, default=1.0)
    p.add_argument("--decay", choices=("polynomial", "exponential"), default=None)
    p.add_argument("--decay-rate", type=float, default=None)
    p.add_argument("--deltas", default="1e-2,1e-3,1e-4,1e-5,1e-6")
    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "kde": cmd_kde,
    "estimate": cmd_estimate,
    "montecarlo": cmd_montecarlo,
    "svd": cmd_svd,
    "rates": cmd_rates,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        overrides = parse_overrides(extras)
        cfg = load_config(args.config, overrides)
        return _COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(exc.as_json(), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(
            json.dumps({"kind": "io", "message": str(exc)}), file=sys.stderr
        )
        return 2
    except Exception as exc:  # classified as internal, still machine-readable
        print(
            json.dumps({"kind": "internal", "message": f"{type(exc).__name__}: {exc}"}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
