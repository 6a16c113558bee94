"""End-to-end checks of the command line front end.

Commands run in-process through `main` with a temporary working directory.
Numeric quality bounds for the full-size pipeline live in the acceptance
suite; here the focus is configuration handling, artifact contracts, error
classification, and determinism.
"""

import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from irgnm_iv.cli import CliError, DEFAULTS, load_config, main, parse_overrides
from irgnm_iv.grids import load_gridfn_csv
from irgnm_iv.models import load_density_bundle
from irgnm_iv.kde import load_sample_csv

# small grids keep single runs around a tenth of a second; numeric quality
# at the full 256 size is asserted in the acceptance suite
FAST = [
    "--grids.n_y", "128", "--grids.n_z", "128", "--grids.n_u", "128",
    "--irgnm.k_max", "60",
]


def run_cli(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def last_json(stream: str) -> dict:
    lines = [ln for ln in stream.strip().splitlines() if ln.strip()]
    return json.loads(lines[-1])


@pytest.fixture(autouse=True)
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    yield tmp_path


class TestConfig:
    def test_defaults_reproduce_reference_setup(self):
        cfg = load_config(None, {})
        assert cfg["grids"] == {"n_y": 256, "n_z": 256, "n_u": 256,
                                "y_window": [-0.35, 1.25]}
        assert cfg["irgnm"]["alpha0"] == 1.0
        assert cfg["irgnm"]["ratio"] == 0.9
        assert cfg["penalty"]["kind"] == "quadratic"
        assert cfg["penalty"]["phi0"] is None
        assert cfg["irgnm"]["stopping"]["rule"] == "lepskii"

    def test_defaults_are_copied_not_shared(self):
        cfg = load_config(None, {})
        cfg["grids"]["n_y"] = 9
        assert DEFAULTS["grids"]["n_y"] == 256

    def test_file_merge_keeps_unrelated_defaults(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"irgnm": {"k_max": 7}}))
        cfg = load_config(p, {})
        assert cfg["irgnm"]["k_max"] == 7
        assert cfg["irgnm"]["ratio"] == 0.9

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"grid": {"n_y": 16}}))
        with pytest.raises(CliError) as err:
            load_config(p, {})
        assert err.value.kind == "config"
        assert err.value.exit_code == 2

    def test_schema_bounds_enforced(self):
        with pytest.raises(CliError, match="n_y"):
            load_config(None, {"grids": {"n_y": 4}})

    def test_missing_config_file_is_io_error(self):
        with pytest.raises(CliError) as err:
            load_config("no_such.json", {})
        assert err.value.kind == "io"

    def test_invalid_json_is_config_error(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text("{not json")
        with pytest.raises(CliError) as err:
            load_config(p, {})
        assert err.value.kind == "config"

    def test_override_parsing(self):
        out = parse_overrides(["--irgnm.k_max", "9", "--montecarlo.n_list", "[5, 6]"])
        assert out == {"irgnm": {"k_max": 9}, "montecarlo": {"n_list": [5, 6]}}

    def test_override_without_dot_rejected(self):
        with pytest.raises(CliError, match="unrecognized"):
            parse_overrides(["--badflag", "1"])

    def test_override_missing_value_rejected(self):
        with pytest.raises(CliError, match="value"):
            parse_overrides(["--irgnm.k_max"])

    def test_string_override_passes_through(self):
        out = parse_overrides(["--outputs.directory", "results"])
        assert out == {"outputs": {"directory": "results"}}

    def test_bad_override_reaches_exit_code_2(self, capsys):
        code, _, err = run_cli(["simulate", "--n", "10", "--grids.n_y", "4"], capsys)
        assert code == 2
        assert last_json(err)["kind"] == "config"


class TestSimulate:
    def test_same_seed_same_bytes(self, tmp_path, capsys):
        for name in ("a.csv", "b.csv"):
            code, _, _ = run_cli(
                ["simulate", "--n", "1000", "--seed", "7", "--out", name], capsys
            )
            assert code == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_default_out_lands_in_outputs_dir(self, tmp_path, capsys):
        code, out, _ = run_cli(
            ["simulate", "--n", "50", "--outputs.directory", "res"], capsys
        )
        assert code == 0
        path = tmp_path / "res" / "sample.csv"
        assert path.exists()
        s = load_sample_csv(path)
        assert s.y.size == 50

    def test_bad_n_rejected(self, capsys):
        code, _, err = run_cli(["simulate", "--n", "0"], capsys)
        assert code == 2
        assert last_json(err)["kind"] == "config"


class TestKde:
    def test_bundle_round_trip_and_masses(self, tmp_path, capsys):
        run_cli(["simulate", "--n", "4000", "--seed", "3", "--out", "s.csv"], capsys)
        code, out, _ = run_cli(
            ["kde", "--sample", "s.csv", "--out", "dens.txt"] + FAST, capsys
        )
        assert code == 0
        d = load_density_bundle(tmp_path / "dens.txt")
        s = load_sample_csv(tmp_path / "s.csv")
        np.testing.assert_allclose(d.EY, s.y.mean(), rtol=1e-12)
        wy, wz = d.y_grid.weights, d.z_grid.weights
        mass0 = float(wy @ d.f[:, :, 0] @ wz)
        np.testing.assert_allclose(mass0, np.mean(s.w == 0), atol=0.02)

    def test_missing_sample_is_io_error(self, capsys):
        code, _, err = run_cli(["kde", "--sample", "ghost.csv"], capsys)
        assert code == 2
        assert last_json(err)["kind"] == "io"


class TestEstimateExact:
    def test_artifacts_and_summary_contract(self, tmp_path, capsys):
        code, out, _ = run_cli(
            ["estimate", "--exact", "--outputs.directory", "res"] + FAST, capsys
        )
        assert code == 0
        res = tmp_path / "res"
        trace_rows = (res / "trace.csv").read_text().strip().splitlines()
        assert trace_rows[0] == "k,alpha,residual_norm,subproblem_iters,kkt_residual"
        assert len(trace_rows) == 62  # header + iterates k = 0..60
        phi = load_gridfn_csv(res / "phi_hat.csv")
        assert phi.grid.n == 128
        root = ET.parse(res / "overlay.svg").getroot()
        assert root.tag.endswith("svg")
        summary = json.loads((res / "summary.json").read_text())
        assert summary["mode"] == "exact"
        assert summary["stop_reason"] == "lepskii"
        assert summary["normalized_initial_error"] == 1.0
        assert summary["absolute_error"] <= summary["initial_error"]
        sidecar = json.loads((res / "trace.json").read_text())
        assert sidecar["stop_index"] == summary["stop_index"]

    def test_reruns_are_bit_identical(self, tmp_path, capsys):
        blobs = []
        for d in ("r1", "r2"):
            code, _, _ = run_cli(
                ["estimate", "--exact", "--outputs.directory", d] + FAST, capsys
            )
            assert code == 0
            blobs.append(
                (tmp_path / d / "trace.csv").read_bytes()
                + (tmp_path / d / "phi_hat.csv").read_bytes()
            )
        assert blobs[0] == blobs[1]

    def test_fixed_stop_override(self, tmp_path, capsys):
        code, out, _ = run_cli(
            ["estimate", "--exact", "--outputs.directory", "res",
             "--irgnm.stopping.rule", "fixed", "--irgnm.stopping.k", "5",
             "--irgnm.k_max", "10"] + FAST[:6], capsys
        )
        assert code == 0
        assert last_json(out)["stop_index"] == 5

    def test_insufficient_window_is_numerical_error(self, capsys):
        code, _, err = run_cli(
            ["estimate", "--exact", "--grids.y_window", "[-0.1, 1.25]"], capsys
        )
        assert code == 1
        obj = last_json(err)
        assert obj["kind"] == "numerical"
        assert "window" in obj["message"]

    def test_constant_initial_guess_override(self, tmp_path, capsys):
        code, out, _ = run_cli(
            ["estimate", "--exact", "--outputs.directory", "res",
             "--penalty.phi0", "constant:0.41"] + FAST, capsys
        )
        assert code == 0
        summary = json.loads((tmp_path / "res" / "summary.json").read_text())
        assert summary["normalized_initial_error"] == 1.0


class TestEstimateSample:
    def test_large_sample_run_meets_loose_bound(self, tmp_path, capsys):
        run_cli(["simulate", "--n", "100000", "--seed", "2024",
                 "--out", "s.csv"], capsys)
        code, out, _ = run_cli(
            ["estimate", "--sample", "s.csv", "--outputs.directory", "res"], capsys
        )
        assert code == 0
        summary = json.loads((tmp_path / "res" / "summary.json").read_text())
        assert summary["mode"] == "sample"
        assert summary["normalized_error"] <= 0.6

    def test_malformed_csv_is_parse_error_exit_2(self, tmp_path, capsys):
        (tmp_path / "bad.csv").write_text("y,z,w\n0.1,0.2,0\nnope\n")
        code, _, err = run_cli(["estimate", "--sample", "bad.csv"], capsys)
        assert code == 2
        obj = last_json(err)
        assert obj["kind"] == "parse"
        assert "bad.csv" in obj["message"]

    def test_missing_sample_is_io_error(self, capsys):
        code, _, err = run_cli(["estimate", "--sample", "ghost.csv"], capsys)
        assert code == 2
        assert last_json(err)["kind"] == "io"


MC_FAST = FAST + ["--montecarlo.master_seed", "11"]


class TestMontecarlo:
    def test_single_replication_degenerate_quantiles(self, tmp_path, capsys):
        code, _, _ = run_cli(
            ["montecarlo", "--montecarlo.R", "1", "--montecarlo.n_list", "[300]",
             "--outputs.directory", "res"] + MC_FAST, capsys
        )
        assert code == 0
        header, row = (tmp_path / "res" / "table.csv").read_text().strip().splitlines()
        assert header == "n,mean,p25,p50,p75,p90"
        n, mean, p25, p50, p75, p90 = row.split(",")
        assert n == "300"
        assert mean == p25 == p50 == p75 == p90

    def test_reruns_bit_identical_and_report_consistent(self, tmp_path, capsys):
        blobs = []
        for d in ("m1", "m2"):
            code, _, _ = run_cli(
                ["montecarlo", "--montecarlo.R", "3",
                 "--montecarlo.n_list", "[300]",
                 "--outputs.directory", d] + MC_FAST, capsys
            )
            assert code == 0
            blobs.append(
                (tmp_path / d / "table.csv").read_bytes()
                + (tmp_path / d / "report.json").read_bytes()
            )
        assert blobs[0] == blobs[1]
        report = json.loads((tmp_path / "m1" / "report.json").read_text())
        entry = report["per_n"][0]
        errors = {int(k): v for k, v in entry["errors"].items()}
        assert entry["normalized_initial_error"] == 1.0
        assert set(errors) == {0, 1, 2}
        med = entry["quantiles"]["p50"]
        best = min(sorted(errors), key=lambda rep: (abs(errors[rep] - med), rep))
        assert entry["median_replication"] == best
        q = entry["quantiles"]
        assert q["p25"] <= q["p50"] <= q["p75"] <= q["p90"]

    def test_histogram_emitted_per_sample_size(self, tmp_path, capsys):
        run_cli(
            ["montecarlo", "--montecarlo.R", "2",
             "--montecarlo.n_list", "[300, 400]",
             "--outputs.directory", "res"] + MC_FAST, capsys
        )
        assert (tmp_path / "res" / "errors_n300.svg").exists()
        assert (tmp_path / "res" / "errors_n400.svg").exists()

    def test_threaded_pool_matches_sequential(self, tmp_path, capsys, monkeypatch):
        run_cli(
            ["montecarlo", "--montecarlo.R", "3", "--montecarlo.n_list", "[300]",
             "--outputs.directory", "seq"] + MC_FAST, capsys
        )
        monkeypatch.setattr(os, "cpu_count", lambda: 4)
        monkeypatch.setenv("IRGNM_IV_THREADS", "2")
        run_cli(
            ["montecarlo", "--montecarlo.R", "3", "--montecarlo.n_list", "[300]",
             "--outputs.directory", "par"] + MC_FAST, capsys
        )
        assert (tmp_path / "seq" / "table.csv").read_bytes() == (
            tmp_path / "par" / "table.csv"
        ).read_bytes()

    def test_thread_cap_validated(self, capsys, monkeypatch):
        monkeypatch.setenv("IRGNM_IV_THREADS", "zero")
        code, _, err = run_cli(
            ["montecarlo", "--montecarlo.R", "1", "--montecarlo.n_list", "[300]"]
            + MC_FAST, capsys
        )
        assert code == 2
        assert last_json(err)["kind"] == "config"

    def test_all_replications_failing_exits_1(self, tmp_path, capsys):
        # a fixed bandwidth far below the grid spacing makes the tabulated
        # density miss the kernel spikes, so every replication trips the
        # mass guard and the run as a whole must report a numerical failure
        code, _, err = run_cli(
            ["montecarlo", "--montecarlo.R", "2", "--montecarlo.n_list", "[300]",
             "--kde.bandwidth_rule", "fixed", "--kde.h_y", "1e-6",
             "--kde.h_z", "1e-6", "--outputs.directory", "res"]
            + MC_FAST, capsys
        )
        assert code == 1
        assert last_json(err)["kind"] == "numerical"


class TestSvd:
    def test_spectrum_artifacts_and_fit(self, tmp_path, capsys):
        code, out, _ = run_cli(["svd", "--outputs.directory", "res"], capsys)
        assert code == 0
        rows = (tmp_path / "res" / "spectrum.csv").read_text().strip().splitlines()
        assert rows[0] == "j,sigma"
        assert len(rows) == 257  # 256 singular values
        sigma = np.array([float(r.split(",")[1]) for r in rows[1:]])
        assert np.all(np.diff(sigma) <= 1e-15)
        result = json.loads((tmp_path / "res" / "svd.json").read_text())
        assert result["r_squared"] >= 0.95
        assert result["slope"] < 0.0
        ET.parse(tmp_path / "res" / "spectrum.svg")


class TestRates:
    def test_default_holder_run(self, tmp_path, capsys):
        code, out, _ = run_cli(["rates", "--outputs.directory", "res"], capsys)
        assert code == 0
        result = json.loads((tmp_path / "res" / "rates.json").read_text())
        assert result["kind"] == "holder"
        assert result["target_rate"] == 0.5
        assert 0.4 <= result["fitted_rate"] <= 0.6
        assert not result["degenerate"]
        rows = (tmp_path / "res" / "rates.csv").read_text().strip().splitlines()
        assert rows[0] == "delta,error"
        assert len(rows) == 6

    def test_bad_deltas_rejected(self, capsys):
        code, _, err = run_cli(["rates", "--deltas", "1e-2,oops"], capsys)
        assert code == 2
        assert last_json(err)["kind"] == "config"
