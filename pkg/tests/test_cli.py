import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from cmmv.cli import DEFAULTS, EXIT_INVALID, EXIT_NUMERIC, EXIT_OK, ConfigError, canonicalize, emit_config, main, parse_config
from cmmv.equilibrium import EquilibriumSolution
from cmmv.montecarlo import PathEnsemble


def write_config(tmp_path, cfg, name="cfg.yaml"):
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def run(tmp_path, argv, cfg=None):
    args = list(argv) + ["--out", str(tmp_path / "out")]
    if cfg is not None:
        args += ["--config", write_config(tmp_path, cfg)]
    return main(args)


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = canonicalize(json.loads(json.dumps(DEFAULTS)))
        assert parse_config(emit_config(cfg)) == cfg

    def test_print_defaults(self, capsys):
        assert main(["--print-defaults"]) == EXIT_OK
        printed = yaml.safe_load(capsys.readouterr().out)
        assert printed["schema"] == "cmmv-cfg-v1" and printed["n"] == [8]

    def test_partial_override(self):
        cfg = parse_config("H: {family: linear, slope: 1.0}\nn: [2, 3]\n")
        assert cfg["H"] == {"family": "linear", "slope": 1.0} and cfg["n"] == [2, 3]
        assert cfg["solver"] == canonicalize(json.loads(json.dumps(DEFAULTS)))["solver"]

    @pytest.mark.parametrize("text", [
        "bogus: 1\n",
        "solver: {damping: 0}\n",
        "n: [0]\n",
        "H: {family: softplus, slope_low: 2, slope_high: 1}\n",
        "H: {family: cubic}\n",
        "simulation: {law: sideways}\n",
        "- just\n- a list\n",
    ])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_empty_is_default(self):
        assert parse_config("") == parse_config(None)


class TestSolve:
    def test_neutral(self, tmp_path, capsys):
        cfg = {"H": {"family": "linear", "slope": 1.0}, "n": [2, 8]}
        assert run(tmp_path, ["solve", "--check-martingale"], cfg) == EXIT_OK
        rep = json.loads((tmp_path / "out" / "report_n8.json").read_text())
        assert rep["passed"] and rep["residual_weights"] < 1e-12 and rep["martingale_residual"] < 1e-12
        prices = (tmp_path / "out" / "prices_n2.csv").read_text().splitlines()
        assert prices[0] == "q,s,price" and len(prices) == 4
        assert "PASS" in capsys.readouterr().out

    def test_reference_and_verify(self, tmp_path):
        cfg = {"n": [4]}
        assert run(tmp_path, ["solve"], cfg) == EXIT_OK
        sol_path = tmp_path / "out" / "solution_n4.json"
        sol = EquilibriumSolution.from_json(json.loads(sol_path.read_text()))
        assert sol.n == 4
        assert run(tmp_path, ["verify", str(sol_path)], cfg) == EXIT_OK
        assert run(tmp_path, ["verify"], cfg) == EXIT_OK

    def test_corrupted_solution_fails_verify(self, tmp_path):
        assert run(tmp_path, ["solve"], {"n": [3]}) == EXIT_OK
        path = tmp_path / "out" / "solution_n3.json"
        obj = json.loads(path.read_text())
        obj["weights"][0] += 0.05
        obj["weights"][1] -= 0.05
        path.write_text(json.dumps(obj))
        assert run(tmp_path, ["verify", str(path)], {"n": [3]}) == EXIT_NUMERIC

    def test_bad_risk_bounds(self, tmp_path, capsys):
        cfg = {"H": {"family": "softplus", "slope_low": 1.5, "slope_high": 0.5}}
        assert run(tmp_path, ["solve"], cfg) == EXIT_INVALID
        assert "0 < eps < K" in capsys.readouterr().err

    def test_iteration_budget(self, tmp_path, capsys):
        assert run(tmp_path, ["solve"], {"n": [8], "solver": {"max_iter": 2}}) == EXIT_NUMERIC
        assert "residual trace" in capsys.readouterr().err

    def test_missing_files(self, tmp_path, capsys):
        assert main(["solve", "--config", str(tmp_path / "nope.yaml")]) == EXIT_INVALID
        cfg = {"mu": {"kind": "density-table", "path": str(tmp_path / "nope.csv")}}
        assert run(tmp_path, ["solve"], cfg) == EXIT_INVALID
        assert "not found" in capsys.readouterr().err

    def test_density_table(self, tmp_path):
        xs = np.linspace(0.0, 1.0, 101)
        table = "x,density\n" + "".join(f"{float(x)!r},{0.5 + float(x)!r}\n" for x in xs)
        (tmp_path / "mu.csv").write_text(table)
        cfg = {"mu": {"kind": "density-table", "path": str(tmp_path / "mu.csv")}, "n": [3]}
        assert run(tmp_path, ["solve"], cfg) == EXIT_OK

    def test_no_command(self):
        assert main([]) == EXIT_INVALID

    def test_bad_tol(self, tmp_path):
        assert run(tmp_path, ["solve", "--tol", "-1"]) == EXIT_INVALID


class TestSimulate:
    @pytest.mark.parametrize("law", ["equivalent", "historical"])
    def test_deterministic(self, tmp_path, law):
        cfg = {"n": [4], "simulation": {"law": law, "num_paths": 500}}
        assert run(tmp_path / "a", ["simulate", "--seed", "5"], cfg) == EXIT_OK
        assert run(tmp_path / "b", ["simulate", "--seed", "5"], cfg) == EXIT_OK
        a = (tmp_path / "a" / "out" / f"paths_{law}.bin").read_bytes()
        assert a == (tmp_path / "b" / "out" / f"paths_{law}.bin").read_bytes()
        ens = PathEnsemble.from_bytes(a)
        assert ens.num_paths == 500 and ens.seed == 5 and ens.law_tag == law

    def test_limit_historical(self, tmp_path):
        cfg = {"simulation": {"law": "limit-historical", "num_paths": 300, "times": [0.5, 1.0]}}
        assert run(tmp_path, ["simulate"], cfg) == EXIT_OK
        ens = PathEnsemble.from_bytes((tmp_path / "out" / "paths_limit-historical.bin").read_bytes())
        assert ens.weights is not None and abs(ens.weights.mean() - 1.0) < 1e-10

    def test_embedding(self, tmp_path):
        cfg = {"n": [4], "simulation": {"law": "embedding", "num_paths": 50}}
        assert run(tmp_path, ["simulate"], cfg) == EXIT_OK
        rows = (tmp_path / "out" / "embedding.csv").read_text().splitlines()
        assert rows[0] == "path_id,q,tau,walk" and len(rows) == 201


class TestLimitAndStudy:
    def test_coarse_grid_fails_then_passes_loose(self, tmp_path):
        cfg = {"grid": {"points": 3001}, "limit": {"surface_x": [-1, 1, 3], "surface_t": [0, 1, 2]}}
        assert run(tmp_path, ["limit"], cfg) == EXIT_NUMERIC
        rep = json.loads((tmp_path / "out" / "limit_report.json").read_text())
        assert rep["w2_cross_check"] > 1e-4 and not rep["passed"]
        assert run(tmp_path, ["limit", "--tol", "1e-2"], cfg) == EXIT_OK
        assert len((tmp_path / "out" / "surface.csv").read_text().splitlines()) == 7

    def test_study_with_stored_limit(self, tmp_path):
        cfg = {"grid": {"points": 3001}, "n": [4, 8, 16], "study": {"num_paths": 4000}}
        run(tmp_path, ["limit", "--tol", "1"], cfg)
        cfg["limit"] = {"dir": str(tmp_path / "out")}
        assert run(tmp_path, ["study"], cfg) == EXIT_OK
        rows = (tmp_path / "out" / "study.csv").read_text().splitlines()
        assert rows[0].startswith("n,w2_nu,") and len(rows) == 4
        w2 = [float(r.split(",")[1]) for r in rows[1:]]
        assert w2[0] > w2[1] > w2[2]

    def test_study_single_n(self, tmp_path):
        assert run(tmp_path, ["study"], {"n": [4], "study": {"num_paths": 1000}}) == EXIT_OK

    def test_corrupted_limit_dir(self, tmp_path):
        cfg = {"grid": {"points": 3001}, "n": [4], "study": {"num_paths": 1000}}
        run(tmp_path, ["limit", "--tol", "1"], cfg)
        path = tmp_path / "out" / "ode.csv"
        path.write_text(path.read_text()[:200] + "\nnot,a,number,row\n")
        cfg["limit"] = {"dir": str(tmp_path / "out")}
        assert run(tmp_path, ["study"], cfg) == EXIT_NUMERIC

    def test_missing_limit_dir(self, tmp_path):
        cfg = {"n": [4], "limit": {"dir": str(tmp_path / "empty")}, "study": {"num_paths": 1000}}
        assert run(tmp_path, ["study"], cfg) == EXIT_NUMERIC


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "cmmv.cli", "--print-defaults"], capture_output=True, text=True)
    assert out.returncode == 0 and "cmmv-cfg-v1" in out.stdout
