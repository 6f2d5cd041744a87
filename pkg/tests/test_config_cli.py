import json

import numpy as np
import pytest

from gspde import ConfigError, ensemble_from_binary
from gspde.cli import main
from gspde.config import (
    build_drift,
    build_forcing,
    build_initial,
    build_kernel,
    build_noise,
    build_solver,
    build_space,
    load_config,
    master_seed,
)


def write_cfg(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload, indent=1))
    return str(path)


BASE_SOLVE = {
    "master_seed": 99,
    "kernel": {"type": "fbm", "H": 0.75},
    "noise": {"law": "power", "beta": 3.0, "N": 2},
    "space": {"triple": "w1p", "n": 6, "p": 2.0},
    "operator": {"type": "linear_heat"},
    "diffusion": {"type": "zero"},
    "forcing": {"type": "rank_one", "mode": 1, "coord": 1},
    "initial": {"type": "zero"},
    "solver": {"dt": 0.0625},
    "solve": {"n_runs": 2, "save_runs": 2},
}


class TestConfigBuilders:
    def test_master_seed_required(self):
        with pytest.raises(ConfigError, match="master_seed"):
            master_seed({})
        with pytest.raises(ConfigError):
            master_seed({"master_seed": -1})
        with pytest.raises(ConfigError):
            master_seed({"master_seed": True})
        assert master_seed({"master_seed": 7}) == 7

    def test_kernel_validation(self):
        assert build_kernel({"kernel": {"type": "fbm", "H": 0.6}}).hurst == 0.6
        with pytest.raises(ConfigError, match="kernel.H"):
            build_kernel({"kernel": {"type": "fbm"}})
        with pytest.raises(ConfigError, match="kernel"):
            build_kernel({"kernel": {"type": "fbm", "H": 0.4}})
        with pytest.raises(ConfigError, match="kernel.type"):
            build_kernel({"kernel": {"type": "brownian"}})

    def test_stationary_and_general_kernels(self):
        k = build_kernel({"kernel": {"type": "stationary", "family": "exponential", "r": 2.0}})
        assert k.kind == "stationary"
        k = build_kernel(
            {"kernel": {"type": "general", "family": "separable", "coeffs": [1.0, 2.0], "p": 1.5}}
        )
        assert k.evaluate(0.5, 0.25) == pytest.approx((1 + 1.0) * (1 + 0.5))

    def test_noise_validation(self):
        spec = build_noise({"noise": {"law": "power", "beta": 3.0, "N": 4}})
        assert spec.N == 4
        with pytest.raises(ConfigError, match="noise"):
            build_noise({"noise": {"law": "power", "beta": 1.0, "N": 4}})
        assert build_noise({}, required=False) is None

    def test_space_and_drift(self):
        cfg = {"space": {"triple": "w1p", "n": 4, "p": 4.0}, "operator": {"type": "p_laplace", "p": 4.0}}
        sp = build_space(cfg)
        A = build_drift(cfg, sp)
        assert A.constants.alpha == 4.0

    def test_constants_override(self):
        cfg = {
            "space": {"triple": "w1p", "n": 4, "p": 2.0},
            "operator": {"type": "linear_heat", "constants": {"c": 4.0}},
        }
        sp = build_space(cfg)
        A = build_drift(cfg, sp)
        assert A.constants.c == 4.0
        cfg["operator"]["constants"] = {"bogus": 1.0}
        with pytest.raises(ConfigError, match="operator.constants"):
            build_drift(cfg, sp)

    def test_custom_factory(self):
        cfg = {
            "space": {"triple": "w1p", "n": 4, "p": 2.0},
            "operator": {"type": "custom", "factory": "gspde.operators:zero_drift"},
        }
        sp = build_space(cfg)
        assert build_drift(cfg, sp).name == "zero"
        cfg["operator"]["factory"] = "gspde.operators"
        with pytest.raises(ConfigError, match="operator.factory"):
            build_drift(cfg, sp)

    def test_forcing_checks(self):
        cfg = dict(BASE_SOLVE)
        sp = build_space(cfg)
        spec = build_noise(cfg)
        h = build_forcing(cfg, sp, spec)
        assert h.dim_U == 2
        bad = dict(cfg) | {"forcing": {"type": "rank_one", "mode": 99}}
        with pytest.raises(ConfigError, match="forcing.mode"):
            build_forcing(bad, sp, spec)
        ident = dict(cfg) | {"forcing": {"type": "identity"}}
        with pytest.raises(ConfigError):
            build_forcing(ident, sp, spec)  # dim_U != n

    def test_solver_defaults_seed(self):
        cfg = {"solver": {"dt": 0.5}}
        sc = build_solver(cfg, seed=42)
        assert sc.seed_W == 42 and sc.seed_G == 42

    def test_initial_variants(self):
        sp = build_space({"space": {"triple": "w1p", "n": 3, "p": 2.0}})
        assert np.all(build_initial({}, sp, 1) == 0.0)
        arr = build_initial({"initial": {"type": "mode", "index": 2, "amplitude": 0.5}}, sp, 1)
        assert arr[1] == 0.5
        g1 = build_initial({"initial": {"type": "gaussian"}}, sp, 1, run=0)
        g2 = build_initial({"initial": {"type": "gaussian"}}, sp, 1, run=0)
        g3 = build_initial({"initial": {"type": "gaussian"}}, sp, 1, run=1)
        assert np.array_equal(g1, g2)
        assert not np.array_equal(g1, g3)
        with pytest.raises(ConfigError, match="initial.values"):
            build_initial({"initial": {"type": "coefficients", "values": [1.0]}}, sp, 1)

    def test_load_config_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{ nope }")
        with pytest.raises(ConfigError, match="line 1"):
            load_config(bad)


class TestCliSample:
    def test_writes_outputs_and_reproduces(self, tmp_path):
        cfg = write_cfg(
            tmp_path, "s.json",
            {
                "master_seed": 32,
                "output_dir": str(tmp_path / "o1"),
                "kernel": {"type": "fbm", "H": 0.75},
                "grid": {"m": 33},
                "sample": {"n_paths": 500},
            },
        )
        assert main(["sample", "--config", cfg]) == 0
        assert main(["sample", "--config", cfg, "--out", str(tmp_path / "o2")]) == 0
        a = (tmp_path / "o1" / "ensemble.csv").read_bytes()
        b = (tmp_path / "o2" / "ensemble.csv").read_bytes()
        assert a == b
        bin1 = (tmp_path / "o1" / "ensemble.bin").read_bytes()
        bin2 = (tmp_path / "o2" / "ensemble.bin").read_bytes()
        assert bin1 == bin2
        ens = ensemble_from_binary(tmp_path / "o1" / "ensemble.bin")
        assert ens.paths.shape == (500, 33)
        report = json.loads((tmp_path / "o1" / "sample_report.json").read_text())
        assert report["passed"] is True
        assert report["config"]["master_seed"] == 32

    def test_vector_sample(self, tmp_path):
        cfg = write_cfg(
            tmp_path, "v.json",
            {
                "master_seed": 3,
                "output_dir": str(tmp_path / "vo"),
                "kernel": {"type": "fbm", "H": 0.75},
                "grid": {"m": 9},
                "noise": {"law": "power", "beta": 3.0, "N": 3},
                "sample": {"n_paths": 20, "vector": True},
            },
        )
        assert main(["sample", "--config", cfg]) == 0
        ens = ensemble_from_binary(tmp_path / "vo" / "ensemble.bin")
        assert ens.paths.shape == (20, 9, 3)

    def test_invalid_path_count(self, tmp_path):
        cfg = write_cfg(
            tmp_path, "bad.json",
            {
                "master_seed": 3,
                "kernel": {"type": "fbm", "H": 0.75},
                "grid": {"m": 9},
                "sample": {"n_paths": 0},
            },
        )
        assert main(["sample", "--config", cfg, "--out", str(tmp_path / "x")]) == 2


class TestCliVerify:
    def test_pass_and_inject(self, tmp_path):
        cfg = write_cfg(
            tmp_path, "v.json",
            {
                "master_seed": 8,
                "output_dir": str(tmp_path / "vr"),
                "kernel": {"type": "fbm", "H": 0.75},
                "grid": {"m": 17},
                "verify": {"suites": ["bound", "isometry"], "n_paths": 2000},
            },
        )
        assert main(["verify", "--config", cfg]) == 0
        report = json.loads((tmp_path / "vr" / "verify_report.json").read_text())
        assert report["passed"]
        assert main(["verify", "--config", cfg, "--self-test-inject"]) == 4

    @pytest.mark.parametrize("H", [0.6, 0.75, 0.9])
    def test_driver_suites_across_hurst(self, tmp_path, H):
        cfg = write_cfg(
            tmp_path, f"h{H}.json",
            {
                "master_seed": 14,
                "output_dir": str(tmp_path / f"h{H}"),
                "kernel": {"type": "fbm", "H": H},
                "grid": {"m": 17},
                "noise": {"law": "power", "beta": 3.0, "N": 4},
                "verify": {"suites": ["bound", "isometry", "covariance"], "n_paths": 3000},
            },
        )
        assert main(["verify", "--config", cfg]) == 0

    def test_conditions_suite(self, tmp_path):
        cfg = write_cfg(
            tmp_path, "c.json",
            {
                "master_seed": 8,
                "output_dir": str(tmp_path / "cr"),
                "space": {"triple": "w1p", "n": 8, "p": 4.0},
                "operator": {"type": "p_laplace", "p": 4.0},
                "diffusion": {"type": "zero"},
                "verify": {"suites": ["conditions"], "n_samples": 200},
            },
        )
        assert main(["verify", "--config", cfg]) == 0

    def test_unknown_suite(self, tmp_path):
        cfg = write_cfg(
            tmp_path, "u.json",
            {"master_seed": 8, "kernel": {"type": "fbm", "H": 0.75}, "verify": {"suites": ["nope"]}},
        )
        assert main(["verify", "--config", cfg, "--out", str(tmp_path / "u")]) == 2


class TestCliSolve:
    def test_solve_outputs_and_reproducibility(self, tmp_path):
        cfg = write_cfg(tmp_path, "s.json", BASE_SOLVE | {"output_dir": str(tmp_path / "s1")})
        assert main(["solve", "--config", cfg]) == 0
        assert main(["solve", "--config", cfg, "--out", str(tmp_path / "s2")]) == 0
        a = (tmp_path / "s1" / "solution_run0000.csv").read_bytes()
        b = (tmp_path / "s2" / "solution_run0000.csv").read_bytes()
        assert a == b
        rep = json.loads((tmp_path / "s1" / "solve_report.json").read_text())
        assert rep["n_runs"] == 2
        assert rep["moments"]["sup_t_mean_H2"] > 0.0
        assert (tmp_path / "s1" / "solution_run0001.csv").exists()

    def test_seed_override_changes_output(self, tmp_path):
        cfg = write_cfg(tmp_path, "s.json", BASE_SOLVE | {"output_dir": str(tmp_path / "a")})
        assert main(["solve", "--config", cfg]) == 0
        assert main(["solve", "--config", cfg, "--seed", "123", "--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "solution_run0000.csv").read_bytes()
        b = (tmp_path / "b" / "solution_run0000.csv").read_bytes()
        assert a != b

    def test_contract_violation_exits_3(self, tmp_path):
        bad = BASE_SOLVE | {
            "operator": {"type": "linear_heat", "constants": {"c": 100.0}},
            "output_dir": str(tmp_path / "c"),
        }
        cfg = write_cfg(tmp_path, "bad.json", bad)
        assert main(["solve", "--config", cfg]) == 3

    def test_jobs_parallel_matches_serial(self, tmp_path):
        cfg = write_cfg(tmp_path, "p.json", BASE_SOLVE | {"output_dir": str(tmp_path / "p1")})
        assert main(["solve", "--config", cfg]) == 0
        assert main(["solve", "--config", cfg, "--jobs", "2", "--out", str(tmp_path / "p2")]) == 0
        a = (tmp_path / "p1" / "solution_run0001.csv").read_bytes()
        b = (tmp_path / "p2" / "solution_run0001.csv").read_bytes()
        assert a == b


class TestCliRates:
    def test_rate_table(self, tmp_path):
        cfg = write_cfg(
            tmp_path, "r.json",
            {
                "master_seed": 4,
                "output_dir": str(tmp_path / "r"),
                "kernel": {"type": "fbm", "H": 0.75},
                "space": {"triple": "w1p", "n": 4, "p": 2.0},
                "operator": {"type": "linear_heat", "nu": 0.1},
                "diffusion": {"type": "zero"},
                "initial": {"type": "mode", "index": 1},
                "solver": {"dt": 0.0625},
                "rates": {"dt_list": [0.0625, 0.03125], "n_runs": 1},
            },
        )
        assert main(["rates", "--config", cfg]) == 0
        lines = (tmp_path / "r" / "rates.csv").read_text().splitlines()
        assert lines[4] == "dt,strong_error"
        rep = json.loads((tmp_path / "r" / "rates_report.json").read_text())
        assert len(rep["errors"]) == 2

    def test_requires_dt_list(self, tmp_path):
        cfg = write_cfg(
            tmp_path, "r.json",
            {"master_seed": 4, "kernel": {"type": "fbm", "H": 0.75}, "rates": {}},
        )
        assert main(["rates", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
