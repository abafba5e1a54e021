"""Outer loop, twin experiments, configuration, reporting, and the CLI."""

import csv
import json

import numpy as np
import pytest
from click.testing import CliRunner

from varda.cli import main as cli_main
from varda.driver import (ExperimentConfig, TgnConfig, emit_report,
                          oracle_run, run_twin, tgn_run, verify_model)
from varda.krylov import SolverConfig
from varda.problem import cost, gradient

from conftest import make_setup


def small_config(**overrides):
    base = dict(n=12, window_length=5, obs_count=6, max_inner=40, outer=3,
                seed=42, tol=1e-10)
    base.update(overrides)
    return ExperimentConfig(**base)


class TestTgnConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TgnConfig(outer_iterations=0)
        with pytest.raises(ValueError):
            TgnConfig(route="bogus")
        with pytest.raises(ValueError):
            TgnConfig(second_level="ritz-lmp", route="dual-rpcg")

    def test_saddle_routes_need_weak_formulation(self):
        setup = make_setup("strong", n=8, N=3)
        cfg = TgnConfig(route="saddle-minres")
        with pytest.raises(ValueError):
            cfg.validate_against(setup)


class TestTwinExperiment:
    def test_fixed_seed_reproducibility(self):
        c = small_config()
        t1, t2 = run_twin(c), run_twin(c)
        assert np.array_equal(t1.truth, t2.truth)
        assert np.array_equal(t1.setup.x_b, t2.setup.x_b)
        for o1, o2 in zip(t1.setup.observations, t2.setup.observations):
            assert np.array_equal(o1.y, o2.y)

    def test_near_zero_noise_observations_match_truth(self):
        c = small_config(observation_stddev=1e-12, background_stddev=1e-12)
        t = run_twin(c)
        for i, obs in enumerate(t.setup.observations):
            if obs.m:
                assert np.allclose(obs.y, obs.obsop.observe(t.truth[i]), atol=1e-9)
        assert np.allclose(t.setup.x_b, t.truth[0], atol=1e-9)

    def test_innovation_statistics_consistent_with_r(self):
        c = small_config(n=16, obs_count=16, window_length=2, seed=1,
                         observation_stddev=0.3, background_stddev=1e-10)
        samples = []
        for seed in range(650):
            c.seed = seed
            t = run_twin(c)
            for i, obs in enumerate(t.setup.observations):
                if obs.m:
                    samples.append(obs.y - obs.obsop.observe(t.truth[i]))
        var = np.concatenate(samples).var()
        assert abs(var - 0.09) <= 0.2 * 0.09  # within 20% at ~2e4 samples


class TestTgnRun:
    def test_linear_model_single_outer_reaches_minimizer(self):
        from varda.models import LinearAdvection
        setup = make_setup("strong", n=8, N=3, m_per=4, seed=3,
                           model=LinearAdvection(8))
        cfg = TgnConfig(outer_iterations=1, route="primal-pcg",
                        inner=SolverConfig(max_iterations=100, tol=1e-13))
        x, diag = tgn_run(setup, cfg)
        g0 = np.linalg.norm(gradient(setup, setup.x_b))
        assert diag["final_gradient_norm"] <= 1e-8 * max(1.0, g0)

    @pytest.mark.parametrize("route", ["primal-pcg", "primal-cgls",
                                       "dual-rpcg", "dual-gmres"])
    def test_route_equivalence_strong(self, route):
        c = small_config(route=route)
        twin = run_twin(c)
        x, diag = tgn_run(twin.setup, c.tgn_config())
        x_ref, _ = oracle_run(run_twin(c).setup, c.outer)
        assert np.linalg.norm(x - x_ref) <= 1e-6 * np.linalg.norm(x_ref)

    @pytest.mark.parametrize("route", ["primal-pcg", "dual-rpcg",
                                       "saddle-minres", "saddle-gmres"])
    def test_route_equivalence_weak(self, route):
        # tolerance kept above the attainable accuracy of the inexact-Schur
        # preconditioned saddle solves, which stagnate near 1e-9
        c = small_config(n=8, window_length=3, obs_count=4, formulation="weak",
                         max_inner=80, tol=1e-8, route=route)
        twin = run_twin(c)
        x, diag = tgn_run(twin.setup, c.tgn_config())
        x_ref, _ = oracle_run(run_twin(c).setup, c.outer)
        assert np.linalg.norm(x - x_ref) <= 1e-4 * np.linalg.norm(x_ref)

    def test_determinism(self):
        c = small_config()
        x1, d1 = tgn_run(run_twin(c).setup, c.tgn_config())
        x2, d2 = tgn_run(run_twin(c).setup, c.tgn_config())
        assert np.array_equal(x1, x2)
        assert d1["outers"][0]["residual_norms"] == d2["outers"][0]["residual_norms"]

    def test_cost_at_zero_consistency_each_outer(self):
        c = small_config()
        twin = run_twin(c)
        _, diag = tgn_run(twin.setup, c.tgn_config())
        for entry in diag["outers"]:
            assert abs(entry["quadratic_cost_at_zero"] - entry["cost_before"]) \
                <= 1e-10 * max(1.0, entry["cost_before"])

    def test_safeguarded_cost_sequence_non_increasing(self):
        c = small_config(outer=5, max_inner=25)
        twin = run_twin(c)
        _, diag = tgn_run(twin.setup, c.tgn_config())
        costs = [e["cost_before"] for e in diag["outers"]]
        costs.append(diag["final_cost"])
        assert all(b <= a + 1e-9 * abs(a) for a, b in zip(costs, costs[1:]))

    def test_ritz_recycling_reduces_total_inner_iterations(self):
        results = {}
        for sl in ("none", "ritz-lmp"):
            c = ExperimentConfig(n=40, window_length=10, obs_count=20,
                                 max_inner=60, outer=3, seed=7, tol=1e-6,
                                 second_level=sl)
            twin = run_twin(c)
            _, diag = tgn_run(twin.setup, c.tgn_config())
            results[sl] = diag["total_inner_iterations"]
        assert results["ritz-lmp"] < results["none"]


class TestConfigParsing:
    def _write(self, tmp_path, text):
        p = tmp_path / "exp.ini"
        p.write_text(text)
        return p

    def test_roundtrip(self, tmp_path):
        p = self._write(tmp_path, """
[model]
n = 16
dt = 0.01

[solver]
route = dual-rpcg
max_inner = 7

[experiment]
formulation = weak
seed = 5
""")
        cfg = ExperimentConfig.from_file(p)
        assert cfg.n == 16 and cfg.dt == 0.01
        assert cfg.route == "dual-rpcg" and cfg.max_inner == 7
        assert cfg.formulation == "weak" and cfg.seed == 5
        # untouched keys keep defaults
        assert cfg.obs_count == 20 and cfg.outer == 3

    def test_unknown_section_rejected(self, tmp_path):
        p = self._write(tmp_path, "[nonsense]\nx = 1\n")
        with pytest.raises(ValueError):
            ExperimentConfig.from_file(p)

    def test_unknown_key_rejected(self, tmp_path):
        p = self._write(tmp_path, "[model]\nbogus = 1\n")
        with pytest.raises(ValueError):
            ExperimentConfig.from_file(p)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ExperimentConfig.from_file(tmp_path / "absent.ini")


class TestEmitReport:
    def test_csv_row_count_and_json_roundtrip(self, tmp_path):
        c = small_config()
        twin = run_twin(c)
        _, diag = tgn_run(twin.setup, c.tgn_config())
        json_path, csv_path = emit_report(diag, tmp_path, c)
        parsed = json.loads(json_path.read_text())
        assert parsed["final_cost"] == diag["final_cost"]
        assert parsed["config"]["seed"] == c.seed
        with csv_path.open() as fh:
            rows = list(csv.DictReader(fh))
        expected = sum(len(e["residual_norms"]) for e in diag["outers"])
        assert len(rows) == expected
        assert rows[0]["outer_idx"] == "0" and rows[0]["inner_idx"] == "0"

    def test_empty_run_emits_valid_files(self, tmp_path):
        diag = {"outers": [], "final_cost": 0.0}
        json_path, csv_path = emit_report(diag, tmp_path)
        assert json.loads(json_path.read_text())["final_cost"] == 0.0
        with csv_path.open() as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1  # header only


class TestVerifyModel:
    def test_checks_pass_for_healthy_model(self):
        results = verify_model(small_config())
        assert results["adjoint_max_relative_error"] <= 1e-12
        assert abs(results["taylor_slope"] - 2.0) <= 0.1
        assert results["gradient_fd_relative_error"] <= 1e-6


class TestCli:
    def _config_file(self, tmp_path):
        p = tmp_path / "exp.ini"
        p.write_text("""
[model]
n = 12

[observations]
count = 6

[solver]
max_inner = 30
outer = 2

[experiment]
window_length = 4
seed = 11
""")
        return p

    def test_run_writes_reports(self, tmp_path):
        runner = CliRunner()
        cfg = self._config_file(tmp_path)
        out = tmp_path / "out"
        result = runner.invoke(cli_main, ["run", str(cfg), "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "summary.json").exists()
        assert (out / "iterations.csv").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["analysis_error"] < summary["background_error"]

    def test_run_flag_overrides(self, tmp_path):
        runner = CliRunner()
        cfg = self._config_file(tmp_path)
        out = tmp_path / "out2"
        result = runner.invoke(cli_main, [
            "run", str(cfg), "--out", str(out), "--route", "dual-rpcg",
            "--seed", "99", "--max-inner", "5", "--outer", "1"])
        assert result.exit_code == 0, result.output
        summary = json.loads((out / "summary.json").read_text())
        assert summary["route"] == "dual-rpcg"
        assert summary["config"]["seed"] == 99
        assert len(summary["outers"]) == 1

    def test_verify_passes(self, tmp_path):
        runner = CliRunner()
        cfg = self._config_file(tmp_path)
        result = runner.invoke(cli_main, ["verify", str(cfg)])
        assert result.exit_code == 0, result.output
        assert result.output.count("PASS") == 3

    def test_oracle_writes_reference(self, tmp_path):
        runner = CliRunner()
        cfg = self._config_file(tmp_path)
        out = tmp_path / "out3"
        result = runner.invoke(cli_main, ["oracle", str(cfg), "--out", str(out)])
        assert result.exit_code == 0, result.output
        data = json.loads((out / "oracle.json").read_text())
        assert data["costs"][-1] < data["costs"][0]
        assert data["analysis_error"] < data["background_error"]
