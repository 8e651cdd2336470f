import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from adareg.cli import main
from adareg.driver import RunTrace
from adareg.harness import (
    EXIT_CODES,
    THREADS_ENV,
    ExperimentSpec,
    ShortTrace,
    corpus_specs,
    fit_rates,
    iteration_exponent,
    loglog_slope,
    mann_kendall_s,
    map_ordered,
    run_experiment,
    sweep_epsilon,
    thread_count,
)


def synthetic_trace(grad, chi=None):
    chi = [0.0] * len(grad) if chi is None else chi
    recs = [{"k": i, "grad_norm": g, "chi": c, "beta": None, "calls": {}} for i, (g, c) in enumerate(zip(grad, chi))]
    return RunTrace(problem="synthetic", dim=1, config={}, records=recs)


class TestFitRates:
    def test_exact_power_law(self):
        j = np.arange(1, 201, dtype=float)
        rep = fit_rates(synthetic_trace(list(j ** (-2.0 / 3.0)), list(j ** (-1.0 / 3.0))), 2)
        assert rep.grad_slope == pytest.approx(-2.0 / 3.0, abs=1e-6)
        assert rep.curv_slope == pytest.approx(-1.0 / 3.0, abs=1e-6)
        assert rep.curvature_key == "chi"
        # q_k = k^(-2/3) k^(2/3) is constant, so there is no trend
        assert rep.grad_trend == 0
        assert rep.grad_bound_stat == pytest.approx(1.0)

    def test_constant(self):
        rep = fit_rates(synthetic_trace([0.5] * 80), 2)
        assert rep.grad_slope == pytest.approx(0.0, abs=1e-12)

    def test_running_minimum_used(self):
        g = [1.0, 0.1] + [5.0] * 60
        rep = fit_rates(synthetic_trace(g), 2)
        assert rep.grad_slope == pytest.approx(0.0, abs=1e-12)

    def test_short_trace(self):
        with pytest.raises(ShortTrace):
            fit_rates(synthetic_trace([1.0] * 10), 2)

    def test_tail_fraction_validation(self):
        with pytest.raises(ValueError):
            fit_rates(synthetic_trace([1.0] * 60), 2, tail_fraction=0.0)


class TestStatistics:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=40))
    def test_mann_kendall_sign_matches_kendall_tau(self, xs):
        S = mann_kendall_s(xs, rtol=0.0)
        tau = stats.kendalltau(np.arange(len(xs)), xs).statistic
        if np.isnan(tau):
            assert S == 0
        else:
            assert np.sign(S) == np.sign(round(tau, 12))

    def test_mann_kendall_examples(self):
        assert mann_kendall_s([1, 2, 3, 4]) == 6
        assert mann_kendall_s([4, 3, 2, 1]) == -6
        assert mann_kendall_s([1, 1, 1]) == 0
        assert mann_kendall_s([1.0, 1.0 + 1e-15, 1.0 - 1e-15]) == 0
        assert mann_kendall_s([1.0, 1.0 + 1e-15, 1.0 - 1e-15], rtol=0.0) == -1

    def test_loglog_slope_drops_zeros(self):
        k = np.arange(1, 11, dtype=float)
        v = k**-1.0
        v[3] = 0.0
        assert loglog_slope(k, v) == pytest.approx(-1.0, abs=1e-12)

    def test_iteration_exponent(self):
        eps = np.array([1e-2, 1e-3, 1e-4, 1e-5])
        iters = eps ** (-1.5) - 1.0
        assert iteration_exponent(eps, iters) == pytest.approx(1.5, abs=1e-9)


class TestExperiment:
    def test_zero_budget(self, tmp_path):
        res = run_experiment(ExperimentSpec("quartic", 3, max_iters=0), out_dir=tmp_path)
        assert res.trace.termination == "budget" and res.trace.records == []
        assert res.exit_code == EXIT_CODES["budget"]
        lines = res.files[0].read_text().splitlines()
        assert [json.loads(line)["type"] for line in lines] == ["header", "summary"]

    def test_reproducible_bytes(self, tmp_path):
        spec = ExperimentSpec("trig", 4, strategy="dfp-fd", m=5, max_iters=100, seed=3)
        a = run_experiment(spec, out_dir=tmp_path / "a")
        b = run_experiment(spec, out_dir=tmp_path / "b")
        for fa, fb in zip(a.files, b.files):
            assert fa.read_bytes() == fb.read_bytes()

    def test_ledger_discrepancy_zero(self):
        res = run_experiment(ExperimentSpec("rosenbrock", 2, strategy="psb-fd", m=5, max_iters=300))
        assert all(v == 0 for v in res.ledger_discrepancy().values())
        assert 0 not in res.wrapper_calls

    def test_problem_sigma0_default(self):
        spec = ExperimentSpec("rosenbrock", 2)
        assert spec.solver_config(spec.build_problem()).sigma0 == 100.0
        spec = ExperimentSpec("rosenbrock", 2, sigma0=3.0)
        assert spec.solver_config(spec.build_problem()).sigma0 == 3.0

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ExperimentSpec("quartic", 2, p=4)
        with pytest.raises(ValueError):
            ExperimentSpec("quartic", 2, strategy="bfgs")
        with pytest.raises(ValueError):
            ExperimentSpec("quartic", 2, eps1_grid=(1e-3, 1e-2))

    def test_corpus_specs(self):
        specs = corpus_specs()
        assert len(specs) == 20
        assert {s.m for s in specs if s.strategy == "lazy"} == {1}
        assert all(s.dim <= 4 for s in corpus_specs(p=3))


class TestSweep:
    def test_needs_four_points(self):
        with pytest.raises(ValueError):
            sweep_epsilon(ExperimentSpec("quartic", 2, eps1_grid=(1e-2, 1e-3, 1e-4)))

    def test_rows_in_grid_order(self, tmp_path):
        grid = (1e-2, 1e-3, 1e-4, 1e-5)
        sw = sweep_epsilon(ExperimentSpec("quartic", 3, eps1_grid=grid, eps2=1.0), threads=3, out_dir=tmp_path)
        assert [r.eps1 for r in sw.rows] == list(grid)
        assert all(not r.flagged for r in sw.rows)
        assert [r.iterations for r in sw.rows] == sorted(r.iterations for r in sw.rows)
        assert (tmp_path / "quartic-n3-p2-lazy-m1-s0-sweep.csv").exists()


class TestThreads:
    def test_env(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "3")
        assert thread_count() == 3
        monkeypatch.setenv(THREADS_ENV, "0")
        assert thread_count() == 1

    def test_map_ordered(self):
        assert map_ordered(lambda v: v * v, list(range(20)), threads=4) == [v * v for v in range(20)]


class TestCli:
    def test_solve_and_report(self, tmp_path, capsys):
        code = main(["solve", "--problem", "quartic", "--dim", "3", "--strategy", "psb-fd", "--m", "3", "--out", str(tmp_path)])
        assert code == 0
        row = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert row["termination"] == "converged"
        trace = tmp_path / f"{row['label']}.jsonl"
        assert main(["report", "--trace", str(trace), "--min-length", "5"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["termination"] == "converged" and out["rates"] is not None

    def test_report_short_trace(self, tmp_path, capsys):
        main(["solve", "--problem", "quadratic", "--dim", "2", "--out", str(tmp_path)])
        row = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert main(["report", "--trace", str(tmp_path / f"{row['label']}.jsonl")]) == 0
        assert json.loads(capsys.readouterr().out)["rates"] is None

    def test_budget_exit_code(self, capsys):
        assert main(["solve", "--problem", "rosenbrock", "--dim", "2", "--max-iters", "3"]) == EXIT_CODES["budget"]

    def test_sweep(self, capsys):
        code = main(["sweep", "--problem", "quartic", "--dim", "2", "--eps2", "1", "--eps1-grid", "1e-2,1e-3,1e-4,1e-5"])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 5 and "iteration_exponent" in json.loads(lines[-1])

    def test_bad_grid(self, capsys):
        code = main(["sweep", "--problem", "quartic", "--dim", "2", "--eps1-grid", "1e-3,1e-2,1e-4,1e-5"])
        assert code == 1
        assert "strictly decreasing" in capsys.readouterr().err

    def test_unknown_problem(self):
        with pytest.raises(SystemExit):
            main(["solve", "--problem", "nope", "--dim", "2"])
