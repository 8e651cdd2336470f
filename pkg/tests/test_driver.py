import json

import numpy as np
import pytest

from adareg.driver import (
    SCHEMA,
    RunAborted,
    RunTrace,
    SolverConfig,
    SolverState,
    run,
    second_order_measure,
    sigma_recurrence_error,
    step,
)
from adareg.problems import CountingProblem, Problem, Quadratic, Rosenbrock, SeparableQuartic, Trigonometric
from adareg.subsolver import SubsolverConfig
from adareg.tensor_update import StrategyConfig


def config(kind="lazy", m=1, p=2, **kw):
    return SolverConfig(p=p, strategy=StrategyConfig(kind=kind, m=m), **kw)


class PoisonedValue(SeparableQuartic):
    """Objective values are garbage; derivatives are untouched."""

    def value(self, x):
        return float("nan")


class Linear(Problem):
    name = "linear"

    def __init__(self, g):
        super().__init__(len(g))
        self.g = np.asarray(g, dtype=float)

    def value(self, x):
        return float(self.g @ x)

    def _derivative(self, x, order):
        return self.g.copy() if order == 1 else np.zeros((self.dim,) * order)


class TestSigmaUpdate:
    def test_unit_step_doubles(self):
        # g = -1/2, B = 0, sigma = 1: the model g s + |s|^3 / 6 is minimized at s = 1
        cfg = config(eps1=-1.0, eps2=-1.0, sigma0=1.0)
        new, rec = step(Linear([-0.5]), SolverState.initial(np.zeros(1), cfg), cfg)
        assert rec["step_norm"] == pytest.approx(1.0, abs=1e-14)
        assert new.sigma == pytest.approx(2.0, abs=1e-13)
        assert new.sigma == 1.0 + rec["step_norm"] ** 3
        assert new.history == (rec["step_norm"],)

    def test_zero_step_keeps_sigma(self):
        f = Quadratic(1, A=np.array([[1.0]]), b=np.array([0.0]))
        cfg = config(eps1=-1.0, eps2=-1.0)
        new, rec = step(f, SolverState.initial(np.zeros(1), cfg), cfg)
        assert rec["step_norm"] == 0.0 and new.sigma == rec["sigma"]

    def test_sigma_nondecreasing_and_exact(self):
        tr = run(Rosenbrock(2), np.array([-1.2, 1.0]), config(sigma0=100.0, max_iters=200))
        sig = tr.column("sigma")
        assert all(b >= a for a, b in zip(sig, sig[1:]))
        assert sigma_recurrence_error(tr, 2) <= 1e-14
        for a, b in zip(tr.records, tr.records[1:]):
            assert b["sigma"] == a["sigma_next"]


class TestSecondOrderMeasure:
    def test_examples(self):
        assert second_order_measure(2, np.eye(2), [np.zeros(2)]) == (0.0, None)
        assert second_order_measure(2, np.diag([-2.0, 1.0]), [np.zeros(2)])[0] == pytest.approx(2.0)

    def test_p3_uses_exact_hessian(self):
        H = np.diag([-0.5, 3.0])
        chi, beta = second_order_measure(3, np.zeros((2, 2, 2)), [np.zeros(2), H], H)
        assert chi == beta == pytest.approx(0.5)

    def test_p3_trace_chi_equals_beta(self):
        tr = run(SeparableQuartic(3), np.array([0.1, -0.2, 0.05]), config(p=3, eps1=1e-4, eps2=1e-3))
        assert tr.column("chi") == tr.column("beta")


class TestRun:
    def test_starts_at_minimizer(self):
        f = Quadratic(4, seed=1)
        tr = run(f, f.minimizer(), config())
        assert tr.termination == "converged" and tr.iterations == 0
        assert len(tr.records) == 1 and tr.records[0]["terminal"]

    def test_zero_budget(self):
        tr = run(SeparableQuartic(2), np.ones(2), config(max_iters=0))
        assert tr.termination == "budget" and tr.records == []

    def test_rosenbrock_lazy(self):
        tr = run(Rosenbrock(2), np.array([-1.2, 1.0]), config(sigma0=100.0, max_iters=5000))
        assert tr.termination == "converged"
        last = tr.records[-1]
        assert last["grad_norm"] <= 1e-5 and last["chi"] <= 1e-4

    def test_rosenbrock_psb_fd(self):
        tr = run(Rosenbrock(2), np.array([-1.2, 1.0]), config("psb-fd", 5, sigma0=100.0, max_iters=5000))
        assert tr.termination == "converged"

    def test_restart_cadence_and_certificates(self):
        for kind, m in [("lazy", 3), ("psb-fd", 4), ("dfp-fd", 5)]:
            tr = run(Trigonometric(4), np.full(4, 1.0), config(kind, m, max_iters=60))
            for r in tr.records:
                assert r["restart"] == (r["k"] % m == 0)
                if not r["terminal"]:
                    assert r["decrease_ok"] and r["theta1_ok"] and r["theta2_ok"]

    def test_xi_matches_step_column(self):
        m, p = 3, 2
        tr = run(SeparableQuartic(3), np.array([1.5, -0.3, 0.4]), config("psb-lazy", m, max_iters=40))
        steps = [r["step_norm"] for r in tr.records if not r["terminal"]]
        for r in tr.records:
            k = r["k"]
            buf = [steps[k - i] if k - i >= 0 else 1.0 for i in range(1, 2 * m)]
            assert r["xi"] == pytest.approx(sum(v ** (p + 1) for v in buf), rel=1e-14)

    def test_unconditional_acceptance(self):
        tr = run(SeparableQuartic(3), np.array([1.5, -0.3, 0.4]), config(max_iters=30))
        for a, b in zip(tr.records, tr.records[1:]):
            assert np.linalg.norm(np.subtract(b["x"], a["x"])) == pytest.approx(a["step_norm"], rel=1e-12, abs=1e-15)

    def test_objective_values_do_not_steer(self):
        x0 = np.array([1.5, -0.3, 0.4])
        for kind, m in [("lazy", 1), ("psb-fd", 3), ("dfp-fd", 3)]:
            cfg = config(kind, m, max_iters=100)
            a = run(SeparableQuartic(3), x0, cfg)
            b = run(PoisonedValue(3), x0, cfg)
            strip = lambda tr: [{k: v for k, v in r.items() if k not in ("f", "wall_time")} for r in tr.records]
            assert strip(a) == strip(b)
            assert all(np.isnan(r["f"]) for r in b.records)

    def test_wrapper_never_sees_value_calls(self):
        f = CountingProblem(SeparableQuartic(3))
        run(f, np.array([1.5, -0.3, 0.4]), config("psb-fd", 3, max_iters=50))
        assert 0 not in f.calls

    def test_diverged_raises_with_trace(self):
        class Blowup(SeparableQuartic):
            def _derivative(self, x, order):
                if np.abs(x).max() > 0.5:
                    return np.full((self.dim,) * order, np.nan)
                return super()._derivative(x, order)

        with pytest.raises(RunAborted) as info:
            run(Blowup(2), np.array([0.1, 0.1]), config(max_iters=50))
        assert info.value.reason == "diverged"
        assert len(info.value.trace.records) >= 1
        tr = run(Blowup(2), np.array([0.1, 0.1]), config(max_iters=50), raise_on_error=False)
        assert tr.termination == "diverged"

    def test_subsolver_budget(self):
        cfg = config(
            p=3, max_iters=20, theta1=1.0 + 1e-12, theta2=1.0 + 1e-12,
            subsolver=SubsolverConfig(inner_budget=1),
        )
        tr = run(SeparableQuartic(3), np.array([1.5, -0.3, 0.4]), cfg, raise_on_error=False)
        assert tr.termination == "subsolver"

    def test_x0_shape(self):
        with pytest.raises(ValueError):
            run(SeparableQuartic(3), np.zeros(2), config())


class TestOracleLedger:
    def test_lazy_order_p_calls(self):
        f = CountingProblem(SeparableQuartic(4))
        tr = run(f, np.array([1.5, -0.3, 0.4, 0.9]), config())
        assert tr.termination == "converged"
        assert f.calls[2] == tr.iterations + 1
        assert tr.oracle_calls() == {k: v for k, v in f.calls.items() if k > 0}

    def test_fd_hand_count(self):
        n, m = 3, 5
        f = CountingProblem(SeparableQuartic(n))
        tr = run(f, np.array([1.5, -0.3, 0.4]), config("fd", m, eps1=1e-300, eps2=-1.0, max_iters=10))
        assert tr.iterations == 10
        # one gradient per iteration plus n + 1 at the restarts k = 0 and k = 5
        assert f.calls == {1: 10 + 2 * (n + 1)}
        assert tr.oracle_calls() == f.calls


class TestTracePersistence:
    def test_roundtrip(self, tmp_path):
        tr = run(SeparableQuartic(2), np.array([1.5, -0.3]), config("psb-fd", 2))
        path = tmp_path / "t.jsonl"
        tr.to_jsonl(path)
        back = RunTrace.from_jsonl(path)
        assert back.termination == tr.termination
        assert back.iterations == tr.iterations
        assert back.column("grad_norm") == tr.column("grad_norm")
        assert back.oracle_calls() == tr.oracle_calls()
        first = json.loads(path.read_text().splitlines()[0])
        assert first["schema"] == SCHEMA and first["type"] == "header"

    def test_byte_identical(self, tmp_path):
        paths = []
        for i in range(2):
            tr = run(Trigonometric(3), np.array([1.0, 2.0, -0.5]), config("dfp-fd", 3, max_iters=50))
            paths.append(tmp_path / f"{i}.jsonl")
            tr.to_jsonl(paths[-1])
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_rejects_foreign_schema(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"type": "header", "schema": "other/9"}) + "\n")
        with pytest.raises(ValueError):
            RunTrace.from_jsonl(path)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(p=1)
    with pytest.raises(ValueError):
        SolverConfig(sigma0=0.0)
    with pytest.raises(ValueError):
        SolverConfig(theta1=1.0)
    with pytest.raises(ValueError):
        SolverConfig(max_iters=-1)
