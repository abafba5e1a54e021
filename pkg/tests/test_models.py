"""Dynamical models and observation operators: adjoints, Taylor tests, kernels."""

import subprocess
import sys

import numpy as np
import pytest

from varda.models import (LinearAdvection, Lorenz96, ModelDivergenceError,
                          PointSelection, QuadraticPoint, taylor_test)

RNG = np.random.default_rng(77)


def adjoint_relative_error(fwd, adj, n, m, rng, trials=50):
    worst = 0.0
    for _ in range(trials):
        u, w = rng.standard_normal(n), rng.standard_normal(m)
        lhs, rhs = float(fwd(u) @ w), float(u @ adj(w))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    return worst


class TestLorenz96:
    def test_equilibrium(self):
        model = Lorenz96(n=12, forcing=8.0, dt=0.05)
        x = np.full(12, 8.0)
        assert np.allclose(model.step(x), x, atol=1e-12)

    def test_adjoint_identity(self):
        model = Lorenz96(n=40, dt=0.05)
        x = 8.0 + RNG.standard_normal(40)
        err = adjoint_relative_error(lambda u: model.tlm_apply(x, u),
                                     lambda w: model.adjoint_apply(x, w),
                                     40, 40, RNG, trials=100)
        assert err <= 1e-12

    def test_taylor_slope(self):
        model = Lorenz96(n=16, dt=0.05)
        x = 8.0 + RNG.standard_normal(16)
        slope, _ = taylor_test(model.step, model.tlm_apply, x,
                               RNG.standard_normal(16))
        assert abs(slope - 2.0) <= 0.1

    def test_taylor_detects_mutated_tlm(self):
        model = Lorenz96(n=16, dt=0.05)
        x = 8.0 + RNG.standard_normal(16)
        slope, _ = taylor_test(model.step,
                               lambda xr, d: 1.01 * model.tlm_apply(xr, d),
                               x, RNG.standard_normal(16))
        assert abs(slope - 1.0) <= 0.2
        assert abs(slope - 2.0) > 0.1

    def test_substeps_compose(self):
        m1 = Lorenz96(n=8, dt=0.01, substeps=1)
        m3 = Lorenz96(n=8, dt=0.01, substeps=3)
        x = 8.0 + RNG.standard_normal(8)
        y = x.copy()
        for _ in range(3):
            y = m1.step(y)
        assert np.allclose(m3.step(x), y, atol=1e-13)

    def test_divergence_raises(self):
        model = Lorenz96(n=8, dt=10.0)
        with pytest.raises(ModelDivergenceError), np.errstate(all="ignore"):
            x = 1e160 * (1.0 + np.arange(8.0))
            for _ in range(5):
                x = model.step(x)

    def test_rejects_tiny_ring(self):
        with pytest.raises(ValueError):
            Lorenz96(n=3)


class TestKernelBackends:
    def test_numpy_and_jit_paths_agree(self):
        from varda._l96_kernels import BACKENDS
        x = 8.0 + RNG.standard_normal(24)
        d = RNG.standard_normal(24)
        results = {}
        for name, (step, tlm, adjoint) in BACKENDS.items():
            results[name] = (step(x, 0.05, 8.0, 2), tlm(x, d, 0.05, 8.0, 2),
                             adjoint(x, d, 0.05, 8.0, 2))
        names = list(results)
        if len(names) < 2:
            pytest.skip("only one backend available")
        for a, b in zip(results[names[0]], results[names[1]]):
            assert np.allclose(a, b, atol=1e-13)

    def test_env_flag_selects_numpy_path(self):
        code = ("import os; os.environ['VARDA_DISABLE_NUMBA']='1'; "
                "import varda._accel as a; print(a.NUMBA_ENABLED)")
        out = subprocess.run([sys.executable, "-c", code],
                             capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "False"


class TestLinearAdvection:
    def test_step_is_shift(self):
        model = LinearAdvection(6)
        x = np.arange(6.0)
        assert np.allclose(model.step(x), np.roll(x, 1))

    def test_tlm_equals_step_and_adjoint_consistent(self):
        model = LinearAdvection(6)
        x = RNG.standard_normal(6)
        d = RNG.standard_normal(6)
        assert np.allclose(model.tlm_apply(x, d), model.step(d))
        err = adjoint_relative_error(lambda u: model.tlm_apply(x, u),
                                     lambda w: model.adjoint_apply(x, w),
                                     6, 6, RNG)
        assert err <= 1e-14


class TestObservationOperators:
    def test_point_selection_roundtrip(self):
        op = PointSelection(np.array([0, 3, 5]), 8)
        x = RNG.standard_normal(8)
        assert np.allclose(op.observe(x), x[[0, 3, 5]])
        err = adjoint_relative_error(lambda u: op.jacobian_apply(x, u),
                                     lambda w: op.adjoint_apply(x, w),
                                     8, 3, RNG, trials=100)
        assert err <= 1e-12

    def test_quadratic_point(self):
        op = QuadraticPoint(np.array([1, 4]), 6)
        x = RNG.standard_normal(6)
        assert np.allclose(op.observe(x), x[[1, 4]] ** 2)
        err = adjoint_relative_error(lambda u: op.jacobian_apply(x, u),
                                     lambda w: op.adjoint_apply(x, w),
                                     6, 2, RNG, trials=100)
        assert err <= 1e-12
        slope, _ = taylor_test(op.observe, op.jacobian_apply, x,
                               RNG.standard_normal(6))
        assert abs(slope - 2.0) <= 0.1

    def test_index_range_rejected(self):
        with pytest.raises(ValueError):
            PointSelection(np.array([0, 9]), 8)
        with pytest.raises(ValueError):
            PointSelection(np.array([-1]), 8)
