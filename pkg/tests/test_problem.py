"""Cost/gradient consistency and the primal/dual/augmented assemblies."""

import numpy as np
import pytest

from varda.operators import materialize_dense
from varda.problem import (Observation, assemble_augmented, assemble_dual,
                           assemble_normal, cost, gradient, linearize)

from conftest import make_setup, make_subproblem


def dense_solution(system):
    A = materialize_dense(system.operator)
    return system.recover(np.linalg.solve(A, system.rhs))


class TestCostAndGradient:
    @pytest.mark.parametrize("formulation", ["strong", "weak"])
    def test_quadratic_cost_at_zero_matches_nonlinear(self, formulation):
        sub, setup = make_subproblem(formulation, n=8, N=3, seed=4)
        x = setup.x_b if formulation == "strong" else setup.propagate(setup.x_b).ravel()
        dim = sub.n if formulation == "strong" else sub.p
        q0 = sub.quadratic_cost(np.zeros(dim))
        assert abs(q0 - cost(setup, x)) <= 1e-10 * max(1.0, abs(q0))

    @pytest.mark.parametrize("formulation", ["strong", "weak"])
    def test_quadratic_gradient_at_zero_matches_nonlinear(self, formulation):
        sub, setup = make_subproblem(formulation, n=8, N=3, seed=4)
        x = setup.x_b if formulation == "strong" else setup.propagate(setup.x_b).ravel()
        dim = sub.n if formulation == "strong" else sub.p
        g_outer = gradient(setup, x)
        g_inner = sub.quadratic_gradient(np.zeros(dim))
        assert np.linalg.norm(g_inner - g_outer) <= 1e-10 * np.linalg.norm(g_outer)

    @pytest.mark.parametrize("formulation", ["strong", "weak"])
    def test_gradient_matches_central_differences(self, formulation):
        setup = make_setup(formulation, n=8, N=3, seed=10)
        rng = np.random.default_rng(0)
        x = (setup.x_b + 0.1 * rng.standard_normal(8) if formulation == "strong"
             else setup.propagate(setup.x_b).ravel() + 0.1 * rng.standard_normal(32))
        g = gradient(setup, x)
        d = rng.standard_normal(x.size)
        d /= np.linalg.norm(d)
        eps = 1e-5
        fd = (cost(setup, x + eps * d) - cost(setup, x - eps * d)) / (2 * eps)
        assert abs(fd - g @ d) / max(abs(fd), 1e-300) <= 1e-6

    def test_gradient_zero_at_linear_gaussian_minimizer(self):
        # linear model: the quadratic subproblem IS the full problem
        from varda.models import LinearAdvection
        setup = make_setup("strong", n=6, N=2, m_per=3, seed=5,
                           model=LinearAdvection(6))
        sub = linearize(setup, setup.x_b)
        system = assemble_normal(sub, "strong-primal")
        s = dense_solution(system)
        g = gradient(setup, setup.x_b + s)
        assert np.linalg.norm(g) <= 1e-8 * max(1.0, np.linalg.norm(gradient(setup, setup.x_b)))


class TestInnerSubproblem:
    def test_innovations_and_model_error_definitions(self):
        sub, setup = make_subproblem("weak", n=8, N=3, seed=4)
        traj = sub.trajectory
        d_expected = []
        for i, obs in enumerate(setup.observations):
            if obs.m:
                d_expected.append(obs.y - obs.obsop.observe(traj[i]))
        assert np.allclose(sub.d, np.concatenate(d_expected))
        c_blocks = sub.f.reshape(setup.N + 1, setup.n)
        assert np.allclose(c_blocks[0], setup.x_b - traj[0])
        for i in range(1, setup.N + 1):
            assert np.allclose(c_blocks[i],
                               setup.model.step(traj[i - 1]) - traj[i], atol=1e-12)

    def test_j_adjoint_identity(self):
        sub, _ = make_subproblem("weak", n=8, N=3, seed=4)
        rng = np.random.default_rng(8)
        J = sub.j_operator
        u = rng.standard_normal(J.domain_dim)
        w = rng.standard_normal(J.codomain_dim)
        lhs, rhs = J.apply(u) @ w, u @ J.adjoint_apply(w)
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), abs(rhs))


class TestAssemblies:
    def test_weak_state_and_forcing_related_by_f(self):
        sub, _ = make_subproblem("weak", n=6, N=3, seed=2)
        s = dense_solution(assemble_normal(sub, "weak-state"))
        s_from_v = dense_solution(assemble_normal(sub, "weak-forcing"))
        assert np.linalg.norm(s_from_v - s) <= 1e-10 * np.linalg.norm(s)

    def test_dual_recovers_primal_solution(self):
        for formulation in ("strong", "weak"):
            sub, _ = make_subproblem(formulation, n=6, N=3, seed=3)
            form = "strong-primal" if formulation == "strong" else "weak-state"
            s = dense_solution(assemble_normal(sub, form))
            s_dual = dense_solution(assemble_dual(sub))
            assert np.linalg.norm(s_dual - s) <= 1e-9 * np.linalg.norm(s)

    def test_psas_matches_dual(self):
        sub, _ = make_subproblem("weak", n=6, N=3, seed=3)
        s_dual = dense_solution(assemble_dual(sub))
        s_psas = dense_solution(assemble_dual(sub, psas=True))
        assert np.linalg.norm(s_psas - s_dual) <= 1e-9 * np.linalg.norm(s_dual)

    def test_dual_spectrum_bounded_below_by_one(self):
        sub, _ = make_subproblem("weak", n=6, N=3, seed=3)
        A = materialize_dense(assemble_dual(sub, psas=True).operator)
        assert np.linalg.eigvalsh(0.5 * (A + A.T)).min() >= 1.0 - 1e-10

    def test_augmented_recovers_primal_solution(self):
        sub, _ = make_subproblem("weak", n=6, N=3, seed=3)
        s = dense_solution(assemble_normal(sub, "weak-state"))
        s_aug = dense_solution(assemble_augmented(sub))
        assert np.linalg.norm(s_aug - s) <= 1e-9 * np.linalg.norm(s)

    def test_augmented_is_symmetric(self):
        # diagonal covariances and an exactly-transposed model adjoint make
        # every block apply elementwise-exact, so K equals its transpose
        from varda.models import LinearAdvection
        sub, _ = make_subproblem("weak", n=5, N=2, seed=6, correlated=False,
                                 model=LinearAdvection(5))
        K = materialize_dense(assemble_augmented(sub).operator)
        assert np.abs(K - K.T).max() == 0.0

    def test_augmented_is_symmetric_to_rounding(self):
        # with the Lorenz-96 TLM/adjoint pair, symmetry holds to one ulp
        sub, _ = make_subproblem("weak", n=5, N=2, seed=6)
        K = materialize_dense(assemble_augmented(sub).operator)
        assert np.abs(K - K.T).max() <= 1e-14 * np.abs(K).max()

    def test_schur_elimination_reproduces_weak_state(self):
        sub, _ = make_subproblem("weak", n=5, N=2, seed=6)
        K = materialize_dense(assemble_augmented(sub).operator)
        m, p = sub.m, sub.p
        W = K[:m + p, :m + p]
        C = K[:m + p, m + p:]
        AW = materialize_dense(assemble_normal(sub, "weak-state").operator)
        schur = C.T @ np.linalg.solve(W, C)
        assert np.abs(schur - AW).max() <= 1e-10 * np.abs(AW).max()
        rhs_aug = assemble_augmented(sub).rhs
        bW = C.T @ np.linalg.solve(W, rhs_aug[:m + p])
        assert np.linalg.norm(bW - assemble_normal(sub, "weak-state").rhs) \
            <= 1e-10 * np.linalg.norm(bW)

    def test_no_observations_weak_state_solution_is_ff(self):
        sub, _ = make_subproblem("weak", n=6, N=3, seed=9, obs_times=[])
        s = dense_solution(assemble_normal(sub, "weak-state"))
        expected = sub.coupling.f_apply(sub.f)
        assert np.linalg.norm(s - expected) <= 1e-10 * np.linalg.norm(expected)

    def test_dual_requires_observations(self):
        sub, _ = make_subproblem("weak", n=6, N=3, seed=9, obs_times=[])
        with pytest.raises(ValueError):
            assemble_dual(sub)

    def test_empty_window_handling(self):
        # observations only at times 1 and 3
        sub, _ = make_subproblem("weak", n=6, N=3, seed=12, obs_times=[1, 3])
        s = dense_solution(assemble_normal(sub, "weak-state"))
        s_aug = dense_solution(assemble_augmented(sub))
        assert np.linalg.norm(s_aug - s) <= 1e-9 * np.linalg.norm(s)
