"""Operator algebra, SPD covariances, and the time-coupling pair F / F^{-1}."""

import numpy as np
import pytest

from varda.operators import (BlockDiagOperator, BlockDiagSpd, CovarianceModel,
                             DenseSpd, DiagonalSpd, DimensionMismatchError,
                             FunctionOperator, IdentityOperator,
                             MatrixOperator, Operator, TimeCoupling,
                             ZeroOperator, diagonal_covariance,
                             isotropic_covariance, materialize_dense)

from conftest import random_spd

RNG = np.random.default_rng(2024)


class TestOperatorAlgebra:
    def test_matrix_operator_matches_dense(self):
        A = RNG.standard_normal((5, 3))
        op = MatrixOperator(A)
        v, w = RNG.standard_normal(3), RNG.standard_normal(5)
        assert np.allclose(op.apply(v), A @ v)
        assert np.allclose(op.adjoint_apply(w), A.T @ w)

    def test_dimension_mismatch_raises(self):
        op = MatrixOperator(RNG.standard_normal((5, 3)))
        with pytest.raises(DimensionMismatchError):
            op.apply(np.zeros(4))
        with pytest.raises(DimensionMismatchError):
            op.adjoint_apply(np.zeros(3))

    def test_composition_sum_scaling(self):
        A = RNG.standard_normal((4, 3))
        B = RNG.standard_normal((3, 6))
        opA, opB = MatrixOperator(A), MatrixOperator(B)
        v = RNG.standard_normal(6)
        assert np.allclose((opA @ opB).apply(v), A @ B @ v)
        w = RNG.standard_normal(4)
        assert np.allclose((opA @ opB).adjoint_apply(w), B.T @ A.T @ w)
        C = RNG.standard_normal((4, 3))
        assert np.allclose((opA + MatrixOperator(C)).apply(v[:3]), (A + C) @ v[:3])
        assert np.allclose((opA * 2.5).apply(v[:3]), 2.5 * A @ v[:3])

    def test_adjoint_view(self):
        A = RNG.standard_normal((4, 3))
        op = MatrixOperator(A).T
        assert op.domain_dim == 4 and op.codomain_dim == 3
        w = RNG.standard_normal(4)
        assert np.allclose(op.apply(w), A.T @ w)

    def test_identity_zero(self):
        v = RNG.standard_normal(7)
        assert np.allclose(IdentityOperator(7).apply(v), v)
        assert np.allclose(ZeroOperator(7, 4).apply(v), np.zeros(4))

    def test_block_diagonal(self):
        A = RNG.standard_normal((3, 3))
        B = RNG.standard_normal((2, 2))
        op = BlockDiagOperator([MatrixOperator(A), MatrixOperator(B)])
        v = RNG.standard_normal(5)
        expected = np.concatenate([A @ v[:3], B @ v[3:]])
        assert np.allclose(op.apply(v), expected)

    def test_function_operator_adjoint_detection(self):
        op = FunctionOperator(3, 3, lambda v: 2 * v)
        assert not op.has_adjoint
        op2 = FunctionOperator(3, 3, lambda v: 2 * v, lambda w: 2 * w)
        assert op2.has_adjoint

    def test_materialize_dense_and_cap(self):
        A = RNG.standard_normal((4, 3))
        assert np.allclose(materialize_dense(MatrixOperator(A)), A)
        with pytest.raises(ValueError):
            materialize_dense(IdentityOperator(10), cap=5)


class TestSpdOperators:
    @pytest.mark.parametrize("make", [
        lambda: DiagonalSpd(RNG.uniform(0.5, 2.0, size=12)),
        lambda: DenseSpd(random_spd(12, seed=3)),
        lambda: isotropic_covariance(np.full(16, 0.7), 2.0),
        lambda: diagonal_covariance(RNG.uniform(0.2, 1.0, size=9)),
    ])
    def test_spd_contract(self, make):
        C = make()
        n = C.domain_dim
        v = np.random.default_rng(5).standard_normal(n)
        # symmetry
        assert np.allclose(C.apply(v), C.adjoint_apply(v))
        # inverse round trip
        assert np.linalg.norm(C.inverse_apply(C.apply(v)) - v) <= 1e-10 * np.linalg.norm(v)
        # factor consistency U U^T = C
        dense = materialize_dense(FunctionOperator(n, n, C.apply))
        U = materialize_dense(FunctionOperator(n, n, C.factor_apply))
        assert np.abs(U @ U.T - dense).max() <= 1e-10 * np.abs(dense).max()
        # factor inverses
        assert np.allclose(C.factor_inverse_apply(C.factor_apply(v)), v, atol=1e-8)
        assert np.allclose(C.factor_transpose_inverse_apply(
            C.factor_transpose_apply(v)), v, atol=1e-8)

    def test_isotropic_dense_factor_consistency_n64(self):
        C = isotropic_covariance(np.full(64, 1.3), 4.0)
        dense = materialize_dense(FunctionOperator(64, 64, C.apply))
        U = materialize_dense(FunctionOperator(64, 64, C.factor_apply))
        assert np.abs(U @ U.T - dense).max() <= 1e-10 * np.abs(dense).max()

    def test_isotropic_eigenvalues_strictly_positive(self):
        for n, L in [(16, 2.0), (8, 1.5), (40, 3.0)]:
            C = isotropic_covariance(np.full(n, 1.0), L)
            dense = materialize_dense(FunctionOperator(n, n, C.apply))
            assert np.linalg.eigvalsh(dense).min() > 0

    def test_covariance_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            diagonal_covariance(np.array([1.0, -0.5]))
        with pytest.raises(ValueError):
            CovarianceModel("isotropic-correlation", np.ones(8), length_scale=0.0)

    def test_block_diag_spd(self):
        B1 = DiagonalSpd(np.full(3, 2.0))
        B2 = DenseSpd(random_spd(4, seed=9))
        D = BlockDiagSpd([B1, B2])
        v = RNG.standard_normal(7)
        expected = np.concatenate([B1.apply(v[:3]), B2.apply(v[3:])])
        assert np.allclose(D.apply(v), expected)
        assert np.allclose(D.inverse_apply(D.apply(v)), v)
        # U U^T = D through the factor interface
        w = D.factor_apply(D.factor_transpose_apply(v))
        assert np.allclose(w, D.apply(v), atol=1e-10)


class TestTimeCoupling:
    def _coupling(self, n=3, N=4, seed=11):
        rng = np.random.default_rng(seed)
        mats = [rng.standard_normal((n, n)) / np.sqrt(n) for _ in range(N)]
        return TimeCoupling([MatrixOperator(m) for m in mats]), mats

    def _dense_f_inv(self, mats, n, N):
        p = (N + 1) * n
        Finv = np.eye(p)
        for i, m in enumerate(mats, start=1):
            Finv[i * n:(i + 1) * n, (i - 1) * n:i * n] = -m
        return Finv

    def test_f_inverse_matches_block_bidiagonal(self):
        tc, mats = self._coupling()
        Finv = self._dense_f_inv(mats, tc.n, tc.window_length)
        dense = materialize_dense(tc.f_inv)
        assert np.abs(dense - Finv).max() < 1e-13

    def test_f_is_inverse_of_f_inverse(self):
        tc, mats = self._coupling()
        v = np.random.default_rng(1).standard_normal(tc.p)
        assert np.allclose(tc.f_apply(tc.f_inverse_apply(v)), v, atol=1e-12)
        assert np.allclose(tc.f_inverse_apply(tc.f_apply(v)), v, atol=1e-12)

    def test_transposes_match_dense(self):
        tc, mats = self._coupling()
        Finv = self._dense_f_inv(mats, tc.n, tc.window_length)
        F = np.linalg.inv(Finv)
        v = np.random.default_rng(2).standard_normal(tc.p)
        assert np.allclose(tc.f_transpose_apply(v), F.T @ v, atol=1e-10)
        assert np.allclose(tc.f_inverse_transpose_apply(v), Finv.T @ v, atol=1e-12)

    def test_adjoint_identity(self):
        tc, _ = self._coupling()
        rng = np.random.default_rng(3)
        u, w = rng.standard_normal(tc.p), rng.standard_normal(tc.p)
        assert abs(tc.f_apply(u) @ w - u @ tc.f_transpose_apply(w)) < 1e-10

    def test_rejects_operators_without_adjoints(self):
        bad = FunctionOperator(3, 3, lambda v: v)
        with pytest.raises(ValueError):
            TimeCoupling([bad])
