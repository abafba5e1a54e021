"""Matrix-free linear operator abstraction.

Everything the toolkit touches -- covariances, model Jacobians, Hessians,
preconditioners -- is an :class:`Operator`: a vector->vector map with known
dimensions and an optional adjoint.  Dense matrices appear only at desk
scale, as test oracles or small covariance factorizations.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

__all__ = [
    "Operator",
    "DimensionMismatchError",
    "IdentityOperator",
    "ZeroOperator",
    "MatrixOperator",
    "FunctionOperator",
    "ScaledOperator",
    "SumOperator",
    "ComposedOperator",
    "BlockDiagOperator",
    "AdjointOperator",
    "SpdOperator",
    "DiagonalSpd",
    "DenseSpd",
    "CovarianceModel",
    "diagonal_covariance",
    "isotropic_covariance",
    "BlockDiagSpd",
    "TimeCoupling",
    "materialize_dense",
]

DENSE_ORACLE_CAP = 2000


class DimensionMismatchError(ValueError):
    """Operator applied to a vector of the wrong length."""


class Operator:
    """Linear map from R^domain_dim to R^codomain_dim, accessed via apply().

    Subclasses implement ``_apply`` and, when an adjoint is available,
    ``_adjoint_apply``.  Operators are immutable after construction and
    safe to share across threads.
    """

    def __init__(self, domain_dim: int, codomain_dim: int):
        if domain_dim <= 0 or codomain_dim <= 0:
            raise ValueError(f"operator dims must be positive, got {domain_dim}x{codomain_dim}")
        self.domain_dim = int(domain_dim)
        self.codomain_dim = int(codomain_dim)

    @property
    def has_adjoint(self) -> bool:
        return type(self)._adjoint_apply is not Operator._adjoint_apply

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.domain_dim,):
            raise DimensionMismatchError(
                f"{type(self).__name__}.apply: expected vector of length "
                f"{self.domain_dim}, got shape {v.shape}"
            )
        return self._apply(v)

    def adjoint_apply(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (self.codomain_dim,):
            raise DimensionMismatchError(
                f"{type(self).__name__}.adjoint_apply: expected vector of length "
                f"{self.codomain_dim}, got shape {w.shape}"
            )
        return self._adjoint_apply(w)

    def _apply(self, v):
        raise NotImplementedError

    def _adjoint_apply(self, w):
        raise NotImplementedError(f"{type(self).__name__} exposes no adjoint")

    # small algebra: enough for compositions used by the assembly module
    def __matmul__(self, other: "Operator") -> "ComposedOperator":
        return ComposedOperator(self, other)

    def __add__(self, other: "Operator") -> "SumOperator":
        return SumOperator(self, other)

    def __mul__(self, scalar: float) -> "ScaledOperator":
        return ScaledOperator(self, scalar)

    __rmul__ = __mul__

    @property
    def T(self) -> "AdjointOperator":
        return AdjointOperator(self)


class IdentityOperator(Operator):
    def __init__(self, n: int):
        super().__init__(n, n)

    def _apply(self, v):
        return v.copy()

    def _adjoint_apply(self, w):
        return w.copy()


class ZeroOperator(Operator):
    def __init__(self, domain_dim: int, codomain_dim: int | None = None):
        super().__init__(domain_dim, codomain_dim if codomain_dim is not None else domain_dim)

    def _apply(self, v):
        return np.zeros(self.codomain_dim)

    def _adjoint_apply(self, w):
        return np.zeros(self.domain_dim)


class MatrixOperator(Operator):
    """Dense matrix wrapped as an operator (desk-scale / oracle use)."""

    def __init__(self, matrix):
        self.matrix = np.array(matrix, dtype=float)
        if self.matrix.ndim != 2:
            raise ValueError("MatrixOperator needs a 2-D array")
        super().__init__(self.matrix.shape[1], self.matrix.shape[0])

    def _apply(self, v):
        return self.matrix @ v

    def _adjoint_apply(self, w):
        return self.matrix.T @ w


class FunctionOperator(Operator):
    """Operator from plain callables; adjoint callable is optional."""

    def __init__(self, domain_dim, codomain_dim, fwd, adj=None):
        super().__init__(domain_dim, codomain_dim)
        self._fwd = fwd
        self._adj = adj

    @property
    def has_adjoint(self) -> bool:
        return self._adj is not None

    def _apply(self, v):
        return np.asarray(self._fwd(v), dtype=float)

    def _adjoint_apply(self, w):
        if self._adj is None:
            raise NotImplementedError("FunctionOperator built without adjoint")
        return np.asarray(self._adj(w), dtype=float)


class ScaledOperator(Operator):
    def __init__(self, op: Operator, scalar: float):
        super().__init__(op.domain_dim, op.codomain_dim)
        self.op = op
        self.scalar = float(scalar)

    @property
    def has_adjoint(self):
        return self.op.has_adjoint

    def _apply(self, v):
        return self.scalar * self.op.apply(v)

    def _adjoint_apply(self, w):
        return self.scalar * self.op.adjoint_apply(w)


class SumOperator(Operator):
    def __init__(self, *ops: Operator):
        if not ops:
            raise ValueError("SumOperator needs at least one term")
        d, c = ops[0].domain_dim, ops[0].codomain_dim
        for op in ops:
            if (op.domain_dim, op.codomain_dim) != (d, c):
                raise DimensionMismatchError(
                    f"SumOperator terms disagree: {op.domain_dim}x{op.codomain_dim} vs {d}x{c}"
                )
        super().__init__(d, c)
        self.ops = ops

    @property
    def has_adjoint(self):
        return all(op.has_adjoint for op in self.ops)

    def _apply(self, v):
        out = self.ops[0].apply(v)
        for op in self.ops[1:]:
            out = out + op.apply(v)
        return out

    def _adjoint_apply(self, w):
        out = self.ops[0].adjoint_apply(w)
        for op in self.ops[1:]:
            out = out + op.adjoint_apply(w)
        return out


class ComposedOperator(Operator):
    """first-applied-last convention: (A o B) v = A(B v)."""

    def __init__(self, outer: Operator, inner: Operator):
        if outer.domain_dim != inner.codomain_dim:
            raise DimensionMismatchError(
                f"cannot compose {outer.codomain_dim}x{outer.domain_dim} "
                f"with {inner.codomain_dim}x{inner.domain_dim}"
            )
        super().__init__(inner.domain_dim, outer.codomain_dim)
        self.outer = outer
        self.inner = inner

    @property
    def has_adjoint(self):
        return self.outer.has_adjoint and self.inner.has_adjoint

    def _apply(self, v):
        return self.outer.apply(self.inner.apply(v))

    def _adjoint_apply(self, w):
        return self.inner.adjoint_apply(self.outer.adjoint_apply(w))


class BlockDiagOperator(Operator):
    """Block diagonal stacking; blocks may be rectangular."""

    def __init__(self, blocks):
        self.blocks = list(blocks)
        if not self.blocks:
            raise ValueError("BlockDiagOperator needs at least one block")
        super().__init__(
            sum(b.domain_dim for b in self.blocks),
            sum(b.codomain_dim for b in self.blocks),
        )
        self._din = np.cumsum([0] + [b.domain_dim for b in self.blocks])
        self._dout = np.cumsum([0] + [b.codomain_dim for b in self.blocks])

    @property
    def has_adjoint(self):
        return all(b.has_adjoint for b in self.blocks)

    def _apply(self, v):
        out = np.empty(self.codomain_dim)
        for i, b in enumerate(self.blocks):
            out[self._dout[i]:self._dout[i + 1]] = b.apply(v[self._din[i]:self._din[i + 1]])
        return out

    def _adjoint_apply(self, w):
        out = np.empty(self.domain_dim)
        for i, b in enumerate(self.blocks):
            out[self._din[i]:self._din[i + 1]] = b.adjoint_apply(w[self._dout[i]:self._dout[i + 1]])
        return out


class AdjointOperator(Operator):
    def __init__(self, op: Operator):
        if not op.has_adjoint:
            raise ValueError(f"{type(op).__name__} has no adjoint to transpose")
        super().__init__(op.codomain_dim, op.domain_dim)
        self.op = op

    @property
    def has_adjoint(self):
        return True

    def _apply(self, v):
        return self.op.adjoint_apply(v)

    def _adjoint_apply(self, w):
        return self.op.apply(w)


# ---------------------------------------------------------------------------
# SPD operators: covariances and weights


class SpdOperator(Operator):
    """Symmetric positive definite operator with inverse and factor actions.

    The factor U satisfies A = U U^T.  Here U is always the symmetric
    square root, so U = U^T; the explicit factor_transpose_apply is kept so
    callers never rely on that implementation detail.
    """

    def __init__(self, n: int):
        super().__init__(n, n)

    def _adjoint_apply(self, w):
        return self._apply(w)

    def inverse_apply(self, v):
        raise NotImplementedError

    def factor_apply(self, v):
        """U v with A = U U^T."""
        raise NotImplementedError

    def factor_transpose_apply(self, v):
        """U^T v."""
        raise NotImplementedError

    def factor_inverse_apply(self, v):
        """U^{-1} v (used for A^{-1/2} actions, e.g. the PSAS transform)."""
        raise NotImplementedError

    def factor_transpose_inverse_apply(self, v):
        """U^{-T} v."""
        raise NotImplementedError


class DiagonalSpd(SpdOperator):
    """diag(sigma^2) with factor diag(sigma)."""

    def __init__(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma <= 0):
            raise ValueError("standard deviations must be strictly positive")
        super().__init__(sigma.size)
        self.sigma = sigma
        self.variance = sigma ** 2

    def _apply(self, v):
        return self.variance * v

    def inverse_apply(self, v):
        return np.asarray(v, dtype=float) / self.variance

    def factor_apply(self, v):
        return self.sigma * np.asarray(v, dtype=float)

    factor_transpose_apply = factor_apply

    def factor_inverse_apply(self, v):
        return np.asarray(v, dtype=float) / self.sigma

    factor_transpose_inverse_apply = factor_inverse_apply


class DenseSpd(SpdOperator):
    """Dense SPD matrix with symmetric eigendecomposition square root.

    Construction cost is O(n^3); intended for n <= DENSE_ORACLE_CAP.
    """

    def __init__(self, matrix, eig_floor_rel: float = 0.0):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape[0] != matrix.shape[1]:
            raise ValueError("DenseSpd needs a square matrix")
        if matrix.shape[0] > DENSE_ORACLE_CAP:
            raise ValueError(
                f"DenseSpd limited to n <= {DENSE_ORACLE_CAP}, got n = {matrix.shape[0]}"
            )
        sym = 0.5 * (matrix + matrix.T)
        vals, vecs = np.linalg.eigh(sym)
        if eig_floor_rel > 0.0:
            vals = np.maximum(vals, eig_floor_rel * vals.max())
        if np.any(vals <= 0):
            raise ValueError(
                f"matrix is not positive definite (min eigenvalue {vals.min():.3e})"
            )
        super().__init__(matrix.shape[0])
        self._vals = vals
        self._vecs = vecs
        self._sqrt_vals = np.sqrt(vals)

    @property
    def dense(self):
        return (self._vecs * self._vals) @ self._vecs.T

    def _apply(self, v):
        return self._vecs @ (self._vals * (self._vecs.T @ v))

    def inverse_apply(self, v):
        v = np.asarray(v, dtype=float)
        return self._vecs @ ((self._vecs.T @ v) / self._vals)

    def factor_apply(self, v):
        v = np.asarray(v, dtype=float)
        return self._vecs @ (self._sqrt_vals * (self._vecs.T @ v))

    factor_transpose_apply = factor_apply

    def factor_inverse_apply(self, v):
        v = np.asarray(v, dtype=float)
        return self._vecs @ ((self._vecs.T @ v) / self._sqrt_vals)

    factor_transpose_inverse_apply = factor_inverse_apply


class BlockDiagSpd(SpdOperator):
    """Block diagonal of SpdOperators; itself an SpdOperator.

    Realizes the stacked weights W = blockdiag(R, D) and D = blockdiag(B, Q_i).
    """

    def __init__(self, blocks):
        self.blocks = list(blocks)
        if not self.blocks:
            raise ValueError("BlockDiagSpd needs at least one block")
        super().__init__(sum(b.domain_dim for b in self.blocks))
        self._off = np.cumsum([0] + [b.domain_dim for b in self.blocks])

    def _map(self, v, method):
        v = np.asarray(v, dtype=float)
        out = np.empty(self.domain_dim)
        for i, b in enumerate(self.blocks):
            out[self._off[i]:self._off[i + 1]] = getattr(b, method)(v[self._off[i]:self._off[i + 1]])
        return out

    def _apply(self, v):
        return self._map(v, "apply")

    def inverse_apply(self, v):
        return self._map(v, "inverse_apply")

    def factor_apply(self, v):
        return self._map(v, "factor_apply")

    def factor_transpose_apply(self, v):
        return self._map(v, "factor_transpose_apply")

    def factor_inverse_apply(self, v):
        return self._map(v, "factor_inverse_apply")

    def factor_transpose_inverse_apply(self, v):
        return self._map(v, "factor_transpose_inverse_apply")


class CovarianceModel(SpdOperator):
    """Covariance operator: diagonal or isotropic-correlation variant.

    The isotropic variant uses a Gaussian correlation kernel
    exp(-d^2 / 2L^2) on a periodic 1-D grid, scaled by the per-component
    standard deviations, symmetrized and eigenvalue-floored to stay SPD.
    """

    # Floor keeps the operator SPD and its condition number near 1e5, so
    # inverse round trips stay within the 1e-10 tolerances used throughout.
    EIG_FLOOR_REL = 1e-5

    def __init__(self, variant: str, sigma, length_scale: float | None = None):
        sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
        if np.any(sigma <= 0):
            raise ValueError("standard deviations must be strictly positive")
        n = sigma.size
        super().__init__(n)
        self.variant = variant
        self.sigma = sigma
        self.length_scale = length_scale
        if variant == "diagonal":
            self._impl: SpdOperator = DiagonalSpd(sigma)
        elif variant == "isotropic-correlation":
            if length_scale is None or length_scale <= 0:
                raise ValueError("isotropic-correlation variant needs length_scale > 0")
            idx = np.arange(n)
            dist = np.abs(idx[:, None] - idx[None, :])
            dist = np.minimum(dist, n - dist)  # periodic grid distance
            corr = np.exp(-(dist.astype(float) ** 2) / (2.0 * length_scale ** 2))
            cov = corr * np.outer(sigma, sigma)
            self._impl = DenseSpd(cov, eig_floor_rel=self.EIG_FLOOR_REL)
        else:
            raise ValueError(f"unknown covariance variant {variant!r}")

    def _apply(self, v):
        return self._impl.apply(v)

    def inverse_apply(self, v):
        return self._impl.inverse_apply(v)

    def factor_apply(self, v):
        return self._impl.factor_apply(v)

    def factor_transpose_apply(self, v):
        return self._impl.factor_transpose_apply(v)

    def factor_inverse_apply(self, v):
        return self._impl.factor_inverse_apply(v)

    def factor_transpose_inverse_apply(self, v):
        return self._impl.factor_transpose_inverse_apply(v)


def diagonal_covariance(sigma) -> CovarianceModel:
    return CovarianceModel("diagonal", sigma)


def isotropic_covariance(sigma, length_scale: float) -> CovarianceModel:
    return CovarianceModel("isotropic-correlation", sigma, length_scale)


# ---------------------------------------------------------------------------
# Time coupling: the lower block bidiagonal/triangular pair F^{-1} / F


class TimeCoupling:
    """Time-coupled operators built from per-step tangent-linear maps M_i.

    Vectors are stacked time-major: block i occupies indices i*n..(i+1)*n,
    i = 0..N.  f_inverse_apply is block bidiagonal (block i depends on input
    blocks i and i-1 only, so blocks can be computed independently);
    f_apply is the inverse forward substitution and is inherently
    sequential over time blocks.
    """

    def __init__(self, step_operators):
        self.step_operators = list(step_operators)
        if not self.step_operators:
            raise ValueError("TimeCoupling needs at least one step operator")
        for i, m in enumerate(self.step_operators):
            if m is None:
                raise ValueError(f"missing tangent-linear operator for step {i + 1}")
            if m.domain_dim != m.codomain_dim:
                raise ValueError("step operators must be square")
            if not m.has_adjoint:
                raise ValueError("step operators must expose adjoints")
        self.n = self.step_operators[0].domain_dim
        for m in self.step_operators:
            if m.domain_dim != self.n:
                raise DimensionMismatchError("step operators disagree on state dimension")
        self.window_length = len(self.step_operators)  # N
        self.p = (self.window_length + 1) * self.n

    def _blocks(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.p,):
            raise DimensionMismatchError(
                f"expected stacked vector of length {self.p}, got shape {v.shape}"
            )
        return v.reshape(self.window_length + 1, self.n)

    def f_apply(self, v):
        """F v: w_0 = v_0, w_i = v_i + M_i w_{i-1} (sequential)."""
        vb = self._blocks(v)
        out = np.empty_like(vb)
        out[0] = vb[0]
        for i, m in enumerate(self.step_operators, start=1):
            out[i] = vb[i] + m.apply(out[i - 1])
        return out.ravel()

    def f_inverse_apply(self, v):
        """F^{-1} v: block 0 = v_0, block i = v_i - M_i v_{i-1}."""
        vb = self._blocks(v)
        out = np.empty_like(vb)
        out[0] = vb[0]
        for i, m in enumerate(self.step_operators, start=1):
            out[i] = vb[i] - m.apply(vb[i - 1])
        return out.ravel()

    def f_transpose_apply(self, v):
        """F^T v via the backward recurrence u_i = v_i + M_{i+1}^T u_{i+1}."""
        vb = self._blocks(v)
        out = np.empty_like(vb)
        N = self.window_length
        out[N] = vb[N]
        for i in range(N - 1, -1, -1):
            out[i] = vb[i] + self.step_operators[i].adjoint_apply(out[i + 1])
        return out.ravel()

    def f_inverse_transpose_apply(self, v):
        """F^{-T} v: block i = v_i - M_{i+1}^T v_{i+1}, block N = v_N."""
        vb = self._blocks(v)
        out = np.empty_like(vb)
        N = self.window_length
        out[N] = vb[N]
        for i in range(N):
            out[i] = vb[i] - self.step_operators[i].adjoint_apply(vb[i + 1])
        return out.ravel()

    @property
    def f(self) -> Operator:
        return FunctionOperator(self.p, self.p, self.f_apply, self.f_transpose_apply)

    @property
    def f_inv(self) -> Operator:
        return FunctionOperator(self.p, self.p, self.f_inverse_apply, self.f_inverse_transpose_apply)


def materialize_dense(op: Operator, cap: int = DENSE_ORACLE_CAP) -> np.ndarray:
    """Materialize an operator column by column (test oracle only)."""
    if op.domain_dim > cap:
        raise ValueError(
            f"refusing to materialize operator with domain dim {op.domain_dim} > cap {cap}"
        )
    cols = np.empty((op.codomain_dim, op.domain_dim))
    e = np.zeros(op.domain_dim)
    for j in range(op.domain_dim):
        e[j] = 1.0
        cols[:, j] = op.apply(e)
        e[j] = 0.0
    return cols
