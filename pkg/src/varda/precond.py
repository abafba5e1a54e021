"""First-level and limited-memory (second-level) preconditioning.

First-level: the control-variable transform s = U z with B = U U^T (strong)
or the D = D_1 D_1^T analog for the weak-forcing form, which clusters all
but m eigenvalues of the transformed normal operator at one.

Second-level: the limited-memory preconditioner family built from a small
basis Z -- the general form, the spectral form from exact eigenpairs, the
Ritz form from converged Ritz pairs of a previous solve, and the
quasi-Newton form from stored PCG search directions.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg

from .krylov import SolveReport
from .operators import FunctionOperator, IdentityOperator, Operator, SpdOperator
from .problem import AssemblySystem, InnerSubproblem

__all__ = [
    "first_level_transform",
    "build_lmp",
    "build_spectral_lmp",
    "build_ritz_lmp",
    "build_qn_lmp",
    "choose_theta",
    "Ftilde",
    "make_ftilde",
    "ftilde_preconditioner",
    "SpectralLmpOperator",
]

_PIVOT_THRESHOLD = 1e-12
RITZ_CONVERGENCE_THRESHOLD = 1e-6


def first_level_transform(sub: InnerSubproblem, form: str | None = None) -> AssemblySystem:
    """Split-preconditioned normal system via the covariance factor.

    Strong: A = I + U^T G^T R^{-1} G U with rhs U^{-1}(x_b - x_0)
    + U^T G^T R^{-1} d and recovery s = U z.  Weak-forcing analog uses
    D = D_1 D_1^T with recovery s = F D_1 z.
    """
    if form is None:
        form = "strong" if sub.formulation == "strong" else "weak-forcing"
    if form == "strong":
        if sub.formulation != "strong":
            raise ValueError("strong first-level transform needs a strong subproblem")
        B = sub.setup.B

        def apply_t(z):
            out = z.copy()
            if sub.m:
                out = out + B.factor_transpose_apply(
                    sub.g_adjoint(sub.R.inverse_apply(sub.g_apply(B.factor_apply(z)))))
            return out

        rhs = B.factor_inverse_apply(sub.f)
        if sub.m:
            rhs = rhs + B.factor_transpose_apply(sub.g_adjoint(sub.R.inverse_apply(sub.d)))
        op = FunctionOperator(sub.n, sub.n, apply_t, apply_t)
        return AssemblySystem("strong-transformed", op, rhs, B.factor_apply, sub)

    if form == "weak-forcing":
        if sub.formulation != "weak":
            raise ValueError("weak-forcing first-level transform needs a weak subproblem")
        D, tc = sub.D, sub.coupling

        def apply_t(z):
            out = z.copy()
            if sub.m:
                out = out + D.factor_transpose_apply(tc.f_transpose_apply(
                    sub.h_adjoint(sub.R.inverse_apply(
                        sub.h_apply(tc.f_apply(D.factor_apply(z)))))))
            return out

        rhs = D.factor_inverse_apply(sub.f)
        if sub.m:
            rhs = rhs + D.factor_transpose_apply(
                tc.f_transpose_apply(sub.h_adjoint(sub.R.inverse_apply(sub.d))))
        op = FunctionOperator(sub.p, sub.p, apply_t, apply_t)
        return AssemblySystem("weak-forcing-transformed", op, rhs,
                              lambda z: tc.f_apply(D.factor_apply(z)), sub)

    raise ValueError(f"unknown first-level form {form!r}")


# ---------------------------------------------------------------------------
# Limited-memory preconditioners


class LmpOperator(Operator):
    """General LMP: P = (I - Z E^{-1} Z'A)(I - AZ E^{-1} Z') + theta Z E^{-1} Z'.

    A Z is cached at build time, so each application costs O(ell * len)
    with no operator applications.
    """

    def __init__(self, Z: np.ndarray, AZ: np.ndarray, theta: float):
        super().__init__(Z.shape[0], Z.shape[0])
        self.Z = Z
        self.AZ = AZ
        self.theta = float(theta)
        self.ell = Z.shape[1]
        E = Z.T @ AZ
        E = 0.5 * (E + E.T)
        self._cho = scipy.linalg.cho_factor(E)

    def _solve(self, rhs):
        return scipy.linalg.cho_solve(self._cho, rhs)

    def _apply(self, v):
        # inner factor: w = v - AZ E^{-1} Z' v
        w = v - self.AZ @ self._solve(self.Z.T @ v)
        # outer factor: w - Z E^{-1} (AZ)' w  (A symmetric, so Z'A = (AZ)')
        out = w - self.Z @ self._solve(self.AZ.T @ w)
        return out + self.theta * (self.Z @ self._solve(self.Z.T @ v))

    def _adjoint_apply(self, w):
        return self._apply(w)


class SpectralLmpOperator(Operator):
    """Spectral LMP P = I - sum (1 - theta/lambda_i) z_i z_i^T with square root."""

    def __init__(self, values: np.ndarray, vectors: np.ndarray, theta: float):
        super().__init__(vectors.shape[0], vectors.shape[0])
        self.values = values
        self.vectors = vectors
        self.theta = float(theta)
        self._coef = 1.0 - theta / values
        self._coef_sqrt = 1.0 - np.sqrt(theta) / np.sqrt(values)

    @property
    def ell(self):
        return self.values.size

    def _apply(self, v):
        return v - self.vectors @ (self._coef * (self.vectors.T @ v))

    def _adjoint_apply(self, w):
        return self._apply(w)

    def factor_apply(self, v):
        """P^{1/2} v: the spectral form with sqrt(lambda), sqrt(theta)."""
        v = np.asarray(v, dtype=float)
        return v - self.vectors @ (self._coef_sqrt * (self.vectors.T @ v))

    factor_transpose_apply = factor_apply


def _drop_dependent_columns(Z: np.ndarray) -> np.ndarray:
    """Drop columns past the pivot threshold of a pivoted QR of Z."""
    if Z.size == 0:
        return Z
    _, Rq, piv = scipy.linalg.qr(Z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rq))
    if diag.size == 0 or diag[0] == 0.0:
        return Z[:, :0]
    keep = diag > _PIVOT_THRESHOLD * diag[0]
    if keep.all():
        return Z
    kept = np.sort(piv[: int(keep.sum())])
    warnings.warn(
        f"LMP basis is rank deficient: dropped {Z.shape[1] - kept.size} "
        f"of {Z.shape[1]} columns", stacklevel=3)
    return Z[:, kept]


def build_lmp(A, Z, theta: float = 1.0) -> Operator:
    """General limited-memory preconditioner from a basis Z (n x ell).

    Dependent columns of Z are dropped (pivot threshold 1e-12) rather than
    rejected.  ell = 0 returns the identity.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[1] == 0:
        return IdentityOperator(Z.shape[0])
    Z = _drop_dependent_columns(Z)
    if Z.shape[1] == 0:
        return IdentityOperator(Z.shape[0])
    apply_a = A.apply if isinstance(A, Operator) else A
    AZ = np.column_stack([apply_a(Z[:, j]) for j in range(Z.shape[1])])
    return LmpOperator(Z, AZ, theta)


def build_spectral_lmp(values, vectors, theta: float = 1.0) -> SpectralLmpOperator:
    """Spectral LMP from (approximate) eigenpairs, sorted descending.

    Vectors are re-orthonormalized internally; non-positive values are
    rejected.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    values = np.atleast_1d(np.asarray(values, dtype=float))
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    if np.any(values <= 0):
        raise ValueError("spectral LMP needs strictly positive eigenvalue estimates")
    order = np.argsort(values)[::-1]
    values = values[order]
    vectors = vectors[:, order]
    q, _ = np.linalg.qr(vectors)
    return SpectralLmpOperator(values, q, theta)


def build_ritz_lmp(report: SolveReport, theta: float = 1.0,
                   convergence_threshold: float = RITZ_CONVERGENCE_THRESHOLD,
                   spectral: bool = False, A=None) -> Operator:
    """Preconditioner from the converged Ritz pairs of a previous solve.

    Pairs whose residual estimate exceeds convergence_threshold times the
    largest Ritz value are discarded; no surviving pairs degrades to the
    identity.  By default builds the general LMP (Ritz LMP, requires A for
    the cached products); spectral=True builds the inexact spectral LMP,
    which needs no operator applications.
    """
    if report.ritz_values is None or report.ritz_values.size == 0:
        dim = report.ritz_vectors.shape[0] if report.ritz_vectors is not None else None
        if dim is None:
            raise ValueError("report carries no Ritz data and no dimension hint")
        return IdentityOperator(dim)
    lam_max = float(report.ritz_values.max())
    mask = report.ritz_residual_estimates <= convergence_threshold * lam_max
    mask &= report.ritz_values > 0
    dim = report.ritz_vectors.shape[0]
    if not mask.any():
        return IdentityOperator(dim)
    values = report.ritz_values[mask]
    vectors = report.ritz_vectors[:, mask]
    if spectral:
        return build_spectral_lmp(values, vectors, theta)
    if A is None:
        raise ValueError("general Ritz LMP needs the system operator A")
    return build_lmp(A, vectors, theta)


def build_qn_lmp(A, directions, theta: float = 1.0) -> Operator:
    """Quasi-Newton LMP: basis Z from stored PCG search directions.

    With all directions (respectively all Ritz vectors) the quasi-Newton
    and Ritz LMPs agree in exact arithmetic.  Empty directions give the
    identity.
    """
    if isinstance(directions, SolveReport):
        directions = directions.search_directions
    directions = list(directions)
    dim = A.domain_dim if isinstance(A, Operator) else None
    if not directions:
        if dim is None:
            raise ValueError("empty directions and no dimension hint")
        return IdentityOperator(dim)
    Z = np.column_stack(directions)
    return build_lmp(A, Z, theta)


def choose_theta(ritz_values, mode: str = "unit", ell: int | None = None,
                 untargeted=None, candidates: int = 200) -> float:
    """Scaling parameter for the LMP cluster position.

    unit mode returns 1.  condition-min scans log-spaced candidates
    theta in [1, max untargeted estimate] and minimizes the predicted
    condition number of the preconditioned spectrum: targeted values map
    to theta, untargeted estimates and the cluster at one are unchanged.
    """
    if mode == "unit":
        return 1.0
    if mode != "condition-min":
        raise ValueError(f"unknown theta mode {mode!r}")
    ritz_values = np.atleast_1d(np.asarray(ritz_values, dtype=float))
    if ritz_values.size == 0:
        return 1.0
    if ell is None:
        ell = ritz_values.size
    rest = (np.atleast_1d(np.asarray(untargeted, dtype=float))
            if untargeted is not None else ritz_values[ell:])
    fixed = np.concatenate([rest, [1.0]])
    hi = float(fixed.max())
    if hi <= 1.0:
        return 1.0
    thetas = np.geomspace(1.0, hi, candidates)
    kappa = np.maximum(thetas, fixed.max()) / np.minimum(thetas, fixed.min())
    return float(thetas[int(np.argmin(kappa))])


# ---------------------------------------------------------------------------
# F-tilde machinery for the weak-state system and the saddle preconditioners


class Ftilde:
    """Parallelizable approximation of the time-coupling operator F.

    choice = "zero": M~_i = 0, so F~ = I.  choice = "identity": M~_i = I,
    so F~ v is a blockwise cumulative sum (and F~^{-1} a block difference).
    choice = "exact": delegates to the actual TimeCoupling.
    """

    def __init__(self, choice: str, window_length: int, n: int, coupling=None):
        if choice not in ("zero", "identity", "exact"):
            raise ValueError(f"unknown ftilde choice {choice!r}")
        if choice == "exact" and coupling is None:
            raise ValueError("exact ftilde needs the TimeCoupling")
        self.choice = choice
        self.window_length = window_length
        self.n = n
        self.p = (window_length + 1) * n
        self._coupling = coupling

    def _blocks(self, v):
        return np.asarray(v, dtype=float).reshape(self.window_length + 1, self.n)

    def apply(self, v):
        if self.choice == "zero":
            return np.asarray(v, dtype=float).copy()
        if self.choice == "exact":
            return self._coupling.f_apply(v)
        return np.cumsum(self._blocks(v), axis=0).ravel()

    def transpose_apply(self, v):
        if self.choice == "zero":
            return np.asarray(v, dtype=float).copy()
        if self.choice == "exact":
            return self._coupling.f_transpose_apply(v)
        return np.cumsum(self._blocks(v)[::-1], axis=0)[::-1].ravel()

    def inverse_apply(self, v):
        if self.choice == "zero":
            return np.asarray(v, dtype=float).copy()
        if self.choice == "exact":
            return self._coupling.f_inverse_apply(v)
        vb = self._blocks(v)
        out = vb.copy()
        out[1:] -= vb[:-1]
        return out.ravel()

    def inverse_transpose_apply(self, v):
        if self.choice == "zero":
            return np.asarray(v, dtype=float).copy()
        if self.choice == "exact":
            return self._coupling.f_inverse_transpose_apply(v)
        vb = self._blocks(v)
        out = vb.copy()
        out[:-1] -= vb[1:]
        return out.ravel()


def make_ftilde(choice: str, coupling=None, window_length: int | None = None,
                n: int | None = None) -> Ftilde:
    if coupling is not None:
        window_length = coupling.window_length
        n = coupling.n
    if window_length is None or n is None:
        raise ValueError("need a TimeCoupling or explicit dimensions")
    return Ftilde(choice, window_length, n, coupling)


def ftilde_preconditioner(choice: str, D: SpdOperator, coupling=None,
                          window_length: int | None = None,
                          n: int | None = None) -> Operator:
    """SPD preconditioner for the weak-state system: action F~ D F~^T.

    This is the inverse of the approximation F~^{-T} D^{-1} F~^{-1} to the
    weak-state normal operator's full-rank term; the block applies are
    independent and parallelizable.
    """
    ft = make_ftilde(choice, coupling, window_length, n)

    def apply_p(v):
        return ft.apply(D.apply(ft.transpose_apply(v)))

    return FunctionOperator(ft.p, ft.p, apply_p, apply_p)
