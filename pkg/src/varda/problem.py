"""Cost functions, Gauss-Newton linearization, and linear-system assembly.

One linearization of the nonlinear 4DVar cost produces an InnerSubproblem
(innovations, model-error misfits, frozen TLM/observation Jacobians, and
the stacked least-squares triple J, b, W).  From it every linear-system
form is assembled: strong-primal, weak-state, weak-forcing, dual (with the
PSAS symmetric variant), and the 3x3 augmented saddle system.

Weak dual derivation (not spelled out in the literature we follow): the
weak-state normal operator is F^{-T} D^{-1} F^{-1} + H^T R^{-1} H, which
matches the strong pattern with B -> F D F^T, G -> H and background
increment x_b - x_0 -> F f.  The dual system is therefore
(R^{-1} H F D F^T H^T + I) u = R^{-1} (d - H F f), with the recovery
s = F f + F D F^T H^T u.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .models import DynamicalModel, ObservationOperator
from .operators import (
    BlockDiagSpd,
    FunctionOperator,
    Operator,
    SpdOperator,
    TimeCoupling,
)

__all__ = [
    "Observation",
    "AssimilationSetup",
    "InnerSubproblem",
    "AssemblySystem",
    "cost",
    "cost_strong",
    "cost_weak",
    "gradient",
    "linearize",
    "assemble_normal",
    "assemble_dual",
    "assemble_augmented",
]


@dataclass(frozen=True)
class Observation:
    """Observations at one window time: values, error covariance, operator."""
    y: np.ndarray
    r: SpdOperator | None
    obsop: ObservationOperator | None

    @property
    def m(self) -> int:
        return 0 if self.obsop is None else self.obsop.m

    @staticmethod
    def empty() -> "Observation":
        return Observation(np.zeros(0), None, None)


class AssimilationSetup:
    """Problem statement: background, covariances, observations, model.

    observations is a list of length N+1 (index i = window time t_i);
    empty windows are allowed.  model_error_covs (the Q_i, length N) are
    required for the weak formulation and must be absent for the strong one.
    """

    def __init__(self, formulation: str, model: DynamicalModel,
                 background: np.ndarray, background_cov: SpdOperator,
                 observations: list[Observation],
                 model_error_covs: list[SpdOperator] | None = None):
        if formulation not in ("strong", "weak"):
            raise ValueError(f"unknown formulation {formulation!r}")
        self.formulation = formulation
        self.model = model
        self.x_b = np.array(background, dtype=float)
        self.n = self.x_b.size
        if model.n != self.n:
            raise ValueError(f"background length {self.n} != model dim {model.n}")
        if background_cov.domain_dim != self.n:
            raise ValueError("background covariance dimension mismatch")
        self.B = background_cov
        self.observations = [obs if obs is not None else Observation.empty()
                             for obs in observations]
        self.N = len(self.observations) - 1
        if self.N < 1:
            raise ValueError("need at least two window times (N >= 1)")
        for i, obs in enumerate(self.observations):
            if obs.obsop is not None and obs.obsop.n != self.n:
                raise ValueError(f"observation operator at window {i} has wrong input dim")
            if obs.obsop is not None and (obs.r is None or obs.r.domain_dim != obs.m):
                raise ValueError(f"observation covariance at window {i} has wrong dim")
            if obs.y.size != obs.m:
                raise ValueError(f"observation vector at window {i} has wrong length")
        if formulation == "weak":
            if model_error_covs is None or len(model_error_covs) != self.N:
                raise ValueError(f"weak formulation needs {self.N} model-error covariances")
            for q in model_error_covs:
                if q.domain_dim != self.n:
                    raise ValueError("model-error covariance dimension mismatch")
            self.Q = list(model_error_covs)
        else:
            if model_error_covs:
                raise ValueError("strong formulation takes no model-error covariances")
            self.Q = None

    @property
    def p(self) -> int:
        return (self.N + 1) * self.n

    @property
    def m(self) -> int:
        return sum(obs.m for obs in self.observations)

    def propagate(self, x0) -> np.ndarray:
        """Model trajectory (N+1, n) from an initial state."""
        traj = np.empty((self.N + 1, self.n))
        traj[0] = np.asarray(x0, dtype=float)
        for i in range(1, self.N + 1):
            traj[i] = self.model.step(traj[i - 1])
        return traj

    def _obs_misfit_cost(self, traj) -> float:
        total = 0.0
        for i, obs in enumerate(self.observations):
            if obs.m == 0:
                continue
            r = obs.obsop.observe(traj[i]) - obs.y
            total += 0.5 * float(r @ obs.r.inverse_apply(r))
        return total


def cost(setup: AssimilationSetup, x) -> float:
    """Nonlinear 4DVar cost.

    Strong: x is the initial state (length n).  Weak: x is the stacked
    trajectory (length p).
    """
    if setup.formulation == "strong":
        x0 = np.asarray(x, dtype=float)
        traj = setup.propagate(x0)
        db = x0 - setup.x_b
        value = 0.5 * float(db @ setup.B.inverse_apply(db)) + setup._obs_misfit_cost(traj)
    else:
        traj = np.asarray(x, dtype=float).reshape(setup.N + 1, setup.n)
        db = traj[0] - setup.x_b
        value = 0.5 * float(db @ setup.B.inverse_apply(db)) + setup._obs_misfit_cost(traj)
        for i in range(1, setup.N + 1):
            q = traj[i] - setup.model.step(traj[i - 1])
            value += 0.5 * float(q @ setup.Q[i - 1].inverse_apply(q))
    if not np.isfinite(value):
        raise FloatingPointError("cost evaluation diverged (non-finite value)")
    return value


def cost_strong(setup: AssimilationSetup, x0) -> float:
    if setup.formulation != "strong":
        raise ValueError("cost_strong needs a strong setup")
    return cost(setup, x0)


def cost_weak(setup: AssimilationSetup, x) -> float:
    if setup.formulation != "weak":
        raise ValueError("cost_weak needs a weak setup")
    return cost(setup, x)


def gradient(setup: AssimilationSetup, x) -> np.ndarray:
    """Exact gradient of cost() via adjoint sweeps."""
    if setup.formulation == "strong":
        x0 = np.asarray(x, dtype=float)
        traj = setup.propagate(x0)
        # adjoint sweep: a_i accumulates H_i^T R_i^{-1} residual + M_{i+1}^T a_{i+1}
        a = np.zeros(setup.n)
        for i in range(setup.N, -1, -1):
            obs = setup.observations[i]
            if obs.m > 0:
                r = obs.obsop.observe(traj[i]) - obs.y
                a += obs.obsop.adjoint_apply(traj[i], obs.r.inverse_apply(r))
            if i > 0:
                a = setup.model.adjoint_apply(traj[i - 1], a)
        return setup.B.inverse_apply(x0 - setup.x_b) + a
    traj = np.asarray(x, dtype=float).reshape(setup.N + 1, setup.n)
    grad = np.zeros_like(traj)
    grad[0] += setup.B.inverse_apply(traj[0] - setup.x_b)
    for i, obs in enumerate(setup.observations):
        if obs.m > 0:
            r = obs.obsop.observe(traj[i]) - obs.y
            grad[i] += obs.obsop.adjoint_apply(traj[i], obs.r.inverse_apply(r))
    for i in range(1, setup.N + 1):
        w = setup.Q[i - 1].inverse_apply(traj[i] - setup.model.step(traj[i - 1]))
        grad[i] += w
        grad[i - 1] -= setup.model.adjoint_apply(traj[i - 1], w)
    return grad.ravel()


# ---------------------------------------------------------------------------
# Linearization


class InnerSubproblem:
    """One Gauss-Newton linearization: frozen Jacobians plus misfit data.

    Carries the innovations d_i, the model-error misfits c_i and the
    background misfit stacked as f, the frozen TimeCoupling, and the frozen
    observation Jacobians.  Exposes the stacked least-squares data (J, b, W).
    """

    def __init__(self, setup: AssimilationSetup, reference: np.ndarray):
        self.setup = setup
        self.formulation = setup.formulation
        self.reference = np.array(reference, dtype=float)
        n, N = setup.n, setup.N
        if setup.formulation == "strong":
            traj = setup.propagate(self.reference)
        else:
            traj = self.reference.reshape(N + 1, n)
        self.trajectory = traj
        self.coupling = TimeCoupling(
            [setup.model.tlm_operator(traj[i - 1]) for i in range(1, N + 1)]
        )
        self.h_ops = [
            obs.obsop.jacobian_operator(traj[i]) if obs.m > 0 else None
            for i, obs in enumerate(setup.observations)
        ]
        self.innovations = [
            obs.y - obs.obsop.observe(traj[i]) if obs.m > 0 else np.zeros(0)
            for i, obs in enumerate(setup.observations)
        ]
        self.d = np.concatenate(self.innovations) if setup.m else np.zeros(0)
        if setup.formulation == "weak":
            self.model_error = [
                setup.model.step(traj[i - 1]) - traj[i] for i in range(1, N + 1)
            ]
            self.f = np.concatenate([setup.x_b - traj[0]] + self.model_error)
        else:
            self.model_error = None
            self.f = setup.x_b - traj[0]
        # weights
        r_blocks = [obs.r for obs in setup.observations if obs.m > 0]
        self.R = BlockDiagSpd(r_blocks) if r_blocks else None
        if setup.formulation == "weak":
            self.D = BlockDiagSpd([setup.B] + setup.Q)
            self.W = BlockDiagSpd((r_blocks or []) + [setup.B] + setup.Q)
        else:
            self.D = None
            self.W = BlockDiagSpd((r_blocks or []) + [setup.B])

    @property
    def n(self):
        return self.setup.n

    @property
    def N(self):
        return self.setup.N

    @property
    def p(self):
        return self.setup.p

    @property
    def m(self):
        return self.setup.m

    # --- block-diagonal observation map H on stacked trajectories ---------

    def h_apply(self, s):
        s = np.asarray(s, dtype=float).reshape(self.N + 1, self.n)
        parts = [op.apply(s[i]) for i, op in enumerate(self.h_ops) if op is not None]
        return np.concatenate(parts) if parts else np.zeros(0)

    def h_adjoint(self, w):
        w = np.asarray(w, dtype=float)
        out = np.zeros((self.N + 1, self.n))
        off = 0
        for i, op in enumerate(self.h_ops):
            if op is None:
                continue
            out[i] = op.adjoint_apply(w[off:off + op.codomain_dim])
            off += op.codomain_dim
        return out.ravel()

    @property
    def h_operator(self) -> Operator:
        if self.m == 0:
            raise ValueError("no observations: H is empty")
        return FunctionOperator(self.p, self.m, self.h_apply, self.h_adjoint)

    # --- strong-formulation G = H . time propagation -----------------------

    def g_apply(self, s0):
        s0 = np.asarray(s0, dtype=float)
        delta = s0
        parts = []
        for i in range(self.N + 1):
            if i > 0:
                delta = self.coupling.step_operators[i - 1].apply(delta)
            if self.h_ops[i] is not None:
                parts.append(self.h_ops[i].apply(delta))
        return np.concatenate(parts) if parts else np.zeros(0)

    def g_adjoint(self, w):
        w = np.asarray(w, dtype=float)
        # split w into per-window pieces
        pieces = [None] * (self.N + 1)
        off = 0
        for i, op in enumerate(self.h_ops):
            if op is not None:
                pieces[i] = w[off:off + op.codomain_dim]
                off += op.codomain_dim
        a = np.zeros(self.n)
        for i in range(self.N, -1, -1):
            if pieces[i] is not None:
                a += self.h_ops[i].adjoint_apply(pieces[i])
            if i > 0:
                a = self.coupling.step_operators[i - 1].adjoint_apply(a)
        return a

    @property
    def g_operator(self) -> Operator:
        if self.m == 0:
            raise ValueError("no observations: G is empty")
        return FunctionOperator(self.n, self.m, self.g_apply, self.g_adjoint)

    # --- stacked least-squares data ----------------------------------------

    def j_apply(self, s):
        if self.formulation == "strong":
            return np.concatenate([self.g_apply(s), np.asarray(s, dtype=float)])
        return np.concatenate([self.h_apply(s), self.coupling.f_inverse_apply(s)])

    def j_adjoint(self, w):
        w = np.asarray(w, dtype=float)
        if self.formulation == "strong":
            return self.g_adjoint(w[:self.m]) + w[self.m:]
        return self.h_adjoint(w[:self.m]) + self.coupling.f_inverse_transpose_apply(w[self.m:])

    @property
    def j_operator(self) -> Operator:
        dom = self.n if self.formulation == "strong" else self.p
        return FunctionOperator(dom, self.m + dom if self.formulation == "strong"
                                else self.m + self.p, self.j_apply, self.j_adjoint)

    @property
    def b(self) -> np.ndarray:
        return np.concatenate([self.d, self.f])

    def quadratic_cost(self, s) -> float:
        """0.5 || J s - b ||^2 in the W^{-1} norm.

        At s = 0 this equals the nonlinear cost at the linearization point.
        """
        r = self.j_apply(s) - self.b
        return 0.5 * float(r @ self.W.inverse_apply(r))

    def quadratic_gradient(self, s) -> np.ndarray:
        r = self.j_apply(s) - self.b
        return self.j_adjoint(self.W.inverse_apply(r))


def linearize(setup: AssimilationSetup, x) -> InnerSubproblem:
    """Freeze TLMs and observation Jacobians at the current outer iterate."""
    return InnerSubproblem(setup, np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# System assembly


@dataclass
class AssemblySystem:
    """A tagged linear system with its operator, rhs, and recovery map."""
    form: str
    operator: Operator
    rhs: np.ndarray
    recover: Callable[[np.ndarray], np.ndarray]
    subproblem: InnerSubproblem
    extras: dict = field(default_factory=dict)


def assemble_normal(sub: InnerSubproblem, form: str) -> AssemblySystem:
    """Primal normal-equation systems: strong-primal, weak-state, weak-forcing."""
    if form == "strong-primal":
        if sub.formulation != "strong":
            raise ValueError("strong-primal form needs a strong subproblem")
        B = sub.setup.B

        def apply_as(v):
            out = B.inverse_apply(v)
            if sub.m:
                out = out + sub.g_adjoint(sub.R.inverse_apply(sub.g_apply(v)))
            return out

        rhs = B.inverse_apply(sub.f)
        if sub.m:
            rhs = rhs + sub.g_adjoint(sub.R.inverse_apply(sub.d))
        op = FunctionOperator(sub.n, sub.n, apply_as, apply_as)
        return AssemblySystem(form, op, rhs, lambda s: s, sub)

    if sub.formulation != "weak":
        raise ValueError(f"{form} form needs a weak subproblem")
    tc, D = sub.coupling, sub.D

    if form == "weak-state":
        def apply_aw(v):
            out = tc.f_inverse_transpose_apply(D.inverse_apply(tc.f_inverse_apply(v)))
            if sub.m:
                out = out + sub.h_adjoint(sub.R.inverse_apply(sub.h_apply(v)))
            return out

        rhs = tc.f_inverse_transpose_apply(D.inverse_apply(sub.f))
        if sub.m:
            rhs = rhs + sub.h_adjoint(sub.R.inverse_apply(sub.d))
        op = FunctionOperator(sub.p, sub.p, apply_aw, apply_aw)
        return AssemblySystem(form, op, rhs, lambda s: s, sub)

    if form == "weak-forcing":
        def apply_af(v):
            out = D.inverse_apply(v)
            if sub.m:
                out = out + tc.f_transpose_apply(
                    sub.h_adjoint(sub.R.inverse_apply(sub.h_apply(tc.f_apply(v)))))
            return out

        rhs = D.inverse_apply(sub.f)
        if sub.m:
            rhs = rhs + tc.f_transpose_apply(sub.h_adjoint(sub.R.inverse_apply(sub.d)))
        op = FunctionOperator(sub.p, sub.p, apply_af, apply_af)
        return AssemblySystem(form, op, rhs, tc.f_apply, sub)

    raise ValueError(f"unknown normal-equation form {form!r}")


def assemble_dual(sub: InnerSubproblem, psas: bool = False) -> AssemblySystem:
    """Observation-space dual system (and its symmetric PSAS variant).

    Strong: (R^{-1} G B G^T + I) u = R^{-1}(d - G(x_b - x_0)),
    s = x_b - x_0 + B G^T u.  Weak: same pattern with G -> H, B -> F D F^T,
    x_b - x_0 -> F f (see module docstring).
    """
    if sub.m == 0:
        raise ValueError("no observations: the dual problem does not exist")
    R = sub.R
    if sub.formulation == "strong":
        fwd, adj = sub.g_apply, sub.g_adjoint
        cov_apply = sub.setup.B.apply
        shift = sub.f  # x_b - x_0
    else:
        fwd, adj = sub.h_apply, sub.h_adjoint
        tc, D = sub.coupling, sub.D
        cov_apply = lambda v: tc.f_apply(D.apply(tc.f_transpose_apply(v)))
        shift = sub.coupling.f_apply(sub.f)  # F f

    def gbg(u):
        return fwd(cov_apply(adj(u)))

    dhat = sub.d - fwd(shift)

    def recover_from_u(u):
        return shift + cov_apply(adj(u))

    extras = {
        "gbg_apply": gbg,
        "shift": shift,
        "dual_rhs_unpreconditioned": dhat,
        "r": R,
        "recover_from_u": recover_from_u,
    }

    if not psas:
        def apply_dual(u):
            return R.inverse_apply(gbg(u)) + u

        op = FunctionOperator(sub.m, sub.m, apply_dual)  # nonsymmetric, no adjoint
        rhs = R.inverse_apply(dhat)
        return AssemblySystem("dual", op, rhs, recover_from_u, sub, extras)

    # PSAS: split by R^{-1/2}; symmetric since our covariance factors are
    # symmetric square roots.
    def apply_psas(z):
        return R.factor_inverse_apply(gbg(R.factor_transpose_inverse_apply(z))) + z

    op = FunctionOperator(sub.m, sub.m, apply_psas, apply_psas)
    rhs = R.factor_inverse_apply(dhat)

    def recover_psas(z):
        return recover_from_u(R.factor_transpose_inverse_apply(z))

    return AssemblySystem("psas", op, rhs, recover_psas, sub, extras)


def assemble_augmented(sub: InnerSubproblem) -> AssemblySystem:
    """3x3 symmetric saddle system K (lambda_o, lambda_b, s) = (d, f, 0)."""
    if sub.formulation != "weak":
        raise ValueError("augmented system is assembled for weak subproblems")
    m, p = sub.m, sub.p
    R, D, tc = sub.R, sub.D, sub.coupling

    def apply_k(v):
        lo, lb, s = v[:m], v[m:m + p], v[m + p:]
        out1 = (R.apply(lo) + sub.h_apply(s)) if m else np.zeros(0)
        out2 = D.apply(lb) + tc.f_inverse_apply(s)
        out3 = tc.f_inverse_transpose_apply(lb)
        if m:
            out3 = out3 + sub.h_adjoint(lo)
        return np.concatenate([out1, out2, out3])

    op = FunctionOperator(m + 2 * p, m + 2 * p, apply_k, apply_k)
    rhs = np.concatenate([sub.d, sub.f, np.zeros(p)])
    return AssemblySystem("augmented", op, rhs, lambda v: v[m + p:], sub)
