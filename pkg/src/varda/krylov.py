"""Truncated Krylov solvers: PCG, CGLS, MINRES, GMRES, RPCG, Lanczos-Ritz.

All solvers run a fixed truncation budget with an optional relative residual
tolerance, start from a zero initial guess unless a warm start is supplied,
and return a SolveReport with residual histories, optional quadratic-cost
monitoring, and optional Ritz data extracted from the underlying Lanczos
process.  Preconditioners are passed as operators (or callables) whose
action approximates the inverse of the system operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .operators import Operator

__all__ = [
    "SolverConfig",
    "SolveReport",
    "BreakdownError",
    "pcg",
    "cgls",
    "minres",
    "gmres",
    "rpcg",
    "lanczos_ritz",
]

_BREAKDOWN_REL = 1e-14


class BreakdownError(RuntimeError):
    """Fatal solver breakdown (indefinite operator or preconditioner)."""


@dataclass
class SolverConfig:
    max_iterations: int = 50
    tol: float = 1e-8
    reorthogonalize: bool = False
    monitor_quadratic_cost: bool = False
    ritz_extraction: int = 0
    store_search_directions: bool = False
    store_iterates: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (0.0 < self.tol < 1.0):
            raise ValueError("tol must lie in (0, 1)")


@dataclass
class SolveReport:
    iterations: int = 0
    residual_norms: list = field(default_factory=list)
    cost_history: list = field(default_factory=list)
    ritz_values: np.ndarray | None = None
    ritz_vectors: np.ndarray | None = None
    ritz_residual_estimates: np.ndarray | None = None
    ritz_truncated: bool = False
    termination: str = "budget"
    search_directions: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "iterations": self.iterations,
            "residual_norms": [float(r) for r in self.residual_norms],
            "termination": self.termination,
        }
        if self.cost_history:
            out["cost_history"] = [float(c) for c in self.cost_history]
        if self.ritz_values is not None:
            out["ritz_values"] = [float(v) for v in self.ritz_values]
            out["ritz_residual_estimates"] = [
                float(v) for v in self.ritz_residual_estimates]
        out.update({k: v for k, v in self.extras.items()
                    if isinstance(v, (int, float, str, bool))})
        return out


def _as_action(op):
    """Accept an Operator, a callable, or None (identity)."""
    if op is None:
        return lambda v: v
    if isinstance(op, Operator):
        return op.apply
    return op


def _ritz_from_lanczos(alphas, betas, basis, k):
    """Ritz pairs from CG/Lanczos coefficients.

    basis columns are the P-normalized preconditioned residuals; the
    tridiagonal matrix is assembled from the CG step/improvement ratios.
    Residual estimate per pair is the classical Lanczos bound
    |last off-diagonal| * |last component of the Ritz eigenvector|.
    """
    j = len(alphas)
    if j == 0 or k == 0:
        return None, None, None
    T = np.zeros((j, j))
    for i in range(j):
        T[i, i] = 1.0 / alphas[i]
        if i > 0:
            T[i, i] += betas[i - 1] / alphas[i - 1]
            off = np.sqrt(betas[i - 1]) / alphas[i - 1]
            T[i, i - 1] = T[i - 1, i] = off
    vals, vecs = np.linalg.eigh(T)
    order = np.argsort(vals)[::-1][:min(k, j)]
    vals = vals[order]
    vecs = vecs[:, order]
    if len(betas) >= j and j > 0:
        next_off = np.sqrt(betas[j - 1]) / alphas[j - 1]
    else:
        next_off = 0.0
    estimates = np.abs(next_off * vecs[-1, :])
    V = np.column_stack(basis)
    ritz_vecs = V @ vecs
    return vals, ritz_vecs, estimates


def pcg(A, b, precond=None, cfg: SolverConfig | None = None, x0=None):
    """Preconditioned conjugate gradients for SPD systems.

    With reorthogonalization on, each new residual is orthogonalized twice
    against all stored residuals (in the preconditioner inner product).
    The monitored quadratic cost 0.5 w^T A w - b^T w is updated by the CG
    recurrence and is non-increasing by construction of the method.
    """
    cfg = cfg or SolverConfig()
    A_ = _as_action(A)
    P_ = _as_action(precond)
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - A_(x) if x0 is not None else b.copy()
    z = P_(r)
    rho = float(r @ z)
    if rho < 0:
        raise BreakdownError("preconditioner is not positive definite (r'Pr < 0)")
    report = SolveReport()
    report.residual_norms.append(np.sqrt(max(rho, 0.0)))
    if cfg.store_iterates:
        report.iterates.append(x.copy())
    phi = 0.5 * float(x @ A_(x)) - float(b @ x) if x0 is not None else 0.0
    if cfg.monitor_quadratic_cost:
        report.cost_history.append(phi)
    tol_target = cfg.tol * report.residual_norms[0]
    if report.residual_norms[0] <= tol_target or rho == 0.0:
        report.termination = "tolerance"
        return x, report

    stored = []          # (r_i, z_i, rho_i) for reorthogonalization
    basis = []           # z_i / sqrt(rho_i) for Ritz extraction
    want_lanczos = cfg.ritz_extraction > 0
    alphas, betas = [], []
    curvature_scale = 0.0
    p = z.copy()
    for _ in range(cfg.max_iterations):
        if cfg.reorthogonalize or want_lanczos:
            stored.append((r.copy(), z.copy(), rho))
            if want_lanczos:
                basis.append(z / np.sqrt(rho))
        Ap = A_(p)
        pAp = float(p @ Ap)
        curvature_scale = max(curvature_scale, abs(pAp) / max(float(p @ p), 1e-300))
        if pAp <= _BREAKDOWN_REL * curvature_scale * float(p @ p):
            report.termination = "breakdown"
            report.extras["breakdown_reason"] = "non-positive curvature"
            break
        alpha = rho / pAp
        if cfg.store_search_directions:
            report.search_directions.append(p.copy())
        x = x + alpha * p
        r = r - alpha * Ap
        if cfg.reorthogonalize:
            for _pass in range(2):
                for ri, zi, rhoi in stored:
                    r -= (float(zi @ r) / rhoi) * ri
        z = P_(r)
        rho_new = float(r @ z)
        if rho_new < 0:
            raise BreakdownError("preconditioner is not positive definite (r'Pr < 0)")
        beta = rho_new / rho
        alphas.append(alpha)
        betas.append(beta)
        phi = phi - 0.5 * alpha * rho
        rho = rho_new
        report.iterations += 1
        report.residual_norms.append(np.sqrt(max(rho, 0.0)))
        if cfg.monitor_quadratic_cost:
            report.cost_history.append(phi)
        if cfg.store_iterates:
            report.iterates.append(x.copy())
        if report.residual_norms[-1] <= tol_target:
            report.termination = "tolerance"
            break
        p = z + beta * p
    if want_lanczos:
        vals, vecs, est = _ritz_from_lanczos(alphas, betas, basis, cfg.ritz_extraction)
        report.ritz_values = vals
        report.ritz_vectors = vecs
        report.ritz_residual_estimates = est
        report.ritz_truncated = vals is not None and len(vals) < cfg.ritz_extraction
    return x, report


def cgls(J, b, W=None, cfg: SolverConfig | None = None):
    """CGLS for min 0.5 || J s - b ||^2 in the W^{-1} norm.

    Recurs the least-squares residual; mathematically equivalent to CG on
    the generalized normal equations J^T W^{-1} J s = J^T W^{-1} b.
    Residual history records the normal-equations residual norm.
    """
    cfg = cfg or SolverConfig()
    b = np.asarray(b, dtype=float)
    winv = W.inverse_apply if W is not None else (lambda v: v)
    s = np.zeros(J.domain_dim)
    r = b.copy()
    g = J.adjoint_apply(winv(r))
    gamma = float(g @ g)
    report = SolveReport()
    report.residual_norms.append(np.sqrt(gamma))
    if cfg.monitor_quadratic_cost:
        report.cost_history.append(0.5 * float(r @ winv(r)))
    tol_target = cfg.tol * report.residual_norms[0]
    if report.residual_norms[0] <= tol_target:
        report.termination = "tolerance"
        return s, report
    stored = []
    p = g.copy()
    scale = 0.0
    for _ in range(cfg.max_iterations):
        if cfg.reorthogonalize:
            stored.append(g / np.sqrt(gamma))
        q = J.apply(p)
        wq = winv(q)
        delta = float(q @ wq)
        scale = max(scale, abs(delta) / max(float(p @ p), 1e-300))
        if delta <= _BREAKDOWN_REL * scale * float(p @ p):
            report.termination = "breakdown"
            report.extras["breakdown_reason"] = "rank deficiency (stagnation)"
            break
        alpha = gamma / delta
        if cfg.store_search_directions:
            report.search_directions.append(p.copy())
        s = s + alpha * p
        r = r - alpha * q
        g = J.adjoint_apply(winv(r))
        if cfg.reorthogonalize:
            for _pass in range(2):
                for gi in stored:
                    g -= float(gi @ g) * gi
        gamma_new = float(g @ g)
        beta = gamma_new / gamma
        gamma = gamma_new
        report.iterations += 1
        report.residual_norms.append(np.sqrt(gamma))
        if cfg.monitor_quadratic_cost:
            report.cost_history.append(0.5 * float(r @ winv(r)))
        if cfg.store_iterates:
            report.iterates.append(s.copy())
        if report.residual_norms[-1] <= tol_target:
            report.termination = "tolerance"
            break
        p = g + beta * p
    return s, report


def minres(A, b, precond=None, cfg: SolverConfig | None = None, monitor=None):
    """Preconditioned MINRES for symmetric (possibly indefinite) systems.

    The preconditioner must be SPD; a negative inner square root is a
    breakdown.  The preconditioned residual norm is non-increasing.
    monitor(x) values, when given, are recorded per iteration.
    """
    cfg = cfg or SolverConfig()
    A_ = _as_action(A)
    P_ = _as_action(precond)
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    report = SolveReport()
    r1 = b.copy()
    y = P_(r1)
    beta1 = float(r1 @ y)
    if beta1 < 0:
        report.termination = "breakdown"
        report.extras["breakdown_reason"] = "preconditioner not SPD"
        return x, report
    beta1 = np.sqrt(beta1)
    report.residual_norms.append(beta1)
    if monitor is not None:
        report.cost_history.append(float(monitor(x)))
    if cfg.store_iterates:
        report.iterates.append(x.copy())
    if beta1 <= cfg.tol * max(beta1, 1e-300) or beta1 == 0.0:
        report.termination = "tolerance"
        return x, report
    tol_target = cfg.tol * beta1

    oldb, beta = 0.0, beta1
    dbar = epsln = 0.0
    phibar = beta1
    cs, sn = -1.0, 0.0
    w = np.zeros_like(b)
    w2 = np.zeros_like(b)
    r2 = r1.copy()
    for itn in range(1, cfg.max_iterations + 1):
        v = y / beta
        y = A_(v)
        if itn >= 2:
            y = y - (beta / oldb) * r1
        alfa = float(v @ y)
        y = y - (alfa / beta) * r2
        r1 = r2
        r2 = y
        y = P_(r2)
        oldb = beta
        beta = float(r2 @ y)
        if beta < 0:
            report.termination = "breakdown"
            report.extras["breakdown_reason"] = "preconditioner not SPD"
            break
        beta = np.sqrt(beta)
        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        gamma = max(np.sqrt(gbar * gbar + beta * beta), 1e-300)
        cs = gbar / gamma
        sn = beta / gamma
        phi = cs * phibar
        phibar = sn * phibar
        w1 = w2
        w2 = w
        w = (v - oldeps * w1 - delta * w2) / gamma
        x = x + phi * w
        report.iterations = itn
        report.residual_norms.append(abs(phibar))
        if monitor is not None:
            report.cost_history.append(float(monitor(x)))
        if cfg.store_iterates:
            report.iterates.append(x.copy())
        if abs(phibar) <= tol_target:
            report.termination = "tolerance"
            break
    return x, report


def gmres(A, b, precond=None, cfg: SolverConfig | None = None, monitor=None):
    """Unrestarted GMRES with modified Gram-Schmidt and right preconditioning.

    Right preconditioning keeps the recorded residual norms true residuals
    of the original system.  Happy breakdown returns the exact solution.
    """
    cfg = cfg or SolverConfig()
    A_ = _as_action(A)
    P_ = _as_action(precond)
    b = np.asarray(b, dtype=float)
    nrm_b = np.linalg.norm(b)
    report = SolveReport()
    x = np.zeros_like(b)
    report.residual_norms.append(nrm_b)
    if monitor is not None:
        report.cost_history.append(float(monitor(x)))
    if cfg.store_iterates:
        report.iterates.append(x.copy())
    if nrm_b == 0.0:
        report.termination = "tolerance"
        return x, report
    tol_target = cfg.tol * nrm_b

    V = [b / nrm_b]
    H = np.zeros((cfg.max_iterations + 1, cfg.max_iterations))
    happy = False
    j = 0
    for j in range(cfg.max_iterations):
        wv = A_(P_(V[j]))
        if not np.all(np.isfinite(wv)):
            report.termination = "breakdown"
            report.extras["breakdown_reason"] = "non-finite operator output"
            break
        nrm_w = np.linalg.norm(wv)
        for i in range(j + 1):
            H[i, j] = float(V[i] @ wv)
            wv = wv - H[i, j] * V[i]
        H[j + 1, j] = np.linalg.norm(wv)
        # small least-squares problem for the current iterate / residual
        e1 = np.zeros(j + 2)
        e1[0] = nrm_b
        yj, *_ = np.linalg.lstsq(H[:j + 2, :j + 1], e1, rcond=None)
        res = np.linalg.norm(e1 - H[:j + 2, :j + 1] @ yj)
        report.iterations = j + 1
        report.residual_norms.append(res)
        if monitor is not None or cfg.store_iterates:
            xj = P_(np.column_stack(V[:j + 1]) @ yj) if j >= 0 else x
            if monitor is not None:
                report.cost_history.append(float(monitor(xj)))
            if cfg.store_iterates:
                report.iterates.append(xj.copy())
        if res <= tol_target:
            report.termination = "tolerance"
            if H[j + 1, j] > 0.0:
                V.append(wv / H[j + 1, j])
            break
        if H[j + 1, j] <= _BREAKDOWN_REL * max(1.0, nrm_w):
            # Invariant subspace reached without meeting the residual
            # target: stop honestly rather than claiming convergence.
            happy = True
            report.termination = "breakdown"
            report.extras["happy_breakdown"] = True
            break
        V.append(wv / H[j + 1, j])
    k = report.iterations
    e1 = np.zeros(k + 1)
    e1[0] = nrm_b
    y, *_ = np.linalg.lstsq(H[:k + 1, :k], e1, rcond=None)
    x = P_(np.column_stack(V[:k]) @ y)
    if happy:
        report.residual_norms[-1] = float(np.linalg.norm(e1 - H[:k + 1, :k] @ y))
    return x, report


def rpcg(system, cfg: SolverConfig | None = None):
    """Restricted PCG on the observation-space dual system.

    CG on (R^{-1} G B G^T + I) u = R^{-1} d_hat equipped with the
    (possibly semidefinite) G B G^T inner product.  With u^0 = 0 the
    recovered iterates s = shift + B G^T u reproduce, in exact arithmetic,
    the iterates of PCG on the primal normal equations preconditioned by B
    and started from s^0 = shift (= x_b - x_0).

    A zero-seminorm residual direction is handled exactly: adding the
    residual itself to u then solves the system (it lies in the identity
    part of the operator), which covers the degenerate G = 0 case in one
    iteration.

    Returns (u, recovered s, report); report.iterates holds recovered
    per-iteration s when requested.
    """
    cfg = cfg or SolverConfig()
    if system.form != "dual":
        raise ValueError("rpcg needs a dual-form AssemblySystem")
    gbg = system.extras["gbg_apply"]
    R = system.extras["r"]
    recover = system.extras["recover_from_u"]
    c = system.rhs
    u = np.zeros_like(c)
    r = c.copy()
    wr = gbg(r)
    rho = float(r @ wr)
    report = SolveReport()
    norm0 = np.sqrt(max(rho, 0.0))
    report.residual_norms.append(norm0)
    if cfg.store_iterates:
        report.iterates.append(recover(u))
    seminorm_floor = _BREAKDOWN_REL * max(float(r @ r), 1e-300)
    if rho < -seminorm_floor:
        raise BreakdownError("G B G^T inner product returned a negative norm")
    if rho <= seminorm_floor:
        # residual lies in the null space of GBG^T: one exact correction
        u = u + r
        report.iterations = 1
        report.residual_norms.append(0.0)
        report.termination = "tolerance"
        if cfg.store_iterates:
            report.iterates.append(recover(u))
        return u, recover(u), report
    tol_target = cfg.tol * norm0
    p = r.copy()
    wp = wr.copy()
    for _ in range(cfg.max_iterations):
        Ap = R.inverse_apply(wp) + p
        denom = float(wp @ Ap)
        if denom <= _BREAKDOWN_REL * max(abs(rho), 1e-300):
            if denom <= 0:
                report.termination = "breakdown"
                report.extras["breakdown_reason"] = "semidefinite inner product"
                break
        alpha = rho / denom
        u = u + alpha * p
        r = r - alpha * Ap
        wr = gbg(r)
        rho_new = float(r @ wr)
        if rho_new < -seminorm_floor:
            report.termination = "breakdown"
            report.extras["breakdown_reason"] = "negative seminorm"
            break
        rho_new = max(rho_new, 0.0)
        report.iterations += 1
        report.residual_norms.append(np.sqrt(rho_new))
        if cfg.store_iterates:
            report.iterates.append(recover(u))
        if np.sqrt(rho_new) <= tol_target:
            report.termination = "tolerance"
            break
        beta = rho_new / rho
        rho = rho_new
        p = r + beta * p
        wp = wr + beta * wp
    return u, recover(u), report


def lanczos_ritz(A, precond=None, k: int = 5, cfg: SolverConfig | None = None):
    """Largest Ritz pairs of the preconditioned operator via the CG-Lanczos run.

    Runs reorthogonalized PCG on a seeded random right-hand side and
    extracts Ritz data from its Lanczos coefficients.  If the run stops
    after fewer than k iterations the returned set is smaller and flagged
    (report.ritz_truncated).
    """
    cfg = cfg or SolverConfig()
    n = A.domain_dim if isinstance(A, Operator) else None
    if n is None:
        raise ValueError("lanczos_ritz needs an Operator to know the dimension")
    rng = np.random.default_rng(cfg.seed)
    rhs = rng.standard_normal(n)
    run_cfg = SolverConfig(
        max_iterations=cfg.max_iterations,
        tol=cfg.tol,
        reorthogonalize=True,
        ritz_extraction=k,
        seed=cfg.seed,
    )
    _, report = pcg(A, rhs, precond=precond, cfg=run_cfg)
    return report
