"""Block preconditioners for the 3x3 augmented system and its solve drivers.

The augmented operator K couples the weights (R, D) with the constraint
blocks (H, F^{-1}); its negative Schur complement with respect to the
weights is the weak-state normal operator S.  Three preconditioners are
provided: block diagonal P_D, block triangular P_T (both needing an
approximation of S^{-1}), and the inexact constraint preconditioner P_C
(needing only F~ and D, never D^{-1}).

Extracting the state block from a truncated MINRES/GMRES run does not
inherit residual monotonicity: the underlying least-squares cost can
increase with the iteration count.  The safeguarded driver escalates the
iteration budget until the returned cost improves on the cost at s = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .krylov import SolverConfig, SolveReport, gmres, minres
from .operators import FunctionOperator, Operator, materialize_dense
from .precond import Ftilde, make_ftilde
from .problem import AssemblySystem, InnerSubproblem, assemble_normal

__all__ = [
    "SchurApprox",
    "BlockPreconditioner",
    "block_diagonal_preconditioner",
    "block_triangular_preconditioner",
    "constraint_preconditioner",
    "solve_saddle",
    "safeguarded_inner_solve",
]

SAFEGUARD_CAP_FACTOR = 4


@dataclass
class SchurApprox:
    """SPD approximation of the inverse weak-state normal operator."""
    operator: Operator
    provenance: str  # ftilde | lmp-composed | exact-dense

    def apply(self, v):
        return self.operator.apply(v)

    @staticmethod
    def from_ftilde(sub: InnerSubproblem, choice: str = "identity",
                    lmp: Operator | None = None) -> "SchurApprox":
        """F~ D F~^T, optionally wrapped with an LMP through the factor F~ D_1.

        With an LMP P built for the transformed operator, the composed
        action is (F~ D_1) P (F~ D_1)^T.
        """
        ft = make_ftilde(choice, coupling=sub.coupling)
        D = sub.D
        if lmp is None:
            def apply_s(v):
                return ft.apply(D.apply(ft.transpose_apply(v)))
            provenance = "ftilde"
        else:
            def apply_s(v):
                z = D.factor_transpose_apply(ft.transpose_apply(v))
                return ft.apply(D.factor_apply(lmp.apply(z)))
            provenance = "lmp-composed"
        op = FunctionOperator(sub.p, sub.p, apply_s, apply_s)
        return SchurApprox(op, provenance)

    @staticmethod
    def exact_dense(sub: InnerSubproblem) -> "SchurApprox":
        """Dense inverse of the weak-state normal operator (tests only)."""
        system = assemble_normal(sub, "weak-state")
        dense = materialize_dense(system.operator)
        inv = np.linalg.inv(dense)
        return SchurApprox(FunctionOperator(sub.p, sub.p, lambda v: inv @ v,
                                            lambda v: inv.T @ v), "exact-dense")


class BlockPreconditioner:
    """P_D, P_T, or P_C for the augmented system; applies the block inverse."""

    def __init__(self, variant: str, sub: InnerSubproblem,
                 schur: SchurApprox | None = None,
                 ftilde: Ftilde | None = None):
        if variant not in ("P_D", "P_T", "P_C"):
            raise ValueError(f"unknown block preconditioner variant {variant!r}")
        if variant in ("P_D", "P_T") and schur is None:
            raise ValueError(f"{variant} needs a Schur complement approximation")
        if variant == "P_C" and ftilde is None:
            raise ValueError("P_C needs an F~ approximation")
        self.variant = variant
        self.sub = sub
        self.schur = schur
        self.ftilde = ftilde
        self.m = sub.m
        self.p = sub.p
        self.dim = self.m + 2 * self.p

    @property
    def is_spd(self) -> bool:
        return self.variant == "P_D"

    def inverse_apply(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        m, p = self.m, self.p
        r1, r2, r3 = rhs[:m], rhs[m:m + p], rhs[m + p:]
        sub = self.sub
        if self.variant == "P_D":
            out1 = sub.R.inverse_apply(r1) if m else np.zeros(0)
            return np.concatenate([out1, sub.D.inverse_apply(r2), self.schur.apply(r3)])
        if self.variant == "P_T":
            t = self.schur.apply(r3)
            out1 = sub.R.inverse_apply(r1 - sub.h_apply(t)) if m else np.zeros(0)
            out2 = sub.D.inverse_apply(r2 - sub.coupling.f_inverse_apply(t))
            return np.concatenate([out1, out2, t])
        # P_C: [[R^{-1},0,0],[0,0,F~^T],[0,F~,-F~ D F~^T]]; no D^{-1} applies
        ft = self.ftilde
        out1 = sub.R.inverse_apply(r1) if m else np.zeros(0)
        out2 = ft.transpose_apply(r3)
        out3 = ft.apply(r2) - ft.apply(sub.D.apply(ft.transpose_apply(r3)))
        return np.concatenate([out1, out2, out3])

    @property
    def inverse_operator(self) -> Operator:
        sym = self.variant in ("P_D", "P_C")
        return FunctionOperator(self.dim, self.dim, self.inverse_apply,
                                self.inverse_apply if sym else None)


def block_diagonal_preconditioner(sub: InnerSubproblem, schur: SchurApprox):
    return BlockPreconditioner("P_D", sub, schur=schur)


def block_triangular_preconditioner(sub: InnerSubproblem, schur: SchurApprox):
    return BlockPreconditioner("P_T", sub, schur=schur)


def constraint_preconditioner(sub: InnerSubproblem, ftilde_choice: str = "identity"):
    ft = make_ftilde(ftilde_choice, coupling=sub.coupling)
    return BlockPreconditioner("P_C", sub, ftilde=ft)


def solve_saddle(system: AssemblySystem, precond: BlockPreconditioner,
                 solver: str = "gmres", cfg: SolverConfig | None = None):
    """Preconditioned solve of the augmented system, returning the s block.

    minres is restricted to the SPD P_D; P_T and P_C route through gmres.
    The report's cost history records the quadratic least-squares cost at
    the extracted s per iteration -- explicitly not guaranteed monotone.
    """
    if system.form != "augmented":
        raise ValueError("solve_saddle needs an augmented AssemblySystem")
    cfg = cfg or SolverConfig()
    sub = system.subproblem

    def monitor(x):
        return sub.quadratic_cost(system.recover(x))

    if solver == "minres":
        if not precond.is_spd:
            raise ValueError("minres requires the SPD block diagonal preconditioner P_D")
        x, report = minres(system.operator, system.rhs,
                           precond=precond.inverse_apply, cfg=cfg, monitor=monitor)
    elif solver == "gmres":
        x, report = gmres(system.operator, system.rhs,
                          precond=precond.inverse_apply, cfg=cfg, monitor=monitor)
    else:
        raise ValueError(f"unknown saddle solver {solver!r}")
    return system.recover(x), report


def safeguarded_inner_solve(system: AssemblySystem, precond: BlockPreconditioner,
                            solver: str = "gmres", cfg: SolverConfig | None = None):
    """Saddle solve with a cost safeguard on the extracted state block.

    Doubles the iteration budget until the quadratic cost at the returned
    s improves on the cost at s = 0, up to a hard cap of 4x the original
    budget; at the cap the best-cost iterate seen is returned.  If nothing
    improves, returns s = 0 with a flag.  Each safeguard check costs one
    cost evaluation on top of the per-iteration monitoring.
    """
    cfg = cfg or SolverConfig()
    sub = system.subproblem
    cost_at_zero = sub.quadratic_cost(np.zeros(sub.p))
    budgets = []
    budget = cfg.max_iterations
    cap = SAFEGUARD_CAP_FACTOR * cfg.max_iterations
    best_s, best_cost, best_report = None, np.inf, None
    while True:
        budgets.append(budget)
        run_cfg = SolverConfig(
            max_iterations=budget, tol=cfg.tol,
            reorthogonalize=cfg.reorthogonalize,
            store_iterates=True, seed=cfg.seed)
        s, report = solve_saddle(system, precond, solver=solver, cfg=run_cfg)
        # best iterate across the run (monitor history aligns with iterates)
        costs = np.asarray(report.cost_history)
        idx = int(np.argmin(costs))
        run_best_cost = float(costs[idx])
        if run_best_cost < best_cost:
            best_cost = run_best_cost
            best_s = system.recover(report.iterates[idx])
            best_report = report
        final_cost = sub.quadratic_cost(s)
        if final_cost <= cost_at_zero:
            report.extras["safeguard_budgets"] = budgets
            report.extras["safeguard_cost_at_zero"] = cost_at_zero
            report.extras["safeguard_final_cost"] = final_cost
            return s, report
        if budget >= cap:
            break
        budget = min(2 * budget, cap)
    report = best_report or SolveReport()
    report.extras["safeguard_budgets"] = budgets
    report.extras["safeguard_cost_at_zero"] = cost_at_zero
    if best_cost <= cost_at_zero:
        report.extras["safeguard_final_cost"] = best_cost
        return best_s, report
    report.extras["safeguard_failed"] = True
    report.extras["safeguard_final_cost"] = cost_at_zero
    return np.zeros(sub.p), report
