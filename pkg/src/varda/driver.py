"""Truncated Gauss-Newton outer loop, twin experiments, and diagnostics.

The outer loop repeatedly linearizes the nonlinear cost, solves the
resulting quadratic subproblem with a truncated Krylov method along one of
six routes (primal normal equations, primal least squares, observation-space
dual, or the augmented saddle system), and applies the increment.  Spectral
information extracted from one inner solve can be recycled into a
limited-memory preconditioner for the next.

Twin experiments generate synthetic observations from a known truth run so
that analysis error is measurable; configuration is INI-style and results
are emitted as a JSON summary plus a flat per-iteration CSV.
"""

from __future__ import annotations

import configparser
import csv
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .krylov import BreakdownError, SolverConfig, cgls, gmres, pcg, rpcg
from .models import (DynamicalModel, LinearAdvection, Lorenz96,
                     ObservationOperator, PointSelection, QuadraticPoint)
from .operators import (IdentityOperator, SpdOperator, diagonal_covariance,
                        isotropic_covariance, materialize_dense)
from .precond import (build_qn_lmp, build_ritz_lmp, choose_theta,
                      first_level_transform)
from .problem import (AssemblySystem, AssimilationSetup, Observation,
                      assemble_augmented, assemble_dual, assemble_normal,
                      cost, gradient, linearize)
from .saddle import (SchurApprox, block_diagonal_preconditioner,
                     block_triangular_preconditioner, safeguarded_inner_solve,
                     solve_saddle)

__all__ = [
    "ROUTES",
    "SECOND_LEVELS",
    "TgnConfig",
    "TwinExperiment",
    "ExperimentConfig",
    "run_twin",
    "tgn_run",
    "oracle_run",
    "emit_report",
    "verify_model",
]

ROUTES = ("primal-pcg", "primal-cgls", "dual-rpcg", "dual-gmres",
          "saddle-minres", "saddle-gmres")
SECOND_LEVELS = ("none", "ritz-lmp", "qn-lmp", "spectral-lmp")
THETA_MODES = ("unit", "condition-min")


@dataclass
class TgnConfig:
    """Outer-loop configuration: route, budgets, preconditioning, safeguard."""

    outer_iterations: int = 3
    inner: SolverConfig = field(default_factory=SolverConfig)
    route: str = "primal-pcg"
    second_level: str = "none"
    safeguard: bool = True
    theta_mode: str = "unit"
    ftilde: str = "identity"

    def __post_init__(self):
        if self.outer_iterations < 1:
            raise ValueError("outer_iterations must be >= 1")
        if self.route not in ROUTES:
            raise ValueError(f"unknown route {self.route!r}; choose from {ROUTES}")
        if self.second_level not in SECOND_LEVELS:
            raise ValueError(
                f"unknown second level {self.second_level!r}; choose from {SECOND_LEVELS}")
        if self.theta_mode not in THETA_MODES:
            raise ValueError(f"unknown theta mode {self.theta_mode!r}")
        if self.second_level != "none" and self.route != "primal-pcg":
            raise ValueError(
                "second-level preconditioners recycle spectral data from PCG "
                "inner solves; they require route 'primal-pcg'")

    def validate_against(self, setup: AssimilationSetup):
        if self.route.startswith("saddle") and setup.formulation != "weak":
            raise ValueError(f"route {self.route!r} needs the weak formulation")
        if self.route.startswith("dual") and setup.m == 0:
            raise ValueError(f"route {self.route!r} needs at least one observation")


# ---------------------------------------------------------------------------
# Inner solves, one per route


def _second_level_precond(cfg: TgnConfig, prev_report, system: AssemblySystem):
    """LMP for this outer iteration from the previous inner solve's report."""
    dim = system.operator.domain_dim
    if cfg.second_level == "none" or prev_report is None:
        return IdentityOperator(dim), {"kind": "identity", "rank": 0, "theta": 1.0}
    theta = 1.0
    if prev_report.ritz_values is not None and prev_report.ritz_values.size:
        theta = choose_theta(prev_report.ritz_values, cfg.theta_mode)
    if cfg.second_level == "qn-lmp":
        lmp = build_qn_lmp(system.operator, prev_report, theta)
        rank = 0 if isinstance(lmp, IdentityOperator) else lmp.ell
    else:
        spectral = cfg.second_level == "spectral-lmp"
        lmp = build_ritz_lmp(prev_report, theta, spectral=spectral,
                             A=None if spectral else system.operator)
        rank = 0 if isinstance(lmp, IdentityOperator) else lmp.ell
    return lmp, {"kind": cfg.second_level, "rank": int(rank), "theta": float(theta)}


def _inner_solver_config(cfg: TgnConfig) -> SolverConfig:
    want_ritz = cfg.second_level in ("ritz-lmp", "spectral-lmp")
    return SolverConfig(
        max_iterations=cfg.inner.max_iterations,
        tol=cfg.inner.tol,
        reorthogonalize=cfg.inner.reorthogonalize or want_ritz,
        monitor_quadratic_cost=True,
        ritz_extraction=cfg.inner.max_iterations if want_ritz else 0,
        store_search_directions=cfg.second_level == "qn-lmp",
        store_iterates=cfg.inner.store_iterates,
        seed=cfg.inner.seed,
    )


def _solve_inner(sub, cfg: TgnConfig, prev_report):
    """One truncated inner solve; returns (increment s, report, info dict)."""
    inner_cfg = _inner_solver_config(cfg)
    info = {}
    if cfg.route == "primal-pcg":
        system = first_level_transform(sub)
        lmp, lmp_info = _second_level_precond(cfg, prev_report, system)
        info["preconditioner"] = lmp_info
        z, report = pcg(system.operator, system.rhs, precond=lmp, cfg=inner_cfg)
        return system.recover(z), report, info
    if cfg.route == "primal-cgls":
        s, report = cgls(sub.j_operator, sub.b, W=sub.W, cfg=inner_cfg)
        return s, report, info
    if cfg.route == "dual-rpcg":
        system = assemble_dual(sub)
        _, s, report = rpcg(system, cfg=inner_cfg)
        return s, report, info
    if cfg.route == "dual-gmres":
        system = assemble_dual(sub)

        def monitor(u):
            return sub.quadratic_cost(system.recover(u))

        u, report = gmres(system.operator, system.rhs, cfg=inner_cfg,
                          monitor=monitor)
        return system.recover(u), report, info
    # saddle routes
    system = assemble_augmented(sub)
    schur = SchurApprox.from_ftilde(sub, cfg.ftilde)
    if cfg.route == "saddle-minres":
        precond = block_diagonal_preconditioner(sub, schur)
        solver = "minres"
    else:
        precond = block_triangular_preconditioner(sub, schur)
        solver = "gmres"
    if cfg.safeguard:
        s, report = safeguarded_inner_solve(system, precond, solver=solver,
                                            cfg=inner_cfg)
        info["safeguard"] = {
            "budgets": report.extras.get("safeguard_budgets"),
            "failed": bool(report.extras.get("safeguard_failed", False)),
        }
    else:
        s, report = solve_saddle(system, precond, solver=solver, cfg=inner_cfg)
    return s, report, info


def tgn_run(setup: AssimilationSetup, cfg: TgnConfig):
    """Truncated Gauss-Newton: linearize, inner-solve, step, recycle.

    Returns (analysis x, diagnostics dict).  The safeguard guarantees the
    accepted increment never increases the local quadratic cost relative to
    s = 0 (falling back to s = 0 if necessary); an inner breakdown halts
    the outer loop with partial diagnostics.
    """
    cfg.validate_against(setup)
    if setup.formulation == "strong":
        x = setup.x_b.copy()
    else:
        x = setup.propagate(setup.x_b).ravel()
    diagnostics = {
        "formulation": setup.formulation,
        "route": cfg.route,
        "second_level": cfg.second_level,
        "safeguard": cfg.safeguard,
        "outer_requested": cfg.outer_iterations,
        "halted_on_breakdown": False,
        "outers": [],
    }
    prev_report = None
    for k in range(cfg.outer_iterations):
        t0 = time.perf_counter()
        sub = linearize(setup, x)
        cost_before = cost(setup, x)
        grad_before = float(np.linalg.norm(gradient(setup, x)))
        q_zero = sub.quadratic_cost(np.zeros(sub.j_operator.domain_dim))
        entry = {
            "outer_idx": k,
            "cost_before": float(cost_before),
            "gradient_norm_before": grad_before,
            "quadratic_cost_at_zero": float(q_zero),
        }
        broke = False
        try:
            s, report, info = _solve_inner(sub, cfg, prev_report)
        except BreakdownError as exc:
            entry["breakdown"] = str(exc)
            diagnostics["outers"].append(entry)
            diagnostics["halted_on_breakdown"] = True
            break
        entry.update(info)
        broke = report.termination == "breakdown"
        q_step = sub.quadratic_cost(s)
        if cfg.safeguard and not cfg.route.startswith("saddle") and q_step > q_zero:
            # Krylov routes decrease the quadratic cost monotonically in
            # exact arithmetic; this fallback covers numerical failure.
            s = np.zeros_like(s)
            q_step = q_zero
            entry["safeguard"] = {"failed": True}
        x = x + s
        entry.update({
            "inner_iterations": int(report.iterations),
            "termination": report.termination,
            "residual_norms": [float(r) for r in report.residual_norms],
            "quadratic_costs": [float(c) for c in report.cost_history],
            "quadratic_cost_after": float(q_step),
            "step_norm": float(np.linalg.norm(s)),
            "cost_after": float(cost(setup, x)),
            "seconds": time.perf_counter() - t0,
        })
        if report.ritz_values is not None:
            entry["ritz_values"] = [float(v) for v in report.ritz_values]
        diagnostics["outers"].append(entry)
        prev_report = report
        if broke:
            diagnostics["halted_on_breakdown"] = True
            break
    diagnostics["final_cost"] = float(cost(setup, x))
    diagnostics["final_gradient_norm"] = float(np.linalg.norm(gradient(setup, x)))
    diagnostics["total_inner_iterations"] = int(
        sum(e.get("inner_iterations", 0) for e in diagnostics["outers"]))
    return x, diagnostics


def oracle_run(setup: AssimilationSetup, outer_iterations: int = 3):
    """Gauss-Newton with dense, exact inner solves (small instances only).

    Materializes the normal operator and solves it directly each outer
    iteration; serves as the reference the iterative routes are checked
    against.
    """
    if setup.formulation == "strong":
        x = setup.x_b.copy()
        form = "strong-primal"
    else:
        x = setup.propagate(setup.x_b).ravel()
        form = "weak-state"
    costs = [float(cost(setup, x))]
    for _ in range(outer_iterations):
        sub = linearize(setup, x)
        system = assemble_normal(sub, form)
        dense = materialize_dense(system.operator)
        s = np.linalg.solve(dense, system.rhs)
        x = x + system.recover(s)
        costs.append(float(cost(setup, x)))
    return x, {"costs": costs, "final_gradient_norm":
               float(np.linalg.norm(gradient(setup, x)))}


# ---------------------------------------------------------------------------
# Twin experiments and configuration


@dataclass
class ExperimentConfig:
    """Flat view of the INI configuration with all defaults filled in."""

    # [model]
    model_kind: str = "lorenz96"
    n: int = 40
    forcing: float = 8.0
    dt: float = 0.05
    substeps: int = 1
    spinup_steps: int = 100
    # [observations]
    obs_count: int = 20
    obs_operator: str = "point-selection"
    obs_first: int = 1
    obs_every: int = 1
    # [covariances]
    background_stddev: float = 0.5
    background_length_scale: float = 2.0
    observation_stddev: float = 0.2
    model_error_stddev: float = 0.05
    model_error_length_scale: float = 1.0
    # [solver]
    route: str = "primal-pcg"
    max_inner: int = 10
    tol: float = 1e-8
    reorthogonalize: bool = False
    outer: int = 3
    # [preconditioner]
    second_level: str = "none"
    theta_mode: str = "unit"
    ftilde: str = "identity"
    safeguard: bool = True
    # [experiment]
    formulation: str = "strong"
    window_length: int = 10
    seed: int = 1234

    _SCHEMA = {
        "model": {"kind": ("model_kind", str), "n": ("n", int),
                  "forcing": ("forcing", float), "dt": ("dt", float),
                  "substeps": ("substeps", int),
                  "spinup_steps": ("spinup_steps", int)},
        "observations": {"count": ("obs_count", int),
                         "operator": ("obs_operator", str),
                         "first": ("obs_first", int),
                         "every": ("obs_every", int)},
        "covariances": {"background_stddev": ("background_stddev", float),
                        "background_length_scale": ("background_length_scale", float),
                        "observation_stddev": ("observation_stddev", float),
                        "model_error_stddev": ("model_error_stddev", float),
                        "model_error_length_scale": ("model_error_length_scale", float)},
        "solver": {"route": ("route", str), "max_inner": ("max_inner", int),
                   "tol": ("tol", float),
                   "reorthogonalize": ("reorthogonalize", bool),
                   "outer": ("outer", int)},
        "preconditioner": {"second_level": ("second_level", str),
                           "theta_mode": ("theta_mode", str),
                           "ftilde": ("ftilde", str),
                           "safeguard": ("safeguard", bool)},
        "experiment": {"formulation": ("formulation", str),
                       "window_length": ("window_length", int),
                       "seed": ("seed", int)},
    }

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        read = parser.read(str(path))
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
        out = cls()
        for section in parser.sections():
            if section not in cls._SCHEMA:
                raise ValueError(f"unknown config section [{section}]")
            schema = cls._SCHEMA[section]
            for key, raw in parser[section].items():
                if key not in schema:
                    raise ValueError(f"unknown key {key!r} in section [{section}]")
                attr, typ = schema[key]
                if typ is bool:
                    value = parser[section].getboolean(key)
                else:
                    value = typ(raw)
                setattr(out, attr, value)
        return out

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if not k.startswith("_")}

    def build_model(self) -> DynamicalModel:
        if self.model_kind == "lorenz96":
            return Lorenz96(n=self.n, forcing=self.forcing, dt=self.dt,
                            substeps=self.substeps)
        if self.model_kind == "linear-advection":
            return LinearAdvection(self.n)
        raise ValueError(f"unknown model kind {self.model_kind!r}")

    def build_obsop(self) -> ObservationOperator:
        if not (0 < self.obs_count <= self.n):
            raise ValueError("observation count must lie in [1, n]")
        idx = np.round(np.linspace(0, self.n, self.obs_count,
                                   endpoint=False)).astype(int)
        if self.obs_operator == "point-selection":
            return PointSelection(idx, self.n)
        if self.obs_operator == "quadratic-point":
            return QuadraticPoint(idx, self.n)
        raise ValueError(f"unknown observation operator {self.obs_operator!r}")

    def tgn_config(self) -> TgnConfig:
        return TgnConfig(
            outer_iterations=self.outer,
            inner=SolverConfig(max_iterations=self.max_inner, tol=self.tol,
                               reorthogonalize=self.reorthogonalize),
            route=self.route,
            second_level=self.second_level,
            safeguard=self.safeguard,
            theta_mode=self.theta_mode,
            ftilde=self.ftilde,
        )


def _covariance(n: int, stddev: float, length_scale: float) -> SpdOperator:
    sigma = np.full(n, stddev)
    if length_scale > 0:
        return isotropic_covariance(sigma, length_scale)
    return diagonal_covariance(sigma)


@dataclass
class TwinExperiment:
    """Synthetic problem with known truth, so analysis error is measurable."""

    setup: AssimilationSetup
    truth: np.ndarray  # (N+1, n) trajectory
    seed: int

    @property
    def background_error(self) -> float:
        return float(np.linalg.norm(self.setup.x_b - self.truth[0]))

    def analysis_error(self, x) -> float:
        """Initial-condition error of an analysis (strong x0 or weak trajectory)."""
        x = np.asarray(x, dtype=float)
        x0 = x if x.size == self.truth.shape[1] else x.reshape(self.truth.shape)[0]
        return float(np.linalg.norm(x0 - self.truth[0]))


def run_twin(config: ExperimentConfig) -> TwinExperiment:
    """Truth run, noisy synthetic observations, perturbed background.

    Deterministic for a fixed seed: the truth spin-up, observation noise,
    and background perturbation all draw from one seeded generator in a
    fixed order.
    """
    rng = np.random.default_rng(config.seed)
    model = config.build_model()
    n, N = config.n, config.window_length

    x = np.full(n, config.forcing) + 0.01 * rng.standard_normal(n)
    for _ in range(config.spinup_steps):
        x = model.step(x)
    truth = np.empty((N + 1, n))
    truth[0] = x
    for i in range(1, N + 1):
        truth[i] = model.step(truth[i - 1])

    B = _covariance(n, config.background_stddev, config.background_length_scale)
    obsop = config.build_obsop()
    R = diagonal_covariance(np.full(obsop.m, config.observation_stddev))
    observations = []
    for i in range(N + 1):
        observed = (i >= config.obs_first
                    and (i - config.obs_first) % config.obs_every == 0)
        if observed:
            noise = R.factor_apply(rng.standard_normal(obsop.m))
            observations.append(Observation(obsop.observe(truth[i]) + noise, R, obsop))
        else:
            observations.append(Observation.empty())

    x_b = truth[0] + B.factor_apply(rng.standard_normal(n))
    q_covs = None
    if config.formulation == "weak":
        Q = _covariance(n, config.model_error_stddev,
                        config.model_error_length_scale)
        q_covs = [Q] * N
    setup = AssimilationSetup(config.formulation, model, x_b, B,
                              observations, model_error_covs=q_covs)
    return TwinExperiment(setup, truth, config.seed)


# ---------------------------------------------------------------------------
# Report emission


def emit_report(diagnostics: dict, out_dir, config: ExperimentConfig | None = None):
    """Write summary.json and iterations.csv; returns the two paths.

    The CSV holds one row per recorded inner residual (iteration 0
    included): outer_idx, inner_idx, residual_norm, quadratic_cost.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = dict(diagnostics)
    if config is not None:
        summary["config"] = config.to_dict()
    json_path = out_dir / "summary.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    csv_path = out_dir / "iterations.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["outer_idx", "inner_idx", "residual_norm",
                         "quadratic_cost"])
        for entry in diagnostics.get("outers", []):
            residuals = entry.get("residual_norms", [])
            costs = entry.get("quadratic_costs", [])
            for j, res in enumerate(residuals):
                qc = costs[j] if j < len(costs) else ""
                writer.writerow([entry["outer_idx"], j, res, qc])
    return json_path, csv_path


def verify_model(config: ExperimentConfig, seed: int | None = None) -> dict:
    """TLM/adjoint/gradient consistency checks for the configured model."""
    from .models import taylor_test

    rng = np.random.default_rng(config.seed if seed is None else seed)
    model = config.build_model()
    n = config.n
    x = np.full(n, config.forcing) + rng.standard_normal(n)

    adjoint_errors = []
    for _ in range(20):
        u, w = rng.standard_normal(n), rng.standard_normal(n)
        lhs = float(model.tlm_apply(x, u) @ w)
        rhs = float(u @ model.adjoint_apply(x, w))
        adjoint_errors.append(abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))

    slope, _ = taylor_test(model.step, model.tlm_apply, x,
                           rng.standard_normal(n))

    twin = run_twin(config)
    setup = twin.setup
    x_ref = (setup.x_b.copy() if config.formulation == "strong"
             else setup.propagate(setup.x_b).ravel())
    g = gradient(setup, x_ref)
    d = rng.standard_normal(x_ref.size)
    d /= np.linalg.norm(d)
    eps = 1e-5
    fd = (cost(setup, x_ref + eps * d) - cost(setup, x_ref - eps * d)) / (2 * eps)
    grad_err = abs(fd - float(g @ d)) / max(abs(fd), 1e-300)

    return {
        "adjoint_max_relative_error": float(max(adjoint_errors)),
        "taylor_slope": None if slope is None else float(slope),
        "gradient_fd_relative_error": float(grad_err),
    }
