"""Toy dynamical models and observation operators with exact TLM/adjoint.

Models advance the state over one window via a fixed number of internal
RK4 substeps.  Tangent-linear and adjoint maps differentiate the discrete
scheme exactly, so the standard Taylor and inner-product tests pass to
machine precision.
"""

from __future__ import annotations

import numpy as np

from . import _l96_kernels
from .operators import FunctionOperator, Operator

__all__ = [
    "ModelDivergenceError",
    "DynamicalModel",
    "Lorenz96",
    "LinearAdvection",
    "ObservationOperator",
    "PointSelection",
    "QuadraticPoint",
    "taylor_test",
]


class ModelDivergenceError(RuntimeError):
    """Model produced a non-finite state (blow-up)."""


class DynamicalModel:
    """One-window propagator with tangent-linear and adjoint capabilities."""

    variant: str
    n: int

    def step(self, x):
        """Advance the state over one window [t_{i-1}, t_i]."""
        x = np.asarray(x, dtype=float)
        out = self._step(x)
        if not np.all(np.isfinite(out)):
            raise ModelDivergenceError(f"{self.variant} step produced non-finite state")
        return out

    def tlm_apply(self, x_ref, delta):
        """Exact Jacobian of the discrete step at x_ref, applied to delta."""
        out = self._tlm(np.asarray(x_ref, dtype=float), np.asarray(delta, dtype=float))
        if not np.all(np.isfinite(out)):
            raise ModelDivergenceError(f"{self.variant} TLM produced non-finite output")
        return out

    def adjoint_apply(self, x_ref, w):
        """Transpose of the TLM at x_ref, applied to w."""
        out = self._adj(np.asarray(x_ref, dtype=float), np.asarray(w, dtype=float))
        if not np.all(np.isfinite(out)):
            raise ModelDivergenceError(f"{self.variant} adjoint produced non-finite output")
        return out

    def tlm_operator(self, x_ref) -> Operator:
        """TLM at a frozen reference state, as an Operator with adjoint."""
        x_ref = np.array(x_ref, dtype=float)
        return FunctionOperator(
            self.n, self.n,
            lambda d: self.tlm_apply(x_ref, d),
            lambda w: self.adjoint_apply(x_ref, w),
        )

    def _step(self, x):
        raise NotImplementedError

    def _tlm(self, x, d):
        raise NotImplementedError

    def _adj(self, x, w):
        raise NotImplementedError


class Lorenz96(DynamicalModel):
    """Lorenz-96 on a periodic ring, RK4 with dt per substep.

    dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + forcing.
    The constant state x = forcing is an equilibrium.
    """

    variant = "lorenz96"

    def __init__(self, n: int = 40, forcing: float = 8.0, dt: float = 0.05,
                 substeps: int = 1):
        if n < 4:
            raise ValueError("lorenz96 needs n >= 4")
        if substeps < 1:
            raise ValueError("substeps must be >= 1")
        self.n = n
        self.forcing = float(forcing)
        self.dt = float(dt)
        self.substeps = int(substeps)

    def _step(self, x):
        return _l96_kernels.step(x, self.dt, self.forcing, self.substeps)

    def _tlm(self, x, d):
        return _l96_kernels.tlm(x, d, self.dt, self.forcing, self.substeps)

    def _adj(self, x, w):
        return _l96_kernels.adjoint(x, w, self.dt, self.forcing, self.substeps)

    def tendency(self, x):
        return _l96_kernels._tendency_np(np.asarray(x, float), self.forcing)


class LinearAdvection(DynamicalModel):
    """Periodic index shift by one per window; linear, so TLM = step."""

    variant = "linear-advection"

    def __init__(self, n: int):
        if n < 1:
            raise ValueError("n must be positive")
        self.n = n

    def _step(self, x):
        return np.roll(x, 1)

    def _tlm(self, x, d):
        return np.roll(d, 1)

    def _adj(self, x, w):
        return np.roll(w, -1)


# ---------------------------------------------------------------------------
# Observation operators


class ObservationOperator:
    """Map from model space (dim n) to observation space (dim m <= n)."""

    variant: str

    def __init__(self, indices, n: int):
        indices = np.asarray(indices, dtype=int)
        if indices.size and (indices.min() < 0 or indices.max() >= n):
            raise ValueError(
                f"observation index out of range: indices must lie in [0, {n}), "
                f"got {indices.tolist()}"
            )
        self.indices = indices
        self.n = int(n)
        self.m = int(indices.size)

    def observe(self, x):
        raise NotImplementedError

    def jacobian_apply(self, x_ref, delta):
        raise NotImplementedError

    def adjoint_apply(self, x_ref, w):
        raise NotImplementedError

    def jacobian_operator(self, x_ref) -> Operator:
        x_ref = np.array(x_ref, dtype=float)
        return FunctionOperator(
            self.n, self.m,
            lambda d: self.jacobian_apply(x_ref, d),
            lambda w: self.adjoint_apply(x_ref, w),
        )


class PointSelection(ObservationOperator):
    """Observe the state at fixed grid indices."""

    variant = "point-selection"

    def observe(self, x):
        return np.asarray(x, dtype=float)[self.indices]

    def jacobian_apply(self, x_ref, delta):
        return np.asarray(delta, dtype=float)[self.indices]

    def adjoint_apply(self, x_ref, w):
        out = np.zeros(self.n)
        np.add.at(out, self.indices, np.asarray(w, dtype=float))
        return out


class QuadraticPoint(ObservationOperator):
    """Observe squared state values at fixed indices (mildly nonlinear)."""

    variant = "quadratic-point"

    def observe(self, x):
        xs = np.asarray(x, dtype=float)[self.indices]
        return xs ** 2

    def jacobian_apply(self, x_ref, delta):
        xr = np.asarray(x_ref, dtype=float)[self.indices]
        return 2.0 * xr * np.asarray(delta, dtype=float)[self.indices]

    def adjoint_apply(self, x_ref, w):
        out = np.zeros(self.n)
        xr = np.asarray(x_ref, dtype=float)[self.indices]
        np.add.at(out, self.indices, 2.0 * xr * np.asarray(w, dtype=float))
        return out


# ---------------------------------------------------------------------------
# TLM verification


def taylor_test(nonlinear, linear, x, delta,
                eps_schedule=(1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6),
                noise_floor=1e-13):
    """Convergence-order estimate for a tangent-linear map.

    Fits the slope of log ||N(x + eps d) - N(x) - eps L d|| against log eps.
    A slope near 2 signals a correct TLM.  Remainders at the machine-noise
    floor are excluded from the fit; if all remainders sit at the floor
    (exactly linear map) the result is reported as exact.

    Returns (slope, remainders); slope is None for the exact case.
    """
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    base = nonlinear(x)
    ld = linear(x, delta)
    scale = max(np.linalg.norm(base), np.linalg.norm(ld), 1.0)
    eps_used, rems = [], []
    for eps in eps_schedule:
        r = np.linalg.norm(nonlinear(x + eps * delta) - base - eps * ld)
        rems.append(r)
        if r > noise_floor * scale:
            eps_used.append(eps)
    usable = [(e, r) for e, r in zip(eps_schedule, rems) if e in eps_used]
    if len(usable) < 2:
        return None, np.asarray(rems)
    # drop the extreme decades; fit over the middle of the usable range
    if len(usable) > 3:
        usable = usable[1:-1]
    le = np.log([u[0] for u in usable])
    lr = np.log([u[1] for u in usable])
    slope = np.polyfit(le, lr, 1)[0]
    return float(slope), np.asarray(rems)
