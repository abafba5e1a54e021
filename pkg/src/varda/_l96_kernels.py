"""Lorenz-96 RK4 kernels: nonlinear step, exact tangent-linear, exact adjoint.

These are the hot inner loops of every model/adjoint application, so both a
numba @njit variant and a pure numpy variant exist; see _accel for the
selection flag.  The tangent-linear and adjoint differentiate the discrete
RK4 scheme exactly (discretize-then-differentiate), so the adjoint identity
holds to machine precision.

Benchmark: benchmarks/bench_lorenz96.py compares the two paths.
"""

import numpy as np

from ._accel import NUMBA_ENABLED, njit

# ---------------------------------------------------------------------------
# numpy path (np.roll formulation)


def _tendency_np(x, forcing):
    return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + forcing


def _tendency_tlm_np(x, dx):
    return (
        (np.roll(dx, -1) - np.roll(dx, 2)) * np.roll(x, 1)
        + (np.roll(x, -1) - np.roll(x, 2)) * np.roll(dx, 1)
        - dx
    )


def _tendency_adj_np(x, w):
    a = np.roll(x, 1) * w          # x_{i-1} w_i
    b = (np.roll(x, -1) - np.roll(x, 2)) * w
    return np.roll(a, 1) - np.roll(a, -2) + np.roll(b, -1) - w


def _rk4_stages_np(x, h, forcing):
    k1 = _tendency_np(x, forcing)
    x2 = x + 0.5 * h * k1
    k2 = _tendency_np(x2, forcing)
    x3 = x + 0.5 * h * k2
    k3 = _tendency_np(x3, forcing)
    x4 = x + h * k3
    k4 = _tendency_np(x4, forcing)
    return (x, x2, x3, x4), x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_np(x, dt, forcing, substeps):
    out = x.copy()
    for _ in range(substeps):
        _, out = _rk4_stages_np(out, dt, forcing)
    return out


def tlm_np(x, dx, dt, forcing, substeps):
    xc = x.copy()
    d = dx.copy()
    h = dt
    for _ in range(substeps):
        (x1, x2, x3, x4), xnext = _rk4_stages_np(xc, h, forcing)
        dk1 = _tendency_tlm_np(x1, d)
        dk2 = _tendency_tlm_np(x2, d + 0.5 * h * dk1)
        dk3 = _tendency_tlm_np(x3, d + 0.5 * h * dk2)
        dk4 = _tendency_tlm_np(x4, d + h * dk3)
        d = d + (h / 6.0) * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4)
        xc = xnext
    return d


def adjoint_np(x, w, dt, forcing, substeps):
    h = dt
    # forward sweep storing per-substep stage states
    stages = []
    xc = x.copy()
    for _ in range(substeps):
        st, xc = _rk4_stages_np(xc, h, forcing)
        stages.append(st)
    wb = w.copy()
    for x1, x2, x3, x4 in reversed(stages):
        dk1b = (h / 6.0) * wb
        dk2b = (h / 3.0) * wb
        dk3b = (h / 3.0) * wb
        dk4b = (h / 6.0) * wb
        acc = wb.copy()
        t4 = _tendency_adj_np(x4, dk4b)
        acc += t4
        dk3b = dk3b + h * t4
        t3 = _tendency_adj_np(x3, dk3b)
        acc += t3
        dk2b = dk2b + 0.5 * h * t3
        t2 = _tendency_adj_np(x2, dk2b)
        acc += t2
        dk1b = dk1b + 0.5 * h * t2
        t1 = _tendency_adj_np(x1, dk1b)
        acc += t1
        wb = acc
    return wb


# ---------------------------------------------------------------------------
# numba path (explicit modular-index loops)


@njit
def _tendency_nb(x, forcing):
    n = x.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = (x[(i + 1) % n] - x[(i - 2) % n]) * x[(i - 1) % n] - x[i] + forcing
    return out


@njit
def _tendency_tlm_nb(x, dx):
    n = x.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = (
            (dx[(i + 1) % n] - dx[(i - 2) % n]) * x[(i - 1) % n]
            + (x[(i + 1) % n] - x[(i - 2) % n]) * dx[(i - 1) % n]
            - dx[i]
        )
    return out


@njit
def _tendency_adj_nb(x, w):
    n = x.shape[0]
    out = np.empty(n)
    for j in range(n):
        out[j] = (
            x[(j - 2) % n] * w[(j - 1) % n]
            - x[(j + 1) % n] * w[(j + 2) % n]
            + (x[(j + 2) % n] - x[(j - 1) % n]) * w[(j + 1) % n]
            - w[j]
        )
    return out


@njit
def step_nb(x, dt, forcing, substeps):
    out = x.copy()
    for _ in range(substeps):
        k1 = _tendency_nb(out, forcing)
        k2 = _tendency_nb(out + 0.5 * dt * k1, forcing)
        k3 = _tendency_nb(out + 0.5 * dt * k2, forcing)
        k4 = _tendency_nb(out + dt * k3, forcing)
        out = out + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return out


@njit
def tlm_nb(x, dx, dt, forcing, substeps):
    xc = x.copy()
    d = dx.copy()
    h = dt
    for _ in range(substeps):
        k1 = _tendency_nb(xc, forcing)
        x2 = xc + 0.5 * h * k1
        k2 = _tendency_nb(x2, forcing)
        x3 = xc + 0.5 * h * k2
        k3 = _tendency_nb(x3, forcing)
        x4 = xc + h * k3
        k4 = _tendency_nb(x4, forcing)
        dk1 = _tendency_tlm_nb(xc, d)
        dk2 = _tendency_tlm_nb(x2, d + 0.5 * h * dk1)
        dk3 = _tendency_tlm_nb(x3, d + 0.5 * h * dk2)
        dk4 = _tendency_tlm_nb(x4, d + h * dk3)
        d = d + (h / 6.0) * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4)
        xc = xc + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return d


@njit
def adjoint_nb(x, w, dt, forcing, substeps):
    n = x.shape[0]
    h = dt
    x1s = np.empty((substeps, n))
    x2s = np.empty((substeps, n))
    x3s = np.empty((substeps, n))
    x4s = np.empty((substeps, n))
    xc = x.copy()
    for s in range(substeps):
        k1 = _tendency_nb(xc, forcing)
        x2 = xc + 0.5 * h * k1
        k2 = _tendency_nb(x2, forcing)
        x3 = xc + 0.5 * h * k2
        k3 = _tendency_nb(x3, forcing)
        x4 = xc + h * k3
        k4 = _tendency_nb(x4, forcing)
        x1s[s] = xc
        x2s[s] = x2
        x3s[s] = x3
        x4s[s] = x4
        xc = xc + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    wb = w.copy()
    for s in range(substeps - 1, -1, -1):
        dk4b = (h / 6.0) * wb
        t4 = _tendency_adj_nb(x4s[s], dk4b)
        dk3b = (h / 3.0) * wb + h * t4
        t3 = _tendency_adj_nb(x3s[s], dk3b)
        dk2b = (h / 3.0) * wb + 0.5 * h * t3
        t2 = _tendency_adj_nb(x2s[s], dk2b)
        dk1b = (h / 6.0) * wb + 0.5 * h * t2
        t1 = _tendency_adj_nb(x1s[s], dk1b)
        wb = wb + t4 + t3 + t2 + t1
    return wb


if NUMBA_ENABLED:
    step, tlm, adjoint = step_nb, tlm_nb, adjoint_nb
else:
    step, tlm, adjoint = step_np, tlm_np, adjoint_np

BACKENDS = {
    "numpy": (step_np, tlm_np, adjoint_np),
    "numba": (step_nb, tlm_nb, adjoint_nb),
}
