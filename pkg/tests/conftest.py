"""Shared builders for small assimilation instances used across the tests."""

from __future__ import annotations

import numpy as np

from varda import (AssimilationSetup, Lorenz96, Observation, PointSelection,
                   diagonal_covariance, isotropic_covariance, linearize)


def make_setup(formulation="weak", n=8, N=3, m_per=4, seed=0, dt=0.01,
               obs_times=None, model=None, correlated=True):
    """Small Lorenz-96 assimilation setup with synthetic observation values."""
    rng = np.random.default_rng(seed)
    model = model or Lorenz96(n=n, dt=dt)
    if correlated:
        B = isotropic_covariance(np.full(n, 0.4), 1.5)
        q_cov = isotropic_covariance(np.full(n, 0.2), 1.0)
    else:
        B = diagonal_covariance(np.full(n, 0.4))
        q_cov = diagonal_covariance(np.full(n, 0.2))
    R = diagonal_covariance(np.full(m_per, 0.3))
    idx = np.round(np.linspace(0, n, m_per, endpoint=False)).astype(int)
    observations = []
    for i in range(N + 1):
        if (obs_times is None and i >= 1) or (obs_times is not None and i in obs_times):
            observations.append(
                Observation(rng.normal(size=m_per), R, PointSelection(idx, n)))
        else:
            observations.append(Observation.empty())
    q_covs = [q_cov] * N if formulation == "weak" else None
    x_b = 8.0 + rng.standard_normal(n)
    return AssimilationSetup(formulation, model, x_b, B, observations,
                             model_error_covs=q_covs)


def make_subproblem(formulation="weak", **kwargs):
    """Setup linearized at the background trajectory."""
    setup = make_setup(formulation, **kwargs)
    if formulation == "strong":
        reference = setup.x_b.copy()
    else:
        reference = setup.propagate(setup.x_b).ravel()
    return linearize(setup, reference), setup


def random_spd(n, seed=0, spread=10.0):
    """Dense random SPD matrix with eigenvalues in [1, spread]."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.linspace(1.0, spread, n)
    return (Q * lam) @ Q.T
