"""Baseline two-state Kalman filter over the clock residuals.

The measurement model is linear (stacked ones), so the "extended" filter
is a plain Kalman filter here; it has no notion of an attack and follows
whatever common-mode offset is injected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..clock import transition_matrix


@dataclass(frozen=True)
class StateTrajectory:
    """Clock states x_0 .. x_K; row 0 is the prior epoch before the first measurement."""

    states: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2 or states.shape[1] != 2:
            raise ValueError("states must have shape (K+1, 2)")
        if not np.all(np.isfinite(states)):
            raise ValueError("state trajectory contains non-finite values")
        object.__setattr__(self, "states", states)

    def __len__(self):
        return len(self.states)

    @property
    def bias_m(self) -> np.ndarray:
        """Bias at the measurement epochs (prior epoch dropped)."""
        return self.states[1:, 0]

    @property
    def drift_mps(self) -> np.ndarray:
        return self.states[1:, 1]


def _per_epoch(mat, n, name):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim == 2:
        return np.broadcast_to(mat, (n,) + mat.shape)
    if mat.shape[0] != n:
        raise ValueError(f"{name} has {mat.shape[0]} entries for {n} epochs")
    return mat


def ekf_run(residuals, Q, dt_s: float, x0, P0, R=None) -> StateTrajectory:
    """Filter the residual epochs.

    Args:
        residuals: sequence of ResidualEpoch (z, H and channel variances).
        Q: process noise, 2x2 or one 2x2 per epoch.
        dt_s: epoch interval.
        x0, P0: prior mean and covariance of the state one interval
            before the first measurement.
        R: optional per-epoch measurement covariances overriding the
            variances carried by the residuals.

    Returns:
        StateTrajectory with K+1 rows (prior then filtered states).
    """
    n = len(residuals)
    if n < 1:
        raise ValueError("need at least one epoch")
    Qs = _per_epoch(Q, n, "Q")
    F = transition_matrix(dt_s)
    x = np.asarray(x0, dtype=float).copy()
    P = np.asarray(P0, dtype=float).copy()
    out = np.empty((n + 1, 2))
    out[0] = x
    for k, res in enumerate(residuals):
        x = F @ x
        P = F @ P @ F.T + Qs[k]
        Rk = res.R if R is None else np.asarray(R[k], dtype=float)
        S = res.h @ P @ res.h.T + Rk
        try:
            gain = np.linalg.solve(S, res.h @ P).T
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"singular innovation covariance at epoch {k}") from exc
        x = x + gain @ (res.z - res.h @ x)
        # Joseph form keeps P symmetric PSD
        ikh = np.eye(2) - gain @ res.h
        P = ikh @ P @ ikh.T + gain @ Rk @ gain.T
        out[k + 1] = x
    return StateTrajectory(out)
