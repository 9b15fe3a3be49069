"""Two-state receiver clock model (bias and drift, both in meters).

Process noise follows the standard two-state oscillator model driven by
the Allan-variance coefficients h0 (white frequency) and h_-2 (random-walk
frequency). All clock quantities are scaled by the speed of light so the
state is [c*b, c*bdot] in m and m/s.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s

# temperature-compensated crystal oscillator
TCXO_H0 = 9.4e-20  # s
TCXO_H_NEG2 = 3.8e-21  # 1/s


@dataclass(frozen=True)
class ClockState:
    bias_m: float
    drift_mps: float

    def __post_init__(self):
        if not (np.isfinite(self.bias_m) and np.isfinite(self.drift_mps)):
            raise ValueError("clock state must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.bias_m, self.drift_mps], dtype=float)

    @classmethod
    def from_array(cls, x) -> ClockState:
        return cls(float(x[0]), float(x[1]))


@dataclass(frozen=True)
class ClockModelParams:
    """Oscillator description used to build the process noise.

    Attributes:
        h0: white-frequency coefficient (s).
        h_neg2: random-walk-frequency coefficient (1/s).
        dt_s: discretization interval (s).
    """

    h0: float = TCXO_H0
    h_neg2: float = TCXO_H_NEG2
    dt_s: float = 1.0

    def __post_init__(self):
        if not self.dt_s > 0:
            raise ValueError(f"dt_s must be positive, got {self.dt_s}")
        if self.h0 < 0 or self.h_neg2 < 0:
            raise ValueError("Allan coefficients must be non-negative")


def transition_matrix(dt_s: float) -> np.ndarray:
    """Discrete transition [[1, dt], [0, 1]] for a bias/drift pair."""
    if not dt_s > 0:
        raise ValueError(f"dt_s must be positive, got {dt_s}")
    return np.array([[1.0, dt_s], [0.0, 1.0]])


def process_noise(params: ClockModelParams) -> np.ndarray:
    """Process noise covariance in m^2, m^2/s, m^2/s^2.

    Uses the spectral amplitudes Sf = h0/2 and Sg = 2*pi^2*h_-2 of the
    two-state model.
    """
    dt = params.dt_s
    sf = params.h0 / 2.0
    sg = 2.0 * np.pi**2 * params.h_neg2
    q = np.array(
        [
            [sf * dt + sg * dt**3 / 3.0, sg * dt**2 / 2.0],
            [sg * dt**2 / 2.0, sg * dt],
        ]
    )
    return SPEED_OF_LIGHT**2 * q


def propagate(state: ClockState, phi: np.ndarray, noise=None) -> ClockState:
    x = np.asarray(phi, dtype=float) @ state.as_array()
    if noise is not None:
        noise = np.asarray(noise, dtype=float)
        if noise.shape != (2,):
            raise ValueError("noise must be a 2-vector")
        x = x + noise
    return ClockState.from_array(x)


def simulate_clock_truth(
    params: ClockModelParams, x0: ClockState, n_steps: int, seed: int | None = 0
) -> np.ndarray:
    """Draw a truth trajectory of ``n_steps + 1`` states starting at ``x0``.

    Returns an array of shape (n_steps + 1, 2) with columns bias (m) and
    drift (m/s). A zero covariance (h0 = h_-2 = 0) yields the noiseless
    ramp.
    """
    if n_steps < 1:
        raise ValueError("need at least one step")
    rng = np.random.default_rng(seed)
    phi = transition_matrix(params.dt_s)
    q = process_noise(params)
    # eigen-factor instead of Cholesky so singular Q (h_-2 = 0) works
    w, v = np.linalg.eigh(q)
    factor = v * np.sqrt(np.clip(w, 0.0, None))
    draws = rng.standard_normal((n_steps, 2)) @ factor.T

    out = np.empty((n_steps + 1, 2))
    out[0] = x0.as_array()
    for k in range(n_steps):
        out[k + 1] = phi @ out[k] + draws[k]
    return out
