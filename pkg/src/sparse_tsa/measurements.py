"""Constellation geometry and the pseudorange / pseudorange-rate observables.

The receiver is stationary at a known position, so each epoch reduces to
a residual ``z = y - c`` that depends only on the receiver clock state
through the stacked-ones matrix ``H``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

ORBIT_RADIUS_M = 26_560_000.0
ORBIT_PERIOD_S = 11 * 3600 + 58 * 60
WGS84_A = 6_378_137.0
WGS84_E2 = 6.694379990141317e-3

DEFAULT_SIGMA_PR_M = 5.0
DEFAULT_SIGMA_PRR_MPS = 0.5

# a static site in Austin, TX
DEFAULT_SITE_LLH = (30.2861, -97.7394, 150.0)


@dataclass(frozen=True)
class SatelliteEpoch:
    sat_id: int
    pos_ecef_m: np.ndarray
    vel_ecef_mps: np.ndarray
    clock_bias_m: float = 0.0
    clock_drift_mps: float = 0.0


@dataclass(frozen=True)
class ReceiverTruth:
    """Known receiver position and its true clock per epoch; the receiver does not move."""

    pos_ecef_m: np.ndarray
    clock: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.pos_ecef_m, dtype=float)
        clock = np.asarray(self.clock, dtype=float)
        if pos.shape != (3,) or not np.all(np.isfinite(pos)):
            raise ValueError("receiver position must be a finite 3-vector")
        if clock.ndim != 2 or clock.shape[1] != 2:
            raise ValueError("clock must have shape (K, 2)")
        object.__setattr__(self, "pos_ecef_m", pos)
        object.__setattr__(self, "clock", clock)

    @property
    def vel_ecef_mps(self) -> np.ndarray:
        return np.zeros(3)


@dataclass(frozen=True)
class MeasurementEpoch:
    """Stacked observables of one epoch.

    ``pr_m``, ``prr_mps`` and both variance vectors are aligned with
    ``sats``.
    """

    t_s: float
    sats: tuple
    pr_m: np.ndarray
    prr_mps: np.ndarray
    var_pr_m2: np.ndarray
    var_prr_m2ps2: np.ndarray

    def __post_init__(self):
        n = len(self.sats)
        if n < 1:
            raise ValueError("an epoch needs at least one satellite")
        for name in ("pr_m", "prr_mps", "var_pr_m2", "var_prr_m2ps2"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({n},)")
            object.__setattr__(self, name, arr)
        if np.any(self.var_pr_m2 <= 0) or np.any(self.var_prr_m2ps2 <= 0):
            raise ValueError("measurement variances must be positive")

    @property
    def n_sats(self) -> int:
        return len(self.sats)

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.pr_m, self.prr_mps])

    @property
    def R(self) -> np.ndarray:
        return np.diag(np.concatenate([self.var_pr_m2, self.var_prr_m2ps2]))

    def with_observables(self, pr_m, prr_mps) -> MeasurementEpoch:
        return replace(self, pr_m=np.asarray(pr_m, float), prr_mps=np.asarray(prr_mps, float))


@dataclass(frozen=True)
class ResidualEpoch:
    z: np.ndarray
    h: np.ndarray
    var: np.ndarray = field(default=None)

    @property
    def n_sats(self) -> int:
        return self.h.shape[0] // 2

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.var)

    def reduced(self):
        """Collapse the channels into a 2-D weighted-mean observation.

        Returns ``(ybar, w, const)`` with ``ybar`` the information-weighted
        mean of the bias and drift channels, ``w`` their total information
        and ``const`` the part of the weighted residual norm that no clock
        state can explain, so that
        ``||z - H v||^2_{R^-1} = sum(w * (ybar - v)**2) + const``.
        """
        n = self.n_sats
        info = 1.0 / self.var
        ybar = np.empty(2)
        w = np.empty(2)
        const = 0.0
        for j, sl in enumerate((slice(0, n), slice(n, 2 * n))):
            w[j] = info[sl].sum()
            ybar[j] = np.dot(info[sl], self.z[sl]) / w[j]
            const += np.dot(info[sl], (self.z[sl] - ybar[j]) ** 2)
        return ybar, w, const


def geodetic_to_ecef(lat_deg: float, lon_deg: float, h_m: float) -> np.ndarray:
    lat, lon = np.radians(lat_deg), np.radians(lon_deg)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * np.sin(lat) ** 2)
    return np.array(
        [
            (n + h_m) * np.cos(lat) * np.cos(lon),
            (n + h_m) * np.cos(lat) * np.sin(lon),
            (n * (1.0 - WGS84_E2) + h_m) * np.sin(lat),
        ]
    )


def _enu_basis(user_pos: np.ndarray) -> np.ndarray:
    """Rows east, north, up (spherical approximation of the local frame)."""
    up = user_pos / np.linalg.norm(user_pos)
    east = np.cross([0.0, 0.0, 1.0], up)
    east /= np.linalg.norm(east)
    north = np.cross(up, east)
    return np.vstack([east, north, up])


def elevation_deg(sat_pos, user_pos) -> float:
    los = np.asarray(sat_pos, float) - np.asarray(user_pos, float)
    up = np.asarray(user_pos, float) / np.linalg.norm(user_pos)
    return float(np.degrees(np.arcsin(np.dot(los, up) / np.linalg.norm(los))))


def _line_of_sight(sat_pos, user_pos):
    d = np.asarray(sat_pos, float) - np.asarray(user_pos, float)
    rng = np.linalg.norm(d)
    if not np.isfinite(rng) or rng <= 0.0:
        raise ValueError("satellite and user positions coincide")
    return d, rng


def pseudorange(sat: SatelliteEpoch, user_pos, user_clock_bias_m=0.0, noise_m=0.0) -> float:
    _, rng = _line_of_sight(sat.pos_ecef_m, user_pos)
    return rng + (user_clock_bias_m - sat.clock_bias_m) + noise_m


def pseudorange_rate(
    sat: SatelliteEpoch, user_pos, user_vel=(0.0, 0.0, 0.0), user_clock_drift_mps=0.0, noise_mps=0.0
) -> float:
    d, rng = _line_of_sight(sat.pos_ecef_m, user_pos)
    rel_vel = np.asarray(sat.vel_ecef_mps, float) - np.asarray(user_vel, float)
    return float(rel_vel @ d / rng) + (user_clock_drift_mps - sat.clock_drift_mps) + noise_mps


def measurement_matrix(n_sats: int) -> np.ndarray:
    h = np.zeros((2 * n_sats, 2))
    h[:n_sats, 0] = 1.0
    h[n_sats:, 1] = 1.0
    return h


def known_sequence(epoch: MeasurementEpoch, user_pos, user_vel=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Geometry and satellite-clock part of the observables (2N-vector)."""
    n = epoch.n_sats
    c = np.empty(2 * n)
    for i, sat in enumerate(epoch.sats):
        c[i] = pseudorange(sat, user_pos)
        c[n + i] = pseudorange_rate(sat, user_pos, user_vel)
    return c


def residual(epoch: MeasurementEpoch, c) -> ResidualEpoch:
    c = np.asarray(c, dtype=float)
    y = epoch.y
    if c.shape != y.shape:
        raise ValueError(f"known sequence has shape {c.shape}, expected {y.shape}")
    var = np.concatenate([epoch.var_pr_m2, epoch.var_prr_m2ps2])
    return ResidualEpoch(z=y - c, h=measurement_matrix(epoch.n_sats), var=var)


def residuals(epochs, user_pos) -> list[ResidualEpoch]:
    return [residual(ep, known_sequence(ep, user_pos)) for ep in epochs]


def wls_clock(res: ResidualEpoch) -> tuple[np.ndarray, np.ndarray]:
    """Snapshot weighted least-squares clock solution and its covariance."""
    ybar, w, _ = res.reduced()
    return ybar, np.diag(1.0 / w)


def synth_constellation(
    seed: int | None,
    n_sats: int,
    n_epochs: int,
    dt_s: float = 1.0,
    user_pos=None,
    min_elevation_deg: float = 15.0,
    t0_s: float = 0.0,
) -> list[list[SatelliteEpoch]]:
    """Circular MEO orbits that stay above ``min_elevation_deg`` for the run.

    Each satellite is placed at a random azimuth/elevation in the user's
    sky at the first epoch and given a random in-track heading, which
    fixes a distinct orbital plane and phase. Earth rotation is ignored:
    the same geometry produces and consumes the observables.
    """
    if not 4 <= n_sats <= 12:
        raise ValueError(f"n_sats must be in [4, 12], got {n_sats}")
    if n_epochs < 1:
        raise ValueError("need at least one epoch")
    user_pos = geodetic_to_ecef(*DEFAULT_SITE_LLH) if user_pos is None else np.asarray(user_pos, float)
    rng = np.random.default_rng(seed)
    enu = _enu_basis(user_pos)
    omega = 2.0 * np.pi / ORBIT_PERIOD_S
    times = t0_s + dt_s * np.arange(n_epochs)

    # spread satellites over azimuth sectors so the sky is not clumped
    sectors = rng.permutation(n_sats)
    orbits = []
    for i in range(n_sats):
        for _ in range(100):
            az = 2.0 * np.pi * (sectors[i] + rng.uniform(0.1, 0.9)) / n_sats
            el = np.radians(rng.uniform(min_elevation_deg + 10.0, 85.0))
            los = np.cos(el) * (np.sin(az) * enu[0] + np.cos(az) * enu[1]) + np.sin(el) * enu[2]
            # range along los to the orbit sphere
            b = user_pos @ los
            rho = -b + np.sqrt(b * b - (user_pos @ user_pos - ORBIT_RADIUS_M**2))
            p_hat = (user_pos + rho * los) / ORBIT_RADIUS_M
            heading = rng.normal(size=3)
            heading -= (heading @ p_hat) * p_hat
            v_hat = heading / np.linalg.norm(heading)
            if all(
                elevation_deg(ORBIT_RADIUS_M * (np.cos(omega * t) * p_hat + np.sin(omega * t) * v_hat), user_pos)
                > min_elevation_deg
                for t in (times[-1] - t0_s, 0.5 * (times[-1] - t0_s))
            ):
                break
        else:
            raise RuntimeError("could not place a visible satellite")
        clock_bias = rng.uniform(-3.0e4, 3.0e4)
        clock_drift = rng.uniform(-0.3, 0.3)
        orbits.append((p_hat, v_hat, clock_bias, clock_drift))

    sat_ids = np.sort(rng.choice(np.arange(1, 33), size=n_sats, replace=False))
    out = []
    for t in times:
        tau = t - t0_s
        epoch = []
        for sid, (p_hat, v_hat, cb, cd) in zip(sat_ids, orbits):
            pos = ORBIT_RADIUS_M * (np.cos(omega * tau) * p_hat + np.sin(omega * tau) * v_hat)
            vel = ORBIT_RADIUS_M * omega * (-np.sin(omega * tau) * p_hat + np.cos(omega * tau) * v_hat)
            epoch.append(SatelliteEpoch(int(sid), pos, vel, cb + cd * tau, cd))
        out.append(epoch)
    return out


def generate_measurements(
    constellation,
    user_pos,
    clock_states,
    times_s,
    sigma_pr_m: float = DEFAULT_SIGMA_PR_M,
    sigma_prr_mps: float = DEFAULT_SIGMA_PRR_MPS,
    seed: int | None = 0,
) -> list[MeasurementEpoch]:
    """Noisy observables for a stationary receiver.

    ``clock_states`` is an array (K, 2) of receiver bias/drift aligned with
    ``constellation`` and ``times_s``. Zero sigmas give noiseless data.
    """
    clock_states = np.asarray(clock_states, float)
    if len(constellation) != len(clock_states) or len(times_s) != len(clock_states):
        raise ValueError("constellation, clock states and times must align")
    rng = np.random.default_rng(seed)
    epochs = []
    for sats, (cb, cd), t in zip(constellation, clock_states, times_s):
        n = len(sats)
        e_pr = rng.standard_normal(n) * sigma_pr_m
        e_prr = rng.standard_normal(n) * sigma_prr_mps
        pr = np.array([pseudorange(s, user_pos, cb, e) for s, e in zip(sats, e_pr)])
        prr = np.array([pseudorange_rate(s, user_pos, (0, 0, 0), cd, e) for s, e in zip(sats, e_prr)])
        # variances stay positive even for noiseless generation
        var_pr = np.full(n, max(sigma_pr_m, 1e-3) ** 2)
        var_prr = np.full(n, max(sigma_prr_mps, 1e-4) ** 2)
        epochs.append(MeasurementEpoch(float(t), tuple(sats), pr, prr, var_pr, var_prr))
    return epochs
