"""Time-synchronization attack traces, injection, and integrity checks.

An attack alters every pseudorange by ``s_rho[k]`` and every pseudorange
rate by ``s_rhodot[k]``. Higher derivatives are backward differences with
a zero sample before the record, so a trace that starts mid-recording
satisfies the chain relation exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .measurements import MeasurementEpoch

SHAPES_BY_ORDER = {1: "step", 2: "ramp", 3: "trapezoid-drift"}


@dataclass(frozen=True)
class AttackSpec:
    """Parameters of a synthetic attack.

    Order 1 is a bias step (``bias_max_m``), order 2 a drift step to
    ``drift_max_mps`` with a ramping bias, order 3 a trapezoidal drift
    profile whose integral reaches ``bias_max_m``. Fields that the order
    does not need may be left as None; if given they must agree with the
    generated trace.
    """

    order: int
    start_s: float
    bias_max_m: float | None = None
    drift_max_mps: float | None = None
    shape: str | None = None
    ramp_s: float = 20.0

    def __post_init__(self):
        if self.order not in SHAPES_BY_ORDER:
            raise ValueError(f"attack order must be 1, 2 or 3, got {self.order}")
        if self.shape is None:
            object.__setattr__(self, "shape", SHAPES_BY_ORDER[self.order])
        elif self.shape != SHAPES_BY_ORDER[self.order]:
            raise ValueError(f"order {self.order} requires shape {SHAPES_BY_ORDER[self.order]!r}, got {self.shape!r}")
        if self.start_s < 0:
            raise ValueError("start_s must be non-negative")
        if self.order in (1, 3) and self.bias_max_m is None:
            raise ValueError(f"order {self.order} attack needs bias_max_m")
        if self.order in (2, 3) and self.drift_max_mps is None:
            raise ValueError(f"order {self.order} attack needs drift_max_mps")
        if self.order == 3 and not self.ramp_s > 0:
            raise ValueError("ramp_s must be positive")


@dataclass(frozen=True)
class AttackTrace:
    t_s: np.ndarray
    s_rho_m: np.ndarray
    s_rhodot_mps: np.ndarray
    s_rhoddot: np.ndarray
    s_jerk: np.ndarray

    def __len__(self):
        return len(self.s_rho_m)

    @property
    def sequences(self) -> tuple:
        return (self.s_rho_m, self.s_rhodot_mps, self.s_rhoddot, self.s_jerk)


@dataclass(frozen=True)
class IntegrityViolationSpec:
    """Bias-only ramp to ``bias_max_m`` over ``ramp_s`` with no rate alteration."""

    start_s: float
    bias_max_m: float
    ramp_s: float = 20.0

    def __post_init__(self):
        if self.start_s < 0:
            raise ValueError("start_s must be non-negative")
        if not self.ramp_s > 0:
            raise ValueError("ramp_s must be positive")


@dataclass(frozen=True)
class MultipathSpec:
    """Channel-specific pseudorange/rate offsets over a time window.

    Either name the satellites in ``affected_sat_ids`` or give
    ``n_channels``, which picks the lowest satellite ids present.
    """

    d_pr_m: float
    d_prr_mps: float
    start_s: float
    stop_s: float
    affected_sat_ids: tuple = ()
    n_channels: int = 0

    def __post_init__(self):
        object.__setattr__(self, "affected_sat_ids", tuple(int(i) for i in self.affected_sat_ids))
        if len(self.affected_sat_ids) == 0 and self.n_channels < 1:
            raise ValueError("multipath needs affected_sat_ids or a positive n_channels")
        if self.affected_sat_ids and self.n_channels:
            raise ValueError("give either affected_sat_ids or n_channels, not both")
        if self.stop_s < self.start_s:
            raise ValueError("multipath window ends before it starts")

    def resolve(self, sat_ids) -> tuple:
        sat_ids = sorted(set(int(i) for i in sat_ids))
        if self.affected_sat_ids:
            missing = set(self.affected_sat_ids) - set(sat_ids)
            if missing:
                raise ValueError(f"multipath satellites {sorted(missing)} are not tracked")
            return self.affected_sat_ids
        if self.n_channels > len(sat_ids):
            raise ValueError(f"cannot affect {self.n_channels} of {len(sat_ids)} channels")
        return tuple(sat_ids[: self.n_channels])


@dataclass(frozen=True)
class IntegrityReport:
    """Outcome of the pseudorange/rate and clock-level consistency tests.

    ``measurement_residuals`` has one row per epoch and one column per
    satellite in ``sat_ids``; entries are NaN where the test is undefined
    (first epoch or a satellite missing from the previous epoch).
    """

    sat_ids: tuple
    measurement_residuals: np.ndarray
    measurement_flags: np.ndarray
    tolerance: float

    @property
    def flagged_epochs(self) -> np.ndarray:
        return np.flatnonzero(self.measurement_flags.any(axis=1))


def backward_difference(seq, dt_s: float) -> np.ndarray:
    seq = np.asarray(seq, dtype=float)
    return np.diff(seq, prepend=0.0) / dt_s


def trace_from_drift(t_s, s_rho, s_rhodot, dt_s: float) -> AttackTrace:
    s_rhoddot = backward_difference(s_rhodot, dt_s)
    return AttackTrace(
        t_s=np.asarray(t_s, float),
        s_rho_m=np.asarray(s_rho, float),
        s_rhodot_mps=np.asarray(s_rhodot, float),
        s_rhoddot=s_rhoddot,
        s_jerk=backward_difference(s_rhoddot, dt_s),
    )


def zero_trace(n_epochs: int, dt_s: float = 1.0, t0_s: float = 0.0) -> AttackTrace:
    z = np.zeros(n_epochs)
    return trace_from_drift(t0_s + dt_s * np.arange(n_epochs), z, z, dt_s)


def _start_index(start_s: float, dt_s: float, t0_s: float) -> int:
    # first epoch at or after the start time, tolerant of float grids
    return max(0, math.ceil((start_s - t0_s) / dt_s - 1e-9))


def synth_attack(spec: AttackSpec, n_epochs: int, dt_s: float = 1.0, t0_s: float = 0.0) -> AttackTrace:
    if not dt_s > 0:
        raise ValueError("dt_s must be positive")
    t = t0_s + dt_s * np.arange(n_epochs)
    k0 = _start_index(spec.start_s, dt_s, t0_s)
    if k0 >= n_epochs:
        raise ValueError(f"attack starts at {spec.start_s} s, after the last epoch")

    if spec.order == 1:
        s_rho = np.where(np.arange(n_epochs) >= k0, float(spec.bias_max_m), 0.0)
        s_rhodot = backward_difference(s_rho, dt_s)
        if spec.drift_max_mps is not None and not np.isclose(spec.drift_max_mps, spec.bias_max_m / dt_s):
            raise ValueError(
                f"order-1 drift spike is bias_max/dt = {spec.bias_max_m / dt_s:g} m/s, "
                f"inconsistent with drift_max_mps = {spec.drift_max_mps:g}"
            )
        return trace_from_drift(t, s_rho, s_rhodot, dt_s)

    if spec.order == 2:
        s_rhodot = np.where(np.arange(n_epochs) >= k0, float(spec.drift_max_mps), 0.0)
        s_rho = np.cumsum(s_rhodot * dt_s)
        if spec.bias_max_m is not None and abs(s_rho[-1] - spec.bias_max_m) > abs(spec.drift_max_mps) * dt_s:
            raise ValueError(
                f"order-2 terminal bias is {s_rho[-1]:g} m, inconsistent with bias_max_m = {spec.bias_max_m:g}"
            )
        return trace_from_drift(t, s_rho, s_rhodot, dt_s)

    # order 3: rise over ramp_s, hold, fall over ramp_s; area equals bias_max
    d, b, ramp = float(spec.drift_max_mps), float(spec.bias_max_m), float(spec.ramp_s)
    if d == 0 or np.sign(d) != np.sign(b):
        raise ValueError("order-3 attack needs drift_max and bias_max of the same sign")
    hold = b / d - ramp
    if -1e-9 * ramp < hold < 0:  # zero hold up to rounding
        hold = 0.0
    t_start = t0_s + k0 * dt_s
    t_end = t_start + 2 * ramp + hold
    if hold < 0 or t_end > t[-1] + 1e-9:
        raise ValueError(
            f"bias_max {b:g} m is unreachable with drift_max {d:g} m/s and {ramp:g} s ramps "
            f"within the record"
        )
    knots = [t_start, t_start + ramp, t_start + ramp + hold, t_end]
    s_rhodot = np.interp(t, knots, [0.0, d, d, 0.0], left=0.0, right=0.0)
    s_rho = np.cumsum(s_rhodot * dt_s)
    return trace_from_drift(t, s_rho, s_rhodot, dt_s)


def synth_integrity_violation(
    n_epochs: int, start_s: float, bias_max_m: float, ramp_s: float = 20.0, dt_s: float = 1.0, t0_s: float = 0.0
) -> AttackTrace:
    """Bias ramp to ``bias_max_m`` with the pseudorange-rate alteration held at zero.

    This breaks the pseudorange/rate consistency on purpose (a careless
    spoofer), so the trace does not satisfy the derivative chain between
    ``s_rho`` and ``s_rhodot``.
    """
    t = t0_s + dt_s * np.arange(n_epochs)
    s_rho = np.interp(t, [start_s, start_s + ramp_s], [0.0, bias_max_m], left=0.0, right=bias_max_m)
    return trace_from_drift(t, s_rho, np.zeros(n_epochs), dt_s)


def inject(measurements, trace: AttackTrace) -> list[MeasurementEpoch]:
    """Apply a common-mode alteration to every channel of every epoch."""
    if len(measurements) != len(trace):
        raise ValueError(f"trace has {len(trace)} samples for {len(measurements)} epochs")
    return [
        ep.with_observables(ep.pr_m + trace.s_rho_m[k], ep.prr_mps + trace.s_rhodot_mps[k])
        for k, ep in enumerate(measurements)
    ]


def inject_multipath(measurements, mp: MultipathSpec) -> list[MeasurementEpoch]:
    affected = set(mp.resolve({s.sat_id for ep in measurements for s in ep.sats}))
    out = []
    for ep in measurements:
        ids = [s.sat_id for s in ep.sats]
        if not mp.start_s <= ep.t_s <= mp.stop_s:
            out.append(ep)
            continue
        if affected.issuperset(ids):
            raise ValueError("multipath must leave at least one channel unaffected; use an attack trace instead")
        mask = np.array([i in affected for i in ids])
        pr = np.where(mask, ep.pr_m + mp.d_pr_m, ep.pr_m)
        prr = np.where(mask, ep.prr_mps + mp.d_prr_mps, ep.prr_mps)
        out.append(ep.with_observables(pr, prr))
    return out


def measurement_tolerance(sigma_pr_m: float, sigma_prr_mps: float, dt_s: float, n_sigma: float = 3.0) -> float:
    """Bound on |diff(rho)/dt - rhodot| for authentic data of the given noise."""
    return n_sigma * (sigma_pr_m * math.sqrt(2.0) / dt_s + sigma_prr_mps)


def check_measurement_integrity(measurements, dt_s: float, tol: float) -> IntegrityReport:
    if len(measurements) < 2:
        raise ValueError("integrity check needs at least two epochs")
    sat_ids = tuple(sorted({s.sat_id for ep in measurements for s in ep.sats}))
    col = {sid: j for j, sid in enumerate(sat_ids)}
    res = np.full((len(measurements), len(sat_ids)), np.nan)
    prev = None
    for k, ep in enumerate(measurements):
        cur = {s.sat_id: (ep.pr_m[i], ep.prr_mps[i]) for i, s in enumerate(ep.sats)}
        if prev is not None:
            for sid, (pr, prr) in cur.items():
                if sid in prev:
                    res[k, col[sid]] = abs((pr - prev[sid][0]) / dt_s - prr)
        prev = cur
    flags = np.nan_to_num(res, nan=0.0) > tol
    return IntegrityReport(sat_ids, res, flags, float(tol))


def clock_integrity_residuals(bias_m, drift_mps, dt_s: float) -> np.ndarray:
    bias_m = np.asarray(bias_m, float)
    drift_mps = np.asarray(drift_mps, float)
    if bias_m.shape != drift_mps.shape:
        raise ValueError("bias and drift series must have equal length")
    res = np.full(bias_m.shape, np.nan)
    res[1:] = np.abs(np.diff(bias_m) / dt_s - drift_mps[1:])
    return res


def check_clock_integrity(bias_m, drift_mps, dt_s: float, tol: float) -> np.ndarray:
    """Flag epochs whose bias increment disagrees with the drift by more than ``tol``."""
    if len(bias_m) < 2:
        raise ValueError("integrity check needs at least two epochs")
    return np.nan_to_num(clock_integrity_residuals(bias_m, drift_mps, dt_s), nan=0.0) > tol


def clock_tolerance(sigma_bias_m: float, sigma_drift_mps: float, dt_s: float, n_sigma: float = 3.0) -> float:
    return measurement_tolerance(sigma_bias_m, sigma_drift_mps, dt_s, n_sigma)


def is_sparse(seq, spike_threshold: float | None = None, sparsity_ratio: float = 0.05) -> bool:
    seq = np.abs(np.asarray(seq, float))
    peak = seq.max(initial=0.0)
    if peak == 0.0:
        return True
    thr = spike_threshold
    if thr is None:
        thr = 10.0 * np.median(seq)
        # a median comparable to the peak means the bulk is signal, not noise
        if thr == 0.0 or thr >= 0.5 * peak:
            thr = 1e-9 * peak
    return np.count_nonzero(seq > thr) < sparsity_ratio * seq.size


def classify_order(trace: AttackTrace, spike_threshold: float | None = None, sparsity_ratio: float = 0.05):
    """Lowest derivative order (0 = bias ... 3 = jerk) at which the trace is sparse.

    Returns None for an all-zero trace or one that is dense at every order.
    """
    if all(not np.any(seq) for seq in trace.sequences):
        return None
    for order, seq in enumerate(trace.sequences):
        if is_sparse(seq, spike_threshold, sparsity_ratio):
            return order
    return None
