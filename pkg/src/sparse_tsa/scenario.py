"""End-to-end scenarios: truth, observables, attack, both estimators, scoring."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import (
    AttackSpec,
    AttackTrace,
    IntegrityReport,
    IntegrityViolationSpec,
    MultipathSpec,
    check_clock_integrity,
    check_measurement_integrity,
    clock_tolerance,
    inject,
    inject_multipath,
    measurement_tolerance,
    synth_attack,
    synth_integrity_violation,
    zero_trace,
)
from .clock import ClockModelParams, ClockState, process_noise, simulate_clock_truth, transition_matrix
from .estimators import SolverConfig, StateTrajectory, TsarmData, TsarmSolution, d2_matrix, ekf_run, tsarm_solve
from .measurements import (
    DEFAULT_SIGMA_PR_M,
    DEFAULT_SIGMA_PRR_MPS,
    DEFAULT_SITE_LLH,
    generate_measurements,
    geodetic_to_ecef,
    residuals,
    synth_constellation,
    wls_clock,
)

SCORING_MODES = ("truth", "ekf-clean")


@dataclass(frozen=True)
class ScenarioConfig:
    duration_s: float = 241.0
    dt_s: float = 1.0
    n_sats: int = 8
    sigma_pr_m: float = DEFAULT_SIGMA_PR_M
    sigma_prr_mps: float = DEFAULT_SIGMA_PRR_MPS
    clock: ClockModelParams = field(default_factory=ClockModelParams)
    clock_x0: ClockState = field(default_factory=lambda: ClockState(100.0, 2.0))
    user_llh: tuple = DEFAULT_SITE_LLH
    attack: AttackSpec | None = None
    integrity_violation: IntegrityViolationSpec | None = None
    multipath: MultipathSpec | None = None
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    scoring: str = "truth"

    def __post_init__(self):
        if not self.dt_s > 0 or not self.duration_s > 0:
            raise ValueError("duration_s and dt_s must be positive")
        ratio = self.duration_s / self.dt_s
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"duration_s={self.duration_s} is not a whole number of dt_s={self.dt_s} intervals")
        if round(ratio) < 3:
            raise ValueError("a scenario needs at least three epochs")
        if not math.isclose(self.clock.dt_s, self.dt_s):
            raise ValueError("clock model interval must equal dt_s")
        if self.attack is not None and self.integrity_violation is not None:
            raise ValueError("configure either a smart attack or an integrity violation, not both")
        if self.sigma_pr_m < 0 or self.sigma_prr_mps < 0:
            raise ValueError("noise levels must be non-negative")
        if self.scoring not in SCORING_MODES:
            raise ValueError(f"scoring must be one of {SCORING_MODES}")
        if len(self.user_llh) != 3:
            raise ValueError("user_llh must be (lat_deg, lon_deg, h_m)")
        # attack timing against the record; raises on a start past the end or an unreachable profile
        if self.attack is not None:
            synth_attack(self.attack, self.n_epochs, self.dt_s)
        if self.integrity_violation is not None:
            iv = self.integrity_violation
            synth_integrity_violation(self.n_epochs, iv.start_s, iv.bias_max_m, iv.ramp_s, self.dt_s)

    @property
    def n_epochs(self) -> int:
        return int(round(self.duration_s / self.dt_s))

    @property
    def times_s(self) -> np.ndarray:
        return self.dt_s * np.arange(self.n_epochs)

    @property
    def user_pos(self) -> np.ndarray:
        return geodetic_to_ecef(*self.user_llh)

    @property
    def process_noise(self) -> np.ndarray:
        return process_noise(self.clock)


@dataclass(frozen=True)
class ScenarioResult:
    config: ScenarioConfig
    truth: np.ndarray
    clean_measurements: list
    measurements: list
    trace: AttackTrace
    ekf: StateTrajectory
    ekf_clean: StateTrajectory
    tsarm: TsarmSolution
    integrity: IntegrityReport
    clock_flags: np.ndarray
    reference_bias_m: np.ndarray
    rmse_ekf: float
    rmse_tsarm: float


def _child_seeds(seed: int):
    truth, sky, noise = np.random.SeedSequence(seed).spawn(3)
    return truth, sky, noise


def build_measurements(config: ScenarioConfig, seed: int | None = None):
    """Truth trajectory, clean observables, attack trace and attacked observables."""
    seed = config.seed if seed is None else seed
    s_truth, s_sky, s_noise = _child_seeds(seed)
    n = config.n_epochs
    truth = simulate_clock_truth(config.clock, config.clock_x0, n, seed=s_truth)
    user = config.user_pos
    sky = synth_constellation(s_sky, config.n_sats, n, config.dt_s, user_pos=user)
    clean = generate_measurements(
        sky, user, truth[1:], config.times_s, config.sigma_pr_m, config.sigma_prr_mps, seed=s_noise
    )
    if config.attack is not None:
        trace = synth_attack(config.attack, n, config.dt_s)
    elif config.integrity_violation is not None:
        iv = config.integrity_violation
        trace = synth_integrity_violation(n, iv.start_s, iv.bias_max_m, iv.ramp_s, config.dt_s)
    else:
        trace = zero_trace(n, config.dt_s)
    attacked = inject(clean, trace)
    if config.multipath is not None:
        attacked = inject_multipath(attacked, config.multipath)
    return truth, clean, trace, attacked


def prior(res0, config: ScenarioConfig):
    """Prior epoch mean (first snapshot solution moved back one interval) and covariance."""
    x1, _ = wls_clock(res0)
    return np.linalg.solve(transition_matrix(config.dt_s), x1), np.diag(np.square(config.solver.prior_std))


def run_ekf(measurements, config: ScenarioConfig) -> StateTrajectory:
    res = residuals(measurements, config.user_pos)
    x0, p0 = prior(res[0], config)
    return ekf_run(res, config.process_noise, config.dt_s, x0, p0)


def rmse(estimate, reference) -> float:
    estimate = np.asarray(estimate, float)
    reference = np.asarray(reference, float)
    if estimate.shape != reference.shape:
        raise ValueError(f"length mismatch: {estimate.shape} vs {reference.shape}")
    return float(np.sqrt(np.mean((estimate - reference) ** 2)))


def integrity_checks(measurements, config: ScenarioConfig):
    """Per-channel (pseudorange vs rate) and clock-level (snapshot bias vs drift) flags."""
    tol = measurement_tolerance(config.sigma_pr_m, config.sigma_prr_mps, config.dt_s)
    report = check_measurement_integrity(measurements, config.dt_s, tol)
    snap = np.array([wls_clock(r)[0] for r in residuals(measurements, config.user_pos)])
    root_n = math.sqrt(config.n_sats)
    ctol = clock_tolerance(config.sigma_pr_m / root_n, config.sigma_prr_mps / root_n, config.dt_s)
    return report, check_clock_integrity(snap[:, 0], snap[:, 1], config.dt_s, ctol)


def run_scenario(config: ScenarioConfig, seed: int | None = None) -> ScenarioResult:
    """Pure function of (config, seed); ``seed`` overrides ``config.seed``."""
    seed = config.seed if seed is None else seed
    if seed != config.seed:
        config = replace(config, seed=seed)
    truth, clean, trace, attacked = build_measurements(config)
    res = residuals(attacked, config.user_pos)
    ekf = run_ekf(attacked, config)
    ekf_clean = run_ekf(clean, config) if (config.attack or config.integrity_violation or config.multipath) else ekf
    x0, _ = prior(res[0], config)
    data = TsarmData.from_residuals(res, config.process_noise, config.dt_s, prior_mean=x0)
    sol = tsarm_solve(None, None, config.dt_s, config.solver, data=data)
    report, clock_flags = integrity_checks(attacked, config)
    ref = truth[1:, 0] if config.scoring == "truth" else ekf_clean.bias_m
    return ScenarioResult(
        config=config,
        truth=truth,
        clean_measurements=clean,
        measurements=attacked,
        trace=trace,
        ekf=ekf,
        ekf_clean=ekf_clean,
        tsarm=sol,
        integrity=report,
        clock_flags=clock_flags,
        reference_bias_m=ref,
        rmse_ekf=rmse(ekf.bias_m, ref),
        rmse_tsarm=rmse(sol.states.bias_m, ref),
    )


def compare(results: dict) -> list[dict]:
    """Rows of scenario name, EKF RMSE, corrected RMSE and their ratio."""
    rows = []
    for name, r in results.items():
        rows.append(
            {
                "scenario": name,
                "lambda": r.config.solver.lam,
                "ekf_rmse_m": r.rmse_ekf,
                "tsarm_rmse_m": r.rmse_tsarm,
                "ratio": r.rmse_tsarm / r.rmse_ekf if r.rmse_ekf > 0 else math.nan,
            }
        )
    return rows


def format_table(rows: list[dict]) -> str:
    head = f"{'scenario':<24}{'lambda':>10}{'EKF RMSE (m)':>16}{'corrected (m)':>16}{'ratio':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['scenario']:<24}{r['lambda']:>10.4g}{r['ekf_rmse_m']:>16.2f}{r['tsarm_rmse_m']:>16.2f}{r['ratio']:>9.3f}"
        )
    return "\n".join(lines)


@dataclass(frozen=True)
class SweepRow:
    lam: float
    rmse_m: float
    d2_l1: float
    converged: bool
    iterations: int
    kkt_residual: float


def sweep_lambda(config: ScenarioConfig, grid, seed: int | None = None, max_workers: int = 1) -> list[SweepRow]:
    """Solve the scenario once per grid value; rows come back in grid order.

    Data generation happens once; solves are independent and may run on
    ``max_workers`` threads.
    """
    grid = [float(g) for g in grid]
    if not grid or min(grid) < 0:
        raise ValueError("grid must hold non-negative values")
    seed = config.seed if seed is None else seed
    config = replace(config, seed=seed)
    truth, clean, _, attacked = build_measurements(config)
    res = residuals(attacked, config.user_pos)
    x0, _ = prior(res[0], config)
    data = TsarmData.from_residuals(res, config.process_noise, config.dt_s, prior_mean=x0)
    if config.scoring == "truth":
        ref = truth[1:, 0]
    else:
        ref = run_ekf(clean, config).bias_m
    d2 = d2_matrix(config.n_epochs, config.solver.d2_boundary)

    def one(lam):
        sol = tsarm_solve(None, None, config.dt_s, replace(config.solver, lam=lam), data=data)
        d = sol.diagnostics
        return SweepRow(
            lam,
            rmse(sol.states.bias_m, ref),
            float(np.abs(d2 @ sol.alterations.s_drift_mps).sum()),
            d.converged,
            d.iterations,
            d.kkt_residual,
        )

    if max_workers <= 1:
        return [one(lam) for lam in grid]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(one, grid))


def tune_lambda(config: ScenarioConfig, grid, seed: int | None = None, max_workers: int = 1):
    """Grid value with the lowest RMSE against the scoring reference, plus the sweep table."""
    rows = sweep_lambda(config, grid, seed, max_workers)
    best = min(rows, key=lambda r: (r.rmse_m, r.lam))
    return best.lam, rows
