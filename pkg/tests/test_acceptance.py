"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are written
straight to the terminal, so ``-s`` is not needed.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

import test_attacks
import test_tsarm
from oracles import DenseProblem, tiny_instance
from sparse_tsa.estimators import SolverConfig, TsarmData, tsarm_solve
from sparse_tsa.io import emit_results, load_preset
from sparse_tsa.measurements import ResidualEpoch
from sparse_tsa.scenario import run_scenario, tune_lambda
from test_scenario import clean_noise_fraction

GRID = (0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0)
_cache = {}


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return emit


def tuned(preset):
    """Scenario result at the grid value with the lowest RMSE, plus that value and the run time."""
    if preset not in _cache:
        cfg = load_preset(preset)
        lam, _ = tune_lambda(cfg, GRID, max_workers=4)
        t = time.perf_counter()
        res = run_scenario(replace(cfg, solver=replace(cfg.solver, lam=lam)))
        _cache[preset] = (res, lam, time.perf_counter() - t)
    return _cache[preset]


def attack_line(res, lam, limit):
    ratio = res.rmse_tsarm / res.rmse_ekf
    ok = res.rmse_tsarm < limit and ratio < 0.1 and res.tsarm.diagnostics.converged
    return ok, f"EKF {res.rmse_ekf:.2f} m, TSARM {res.rmse_tsarm:.2f} m (< {limit:g}) at lambda={lam:g}, ratio {ratio:.3f} (< 0.1)"


def test_criterion_1_first_order(report):
    res, lam, secs = tuned("first-order")
    expect = 1500.0 * math.sqrt(141.0 / 241.0)
    ekf_ok = abs(res.rmse_ekf - expect) <= 0.03 * expect
    ok, detail = attack_line(res, lam, 50.0)
    ok = ok and ekf_ok and secs < 60.0
    assert report(1, ok, f"{detail}; EKF target {expect:.1f} +-3%; run {secs:.1f} s (< 60)")


def test_criterion_2_second_order(report):
    res, lam, _ = tuned("second-order")
    expect = math.sqrt(np.mean(res.trace.s_rho_m**2))
    ekf_ok = abs(res.rmse_ekf - expect) <= 0.03 * expect
    ok, detail = attack_line(res, lam, 50.0)
    assert report(2, ok and ekf_ok, f"{detail}; EKF target {expect:.1f} +-3%")


def test_criterion_3_third_order(report):
    res, lam, _ = tuned("third-order")
    ok, detail = attack_line(res, lam, 100.0)
    assert report(3, ok and 400.0 <= res.rmse_ekf <= 600.0, f"{detail}; EKF in [400, 600]")


def test_criterion_4_clean(report):
    res, lam, _ = tuned("clean")
    frac = clean_noise_fraction(res)
    diff = abs(res.rmse_tsarm - res.rmse_ekf)
    ok = frac >= 0.99 and diff < 5.0
    assert report(
        4, ok, f"|s_bias| inside 3 sigma on {100 * frac:.1f}% of epochs (>= 99%); |TSARM - EKF| = {diff:.2f} m (< 5) at lambda={lam:g}"
    )


def test_criterion_5_integrity_violation(report):
    res, lam, _ = tuned("integrity-violation")
    k0 = 100
    window = np.arange(k0, k0 + 21)
    meas_hit = np.isin(window, res.integrity.flagged_epochs).any()
    clock_hit = res.clock_flags[window].any()
    ok = meas_hit and clock_hit and res.rmse_tsarm < 60.0
    assert report(
        5, ok, f"channel flags {'fire' if meas_hit else 'silent'}, clock flags {'fire' if clock_hit else 'silent'} in the ramp; "
        f"TSARM {res.rmse_tsarm:.2f} m (< 60) at lambda={lam:g}, EKF {res.rmse_ekf:.2f} m"
    )


def test_criterion_6_multipath(report):
    res, lam, _ = tuned("multipath")
    ok, detail = attack_line(res, lam, 100.0)
    assert report(6, ok, detail)


def test_criterion_7_solver_correctness(report):
    worst_obj, worst_kkt, bad = 0.0, 0.0, []
    for seed in range(50):
        zs, hs, vs, Q, _ = tiny_instance(seed, n_epochs=8, n_sats=4)
        res = [ResidualEpoch(z, h, v) for z, h, v in zip(zs, hs, vs)]
        lam = 10.0 ** np.random.default_rng(seed).uniform(-2, 2)
        cfg = SolverConfig(lam=lam)
        data = TsarmData.from_residuals(res, Q, 1.0)
        rc = cfg.resolve(data)
        sol = tsarm_solve(None, None, 1.0, cfg, data=data)
        dense = DenseProblem(zs, hs, vs, Q, 1.0, data.prior_mean, rc.prior_std, rc.mu_integrity, rc.eps_ridge, lam, rc.d2_boundary)
        best, _ = dense.brute_force()
        rel = abs(sol.diagnostics.objective - best) / max(1.0, abs(best))
        kkt = sol.diagnostics.kkt_residual / (1.0 + data.z_norm)
        worst_obj, worst_kkt = max(worst_obj, rel), max(worst_kkt, kkt)
        if not sol.diagnostics.converged or rel > 1e-6 or kkt >= 1e-6:
            bad.append(seed)
    ok = not bad
    assert report(7, ok, f"50 instances, worst objective gap {worst_obj:.1e} (<= 1e-6), worst scaled KKT {worst_kkt:.1e} (< 1e-6), failures {bad}")


def test_criterion_8_invariants(report):
    checks = {
        "chain closure": test_attacks.test_chain_closure,
        "D2 annihilates affine": test_tsarm.test_d2_annihilates_affine,
        "shift equivariance": test_tsarm.test_common_mode_shift_equivariance,
        "order containment": test_attacks.test_higher_order_containment,
    }
    failed = []
    for name, fn in checks.items():
        try:
            fn()
        except Exception:
            failed.append(name)
    assert report(8, not failed, f"{', '.join(checks)}; failed: {failed or 'none'}")


def test_criterion_9_reproducibility(report, tmp_path):
    cfg = load_preset("first-order")
    for d in ("a", "b"):
        emit_results(run_scenario(cfg), tmp_path / d)
    names = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "manifest.json")
    diff = [n for n in names if (tmp_path / "a" / n).read_bytes() != (tmp_path / "b" / n).read_bytes()]
    assert report(9, not diff, f"{len(names)} output files compared byte for byte; differing: {diff or 'none'}")
