import numpy as np
import pytest

from oracles import batch_filter_last, tiny_instance
from sparse_tsa.attacks import AttackSpec, inject, synth_attack
from sparse_tsa.clock import ClockModelParams, ClockState, process_noise, simulate_clock_truth
from sparse_tsa.estimators import StateTrajectory, ekf_run
from sparse_tsa.measurements import (
    DEFAULT_SITE_LLH,
    ResidualEpoch,
    generate_measurements,
    geodetic_to_ecef,
    residuals,
    synth_constellation,
)

USER = geodetic_to_ecef(*DEFAULT_SITE_LLH)


def as_residuals(zs, hs, vs):
    return [ResidualEpoch(z, h, v) for z, h, v in zip(zs, hs, vs)]


@pytest.mark.parametrize("seed", range(5))
def test_filter_matches_dense_batch_posterior(seed):
    zs, hs, vs, Q, _ = tiny_instance(seed, n_epochs=6)
    x0 = np.array([1.0, 0.2])
    P0 = np.diag([400.0, 4.0])
    traj = ekf_run(as_residuals(zs, hs, vs), Q, 1.0, x0, P0)
    for k in range(1, 7):
        ref = batch_filter_last(zs[:k], hs[:k], vs[:k], Q, 1.0, x0, P0)
        np.testing.assert_allclose(traj.states[k], ref, rtol=1e-8, atol=1e-8)


def test_noiseless_exact_prior_tracks_truth():
    K = 40
    p = ClockModelParams()
    truth = simulate_clock_truth(p, ClockState(120.0, 1.5), K, seed=2)
    sky = synth_constellation(1, 6, K)
    eps = generate_measurements(sky, USER, truth[1:], np.arange(K, dtype=float), 0.0, 0.0)
    traj = ekf_run(residuals(eps, USER), process_noise(p), 1.0, truth[0], np.diag([1e-6, 1e-8]))
    np.testing.assert_allclose(traj.states[1:], truth[1:], atol=1e-3)


def test_single_epoch_is_weighted_update():
    zs, hs, vs, Q, _ = tiny_instance(3, n_epochs=1)
    res = as_residuals(zs, hs, vs)
    x0, P0 = np.array([3.0, -0.5]), np.diag([100.0, 1.0])
    traj = ekf_run(res, Q, 1.0, x0, P0)
    F = np.array([[1.0, 1.0], [0.0, 1.0]])
    prior_info = np.linalg.inv(F @ P0 @ F.T + Q)
    h, rinv = hs[0], np.diag(1.0 / vs[0])
    info = prior_info + h.T @ rinv @ h
    ref = np.linalg.solve(info, prior_info @ F @ x0 + h.T @ rinv @ zs[0])
    np.testing.assert_allclose(traj.states[1], ref, rtol=1e-10)
    assert len(traj) == 2


def test_ekf_tracks_step_attack():
    K = 241
    p = ClockModelParams()
    truth = simulate_clock_truth(p, ClockState(100.0, 2.0), K, seed=0)
    sky = synth_constellation(0, 8, K)
    eps = generate_measurements(sky, USER, truth[1:], np.arange(K, dtype=float), 5.0, 0.5, seed=1)
    eps = inject(eps, synth_attack(AttackSpec(1, 100.0, 1500.0), K))
    traj = ekf_run(residuals(eps, USER), process_noise(p), 1.0, truth[0], np.diag([1e6, 1e4]))
    err = traj.bias_m[110:] - truth[111:, 0]
    sigma = 5.0 / np.sqrt(8)
    assert abs(err.mean() - 1500.0) < 3 * sigma


def test_state_trajectory_validation():
    with pytest.raises(ValueError):
        StateTrajectory(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        StateTrajectory(np.array([[np.inf, 0.0]]))


def test_singular_innovation_raises():
    res = [ResidualEpoch(np.zeros(2), np.eye(2), np.ones(2))]
    with pytest.raises(np.linalg.LinAlgError):
        ekf_run(res, np.zeros((2, 2)), 1.0, np.zeros(2), np.zeros((2, 2)), R=[np.zeros((2, 2))])
