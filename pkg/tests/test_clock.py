import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import van_loan_q
from sparse_tsa.clock import (
    SPEED_OF_LIGHT,
    ClockModelParams,
    ClockState,
    process_noise,
    propagate,
    simulate_clock_truth,
    transition_matrix,
)

C2 = SPEED_OF_LIGHT**2

# TCXO defaults, evaluated once in 30-digit arithmetic and frozen
TCXO_Q = np.array([[6.471306717179e-03, 3.370736065674e-03], [3.370736065674e-03, 6.741472131348e-03]])


def test_transition_matrix_values():
    np.testing.assert_array_equal(transition_matrix(1.0), [[1, 1], [0, 1]])
    np.testing.assert_array_equal(transition_matrix(0.5), [[1, 0.5], [0, 1]])


@pytest.mark.parametrize("dt", [0.0, -1.0])
def test_transition_matrix_rejects_non_positive(dt):
    with pytest.raises(ValueError):
        transition_matrix(dt)


def test_process_noise_white_frequency_only():
    q = process_noise(ClockModelParams(h0=2e-19, h_neg2=0.0, dt_s=1.0))
    np.testing.assert_allclose(q, C2 * np.array([[1e-19, 0.0], [0.0, 0.0]]), rtol=1e-15)


def test_process_noise_tcxo_regression():
    np.testing.assert_allclose(process_noise(ClockModelParams()), TCXO_Q, rtol=1e-10)


def test_process_noise_doubles_with_dt_when_sg_zero():
    q1 = process_noise(ClockModelParams(h0=1e-19, h_neg2=0.0, dt_s=1.0))
    q2 = process_noise(ClockModelParams(h0=1e-19, h_neg2=0.0, dt_s=2.0))
    assert q2[0, 0] == pytest.approx(2 * q1[0, 0], rel=1e-15)


@given(
    h0=st.floats(1e-22, 1e-17),
    hm2=st.floats(0.0, 1e-18),
    dt=st.floats(0.01, 10.0),
)
def test_process_noise_matches_van_loan(h0, hm2, dt):
    q = process_noise(ClockModelParams(h0=h0, h_neg2=hm2, dt_s=dt))
    ref = van_loan_q(h0, hm2, dt)
    np.testing.assert_allclose(q, ref, rtol=1e-8, atol=1e-12 * np.abs(ref).max())


@given(h0=st.floats(1e-22, 1e-17), hm2=st.floats(0.0, 1e-18), dt=st.floats(0.01, 10.0))
def test_process_noise_symmetric_psd(h0, hm2, dt):
    q = process_noise(ClockModelParams(h0=h0, h_neg2=hm2, dt_s=dt))
    assert q[0, 1] == q[1, 0]
    assert q[0, 0] > 0
    assert np.linalg.eigvalsh(q).min() >= -1e-12 * np.abs(q).max()


@given(dt1=st.floats(0.01, 100.0), dt2=st.floats(0.01, 100.0))
def test_transition_semigroup(dt1, dt2):
    np.testing.assert_allclose(
        transition_matrix(dt1) @ transition_matrix(dt2), transition_matrix(dt1 + dt2), rtol=1e-14
    )


def test_propagate_examples():
    assert propagate(ClockState(100, 2), transition_matrix(1.0)) == ClockState(102, 2)
    assert propagate(ClockState(0, 0), transition_matrix(3.7)) == ClockState(0, 0)
    assert propagate(ClockState(10, -1), transition_matrix(2.0), noise=(0.5, 0)) == ClockState(8.5, -1)


@given(b=st.floats(-1e6, 1e6), d=st.floats(-1e3, 1e3), k=st.integers(1, 50))
def test_noiseless_propagation_is_linear(b, d, k):
    state = ClockState(b, d)
    phi = transition_matrix(1.0)
    for _ in range(k):
        state = propagate(state, phi)
    assert state.bias_m == pytest.approx(b + k * d, rel=1e-12, abs=1e-6)
    assert state.drift_mps == d


def test_clock_state_rejects_non_finite():
    with pytest.raises(ValueError):
        ClockState(np.nan, 0.0)


def test_params_validation():
    with pytest.raises(ValueError):
        ClockModelParams(dt_s=0.0)
    with pytest.raises(ValueError):
        ClockModelParams(h0=-1.0)


def test_truth_noiseless_ramp():
    traj = simulate_clock_truth(ClockModelParams(h0=0.0, h_neg2=0.0), ClockState(0.0, 1.0), 3, seed=5)
    np.testing.assert_array_equal(traj[:, 0], [0, 1, 2, 3])
    assert traj.shape == (4, 2)


def test_truth_deterministic_per_seed():
    p = ClockModelParams()
    a = simulate_clock_truth(p, ClockState(1.0, 2.0), 50, seed=11)
    b = simulate_clock_truth(p, ClockState(1.0, 2.0), 50, seed=11)
    c = simulate_clock_truth(p, ClockState(1.0, 2.0), 50, seed=12)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_truth_increment_covariance_matches_q():
    p = ClockModelParams()
    q = process_noise(p)
    n = 100_000
    traj = simulate_clock_truth(p, ClockState(0.0, 0.0), n, seed=3)
    w = traj[1:] - traj[:-1] @ transition_matrix(1.0).T
    # drift-increment variance within 5%
    assert np.var(w[:, 1]) == pytest.approx(q[1, 1], rel=0.05)
    # whitened increments: chi-square test of the quadratic form at the 1% level
    stat = np.einsum("ki,ij,kj->", w, np.linalg.inv(q), w)
    dof = 2 * n
    z = (stat - dof) / np.sqrt(2 * dof)
    assert abs(z) < 2.576
