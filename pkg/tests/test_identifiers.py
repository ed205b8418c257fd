"""Unit tests for the streaming identifiers."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.models.errors import InvalidArgumentError, NumericalFailureError
from src.models.identifiers import (
    JoNlmsState, KalmanState, NlmsIdentifier, estimation_error, jo_nlms_step, kalman_step,
    lms_step, make_identifier, nlms_step, run_identifier, step_record
)
from src.models.result_models import StorePolicy
from src.models.scenario import IRTrajectory, RotationProfile, render
from src.models.signals import build_excitation_bank, generate_perfect_sweep

FS = 8000.0


def _setup(S, K, N, values=None, seed=0):
    rot = RotationProfile(omega=45.0, sample_rate=FS)
    bank = build_excitation_bank(generate_perfect_sweep(S * K), S, K, N, sample_rate=FS)
    if values is None:
        h = np.random.default_rng(seed).standard_normal((S, K))
        values = np.broadcast_to(h, (N, S, K)).copy()
    traj = IRTrajectory(N, S, K, rot, values=values)
    return rot, bank, traj


def _nm_db(h, h_hat):
    return 10.0 * np.log10(np.sum((h - h_hat) ** 2) / np.sum(h ** 2))


def test_estimation_error_and_gradient():
    x = np.array([1.0, 2.0])
    rec = step_record(x, 3.0, np.array([0.5, 0.5]))
    assert rec.e == pytest.approx(1.5)
    assert rec.ise == pytest.approx(2.25)
    assert_array_equal(rec.grad, [1.5, 3.0])


def test_estimation_error_rejects_mismatched_lengths():
    with pytest.raises(InvalidArgumentError):
        estimation_error(np.ones(3), 1.0, np.zeros(2))


def test_lms_and_nlms_steps():
    h = np.zeros(2)
    x = np.array([1.0, 1.0])
    assert_allclose(lms_step(h, x, 2.0, mu=0.1), [0.2, 0.2])
    assert_allclose(nlms_step(h, x, 2.0, mu=1.0, eps=0.0), [1.0, 1.0])


def test_lms_rejects_negative_step():
    with pytest.raises(InvalidArgumentError):
        lms_step(np.zeros(2), np.ones(2), 1.0, mu=-0.1)


def test_nlms_converges_on_static_noise_free_system():
    S, K = 2, 16
    P = S * K
    N = 20 * P
    rot, bank, traj = _setup(S, K, N)
    rec = render(traj, bank, noise_variance=0.0)

    algo = NlmsIdentifier(S * K, mu=0.5)
    run_identifier(algo, bank, rec, StorePolicy.strided(N), rotation=rot)

    h = traj.frame(0).reshape(-1)
    assert _nm_db(h, algo.estimate) <= -60.0


def test_nlms_matches_straight_loop_oracle_with_noise():
    S, K = 2, 16
    N = 3000
    rot, bank, traj = _setup(S, K, N, seed=1)
    rec = render(traj, bank, snr_db=30.0, seed=5)

    algo = NlmsIdentifier(S * K, mu=0.5)
    result = run_identifier(algo, bank, rec, StorePolicy.strided(500), rotation=rot)

    h_hat = np.zeros(S * K)
    eps = 1e-8 * S * K
    oracle_errors = np.empty(N)
    for n in range(N):
        x = np.zeros(S * K)
        for s in range(S):
            for k in range(K):
                if n - k >= 0:
                    x[s * K + k] = bank.rows[s, n - k]
        e = rec.y[n] - x @ h_hat
        oracle_errors[n] = e
        h_hat = h_hat + 0.5 * e * x / (x @ x + eps)

    assert_allclose(result.errors, oracle_errors, rtol=1e-9, atol=1e-12)
    h = traj.frame(0).reshape(-1)
    assert abs(_nm_db(h, algo.estimate) - _nm_db(h, h_hat)) <= 3.0


def test_kalman_scalar_example():
    state = KalmanState.initial(1, q=0.1, r=0.5, p0=1e-2)
    out = kalman_step(state, np.array([2.0]), 1.0)

    prior = 0.01 + 0.1
    innovation = 2.0 * prior * 2.0 + 0.5
    gain = prior * 2.0 / innovation
    assert out.h_hat[0] == pytest.approx(gain * 1.0, rel=1e-15)
    assert out.cov[0, 0] == pytest.approx(prior - gain * 2.0 * prior, rel=1e-15)


def test_kalman_infinite_noise_only_predicts():
    state = KalmanState.initial(2, q=0.1, r=np.inf)
    out = kalman_step(state, np.ones(2), 5.0)
    assert_array_equal(out.h_hat, np.zeros(2))
    assert_allclose(out.cov, (0.01 + 0.1) * np.eye(2))


def test_kalman_rejects_nonpositive_innovation():
    state = KalmanState.initial(1, q=0.0, r=-1.0, p0=0.0)
    with pytest.raises(NumericalFailureError):
        kalman_step(state, np.array([1.0]), 1.0)


def test_kalman_beats_nlms_on_matched_random_walk():
    S, K = 1, 8
    N = 4000
    q, r = 1e-5, 0.01
    rng = np.random.default_rng(7)
    h0 = rng.standard_normal((S, K))
    walk = np.cumsum(rng.normal(0.0, np.sqrt(q), size=(N, S, K)), axis=0)
    values = h0[None] + walk
    rot, bank, traj = _setup(S, K, N, values=values)
    rec = render(traj, bank, noise_variance=r, seed=9)

    policy = StorePolicy.every()
    kalman = run_identifier(make_identifier("kalman", S * K, q=q, r=r), bank, rec, policy, rot)
    nlms = run_identifier(make_identifier("nlms", S * K, mu=0.5), bank, rec, policy, rot)

    truth = values.reshape(N, -1)
    tail = slice(N // 2, N)

    def mean_nm(result):
        err = np.sum((truth[tail] - result.snapshots[tail]) ** 2, axis=1)
        return 10.0 * np.log10(np.mean(err / np.sum(truth[tail] ** 2, axis=1)))

    assert mean_nm(kalman) <= mean_nm(nlms)


def test_jo_nlms_without_noise_is_unit_step_nlms():
    rng = np.random.default_rng(3)
    for _ in range(20):
        L = int(rng.integers(2, 40))
        h = rng.standard_normal(L)
        x = rng.standard_normal(L)
        y = float(rng.standard_normal())
        state = JoNlmsState(h_hat=h, m=float(rng.uniform(0.1, 2.0)), sigma_v2=0.0,
                            sigma_w2=float(rng.uniform(0.0, 1e-3)))
        out = jo_nlms_step(state, x, y)
        expected = nlms_step(h, x, y, mu=1.0, eps=0.0)
        assert np.linalg.norm(out.h_hat - expected) <= 1e-10 * np.linalg.norm(expected)


def test_jo_nlms_zero_regressor_keeps_state():
    state = JoNlmsState.initial(4, sigma_v2=0.01)
    assert jo_nlms_step(state, np.zeros(4), 1.0) is state


def test_jo_nlms_step_shrinks_misalignment_power():
    state = JoNlmsState.initial(4, sigma_v2=0.01, m0=1.0)
    out = jo_nlms_step(state, np.ones(4), 1.0)
    assert 0.0 <= out.m < state.m


def test_make_identifier_rejects_unknown_names_and_hyperparameters():
    with pytest.raises(InvalidArgumentError):
        make_identifier("rls", 4)
    with pytest.raises(InvalidArgumentError):
        make_identifier("nlms", 4, step=0.5)
    with pytest.raises(InvalidArgumentError):
        make_identifier("nlms", 0)


def test_nlms_default_regularizer_scales_with_width():
    assert make_identifier("nlms", 32).hyperparameters()['eps'] == pytest.approx(32e-8)


def test_run_identifier_keeps_strided_snapshots_with_tags():
    S, K, N = 2, 4, 100
    rot, bank, traj = _setup(S, K, N)
    rec = render(traj, bank, noise_variance=0.0)
    result = run_identifier(make_identifier("lms", S * K, mu=0.01), bank, rec,
                            StorePolicy.strided(25), rotation=rot, ear="left")

    assert_array_equal(result.snapshot_indices, [0, 25, 50, 75])
    assert_allclose(result.theta, rot.angle([0, 25, 50, 75]))
    assert result.errors.shape == (N,)
    assert result.snapshots.shape == (4, S * K)
    assert result.ear == "left"
    assert result.algo == "lms"


def test_run_identifier_snapshot_is_the_post_update_estimate():
    S, K, N = 1, 4, 12
    rot, bank, traj = _setup(S, K, N)
    rec = render(traj, bank, noise_variance=0.0)
    algo = make_identifier("nlms", S * K)
    result = run_identifier(algo, bank, rec, StorePolicy.strided(N), rotation=rot)

    replay = make_identifier("nlms", S * K)
    replay.step(bank.regressor(0), rec.y[0])
    assert_array_equal(result.snapshots[0], replay.estimate)


def test_run_identifier_reports_divergence_with_frame():
    S, K, N = 1, 8, 400
    rot, bank, traj = _setup(S, K, N)
    rec = render(traj, bank, noise_variance=0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalFailureError) as info:
            run_identifier(make_identifier("lms", S * K, mu=10.0), bank, rec,
                           StorePolicy.strided(100), rotation=rot)
    assert info.value.frame is not None
    assert 0 < info.value.frame < N


def test_run_identifier_rejects_width_mismatch():
    rot, bank, traj = _setup(2, 4, 20)
    rec = render(traj, bank, noise_variance=0.0)
    with pytest.raises(InvalidArgumentError):
        run_identifier(make_identifier("nlms", 4), bank, rec, StorePolicy.every(), rot)


def test_kalman_unit_scalar_example():
    state = KalmanState.initial(1, q=0.0, r=1.0, p0=1.0)
    out = kalman_step(state, np.array([1.0]), 2.0)
    assert out.h_hat[0] == pytest.approx(1.0, rel=1e-15)
    assert out.cov[0, 0] == pytest.approx(0.5, rel=1e-15)


def test_kalman_covariance_stays_symmetric_and_nonnegative():
    S, K, N = 2, 4, 2000
    rot, bank, traj = _setup(S, K, N, seed=2)
    rec = render(traj, bank, noise_variance=1e-2, seed=3)
    algo = make_identifier("kalman", S * K, q=1e-6, r=1e-2)

    for lo, hi in ((0, 10), (10, 500), (500, N)):
        run_identifier(algo, bank, rec.segment(lo, hi), StorePolicy.strided(N), rotation=rot,
                       start=lo)
        cov = algo.state.cov
        assert np.max(np.abs(cov - cov.T)) <= 1e-9
        assert np.all(np.diag(cov) >= 0.0)


def test_run_identifier_on_empty_recording_returns_empty_result():
    rot, bank, traj = _setup(2, 4, 20)
    rec = render(traj, bank, noise_variance=0.0).segment(0, 0)
    result = run_identifier(make_identifier("nlms", 8), bank, rec, StorePolicy.every(), rot)
    assert result.N == 0
    assert result.is_empty
    assert result.errors.size == 0
    assert result.snapshots.shape == (0, 8)


def test_jo_nlms_noisy_steady_state_is_close_to_nlms():
    S, K, N = 1, 8, 20000
    noise = 1e-2
    rot, bank, traj = _setup(S, K, N, seed=4)
    rec = render(traj, bank, noise_variance=noise, seed=6)
    policy = StorePolicy.strided(100)

    jo = run_identifier(make_identifier("jo_nlms", S * K, sigma_v2=noise), bank, rec, policy, rot)
    nlms = run_identifier(make_identifier("nlms", S * K, mu=0.5), bank, rec, policy, rot)

    h = traj.frame(0).reshape(-1)
    tail = slice(len(policy.select(0, N)) * 3 // 4, None)

    def mean_nm(result):
        err = np.sum((result.snapshots[tail] - h) ** 2, axis=1)
        return 10.0 * np.log10(np.mean(err) / np.sum(h ** 2))

    assert mean_nm(jo) <= mean_nm(nlms) + 2.0
