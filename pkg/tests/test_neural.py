"""Unit tests for the recurrent identifier: cell, BPTT, Adam, training and segmentation."""

import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.models import trainer as trainer_module
from src.models.dnn_model import (
    CellOptions, DnnParams, cell_forward, count_parameters, init_identity
)
from src.models.errors import InternalError, InvalidArgumentError, NumericalFailureError
from src.models.identifiers import make_identifier, run_identifier
from src.models.result_models import StorePolicy
from src.models.scenario import IRTrajectory, RotationProfile, SynthParams, render, synth_trajectory
from src.models.signals import build_excitation_bank, generate_perfect_sweep
from src.models.trainer import (
    AdamState, TrainerConfig, adam_step, backprop_sequence, estimate_cache_bytes,
    identify_sequence, segment_and_train, segment_bounds, train, training_loss
)

FS = 8000.0


def _toy(S=2, K=4, N=32, noise=0.01, seed=0):
    rot = RotationProfile(omega=45.0, sample_rate=FS)
    bank = build_excitation_bank(generate_perfect_sweep(S * K), S, K, N, sample_rate=FS)
    h = np.random.default_rng(seed).standard_normal((S, K))
    traj = IRTrajectory(N, S, K, rot, values=np.broadcast_to(h, (N, S, K)).copy())
    rec = render(traj, bank, noise_variance=noise, seed=seed + 1)
    return rot, bank, rec


def _loss(params, bank, rec, options):
    run = identify_sequence(params, bank, rec, options=options)
    return training_loss(run.loss_sum, rec.N)


def _finite_difference(params, bank, rec, options, step=1e-5):
    fd = params.zeros_like()
    for name, value in params.items():
        target = getattr(fd, name)
        flat = value.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            up = _loss(params, bank, rec, options)
            flat[i] = saved - step
            down = _loss(params, bank, rec, options)
            flat[i] = saved
            target.reshape(-1)[i] = (up - down) / (2.0 * step)
    return fd


def _relative_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / scale


def test_parameter_count():
    for d in (1, 8, 32):
        assert count_parameters(init_identity(d)) == 9 * d * d + 7 * d


def test_identity_init_layout():
    params = init_identity(4)
    assert_array_equal(params.norm_vec, np.ones(4))
    assert_array_equal(params.W_u, np.eye(4))
    assert_array_equal(params.W_r, np.zeros((4, 4)))
    assert_array_equal(params.b3, np.zeros(4))


def test_jittered_init_is_seeded():
    a = init_identity(4, jitter=0.1, seed=3)
    b = init_identity(4, jitter=0.1, seed=3)
    for (name, x), (_, y) in zip(a.items(), b.items()):
        assert_array_equal(x, y, err_msg=name)


def test_params_reject_wrong_shapes():
    tensors = init_identity(3).to_dict()
    tensors['W2'] = np.eye(4)
    with pytest.raises(InvalidArgumentError):
        DnnParams(**tensors)


def test_identity_init_reproduces_unit_step_nlms():
    rng = np.random.default_rng(0)
    d = 16
    params = init_identity(d)
    for _ in range(10):
        x = rng.standard_normal(d)
        power = float(x @ x)
        e = 1e-4 * power / np.linalg.norm(x) * rng.uniform(0.1, 1.0)
        grad = x * e
        u0 = grad / (power + 1e-12)
        assert np.linalg.norm(u0) <= 1e-4

        delta, c_next, _ = cell_forward(params, grad, power, np.zeros(d))
        assert np.linalg.norm(delta - u0) <= 1e-6 * np.linalg.norm(u0)
        assert np.all(np.isfinite(c_next))


def test_cell_rejects_negative_power():
    with pytest.raises(InvalidArgumentError):
        cell_forward(init_identity(2), np.ones(2), -1.0, np.zeros(2))


def test_cell_reports_non_finite_output():
    params = init_identity(2)
    params.b3[0] = np.inf
    with pytest.raises(NumericalFailureError):
        cell_forward(params, np.ones(2), 1.0, np.zeros(2), frame=5)


@pytest.mark.parametrize("options", [
    CellOptions(),
    CellOptions(use_gates=False),
])
def test_bptt_gradient_matches_finite_differences(options):
    _, bank, rec = _toy(S=2, K=4, N=32)
    params = init_identity(8, jitter=0.1, seed=11)

    run = identify_sequence(params, bank, rec, options=options, keep_cache=True)
    grads = backprop_sequence(params, bank, run, options=options)
    fd = _finite_difference(params, bank, rec, options)

    for name, value in grads.items():
        if not options.use_gates and name in ("W_r", "U_r", "b_r", "W_z", "U_z", "b_z"):
            assert_array_equal(value, 0.0)
            continue
        assert _relative_error(value, getattr(fd, name)) <= 1e-5, name


def test_frozen_normalization_has_exactly_zero_gradient():
    _, bank, rec = _toy(S=2, K=4, N=32)
    params = init_identity(8, jitter=0.1, seed=2)
    options = CellOptions(learnable_norm=False)
    run = identify_sequence(params, bank, rec, options=options, keep_cache=True)
    grads = backprop_sequence(params, bank, run, options=options)
    assert_array_equal(grads.norm_vec, np.zeros(8))
    assert np.linalg.norm(grads.W_u) > 0


def test_backprop_needs_a_cache():
    _, bank, rec = _toy(N=16)
    params = init_identity(8)
    run = identify_sequence(params, bank, rec)
    with pytest.raises(InternalError):
        backprop_sequence(params, bank, run)


def test_identify_sequence_rejects_width_mismatch():
    _, bank, rec = _toy(N=16)
    with pytest.raises(InvalidArgumentError):
        identify_sequence(init_identity(4), bank, rec)


def test_training_loss():
    assert training_loss(10.0, 10) == pytest.approx(np.log(1.0 + 1e-30))
    with pytest.raises(InvalidArgumentError):
        training_loss(1.0, 0)


def test_adam_first_step_is_sign_like():
    params = init_identity(3)
    grads = params.zeros_like()
    grads.b1[:] = [2.0, -0.5, 0.0]
    config = TrainerConfig(lr=0.01)
    new, state = adam_step(params, grads, AdamState.zeros(params), config)

    assert state.t == 1
    expected = -0.01 * grads.b1 / (np.abs(grads.b1) + 1e-8)
    assert_allclose(new.b1 - params.b1, expected, rtol=1e-12, atol=1e-18)
    assert_allclose(state.m.b1, 0.1 * grads.b1)
    assert_array_equal(params.b1, np.zeros(3))


def test_adam_clipping_scales_the_moments():
    params = init_identity(2)
    grads = params.zeros_like()
    grads.b2[:] = [3.0, 4.0]
    config = TrainerConfig(lr=0.01, clip_norm=1.0)
    _, state = adam_step(params, grads, AdamState.zeros(params), config)
    assert_allclose(state.m.b2, 0.1 * np.array([0.6, 0.8]))


def test_trainer_config_validation():
    with pytest.raises(InvalidArgumentError):
        TrainerConfig(lr=0.0)
    with pytest.raises(InvalidArgumentError):
        TrainerConfig(update_fraction=1.5)
    with pytest.raises(InvalidArgumentError):
        TrainerConfig(clip_norm=-1.0)


def test_training_reduces_the_loss():
    _, bank, rec = _toy(S=1, K=4, N=200, noise=1e-4, seed=4)
    config = TrainerConfig(lr=1e-3, max_epochs=5, patience=5, log_every=0)
    outcome = train(bank, rec, config)

    assert len(outcome.epoch_log) == 5
    assert outcome.best_loss < outcome.initial_loss
    assert outcome.params.is_finite()
    assert 1 <= outcome.best_epoch <= 5


def test_best_parameters_reproduce_the_best_loss():
    _, bank, rec = _toy(S=1, K=4, N=120, noise=1e-4, seed=6)
    config = TrainerConfig(lr=1e-3, max_epochs=4, patience=4, log_every=0)
    outcome = train(bank, rec, config)
    replay = identify_sequence(outcome.params, bank, rec)
    assert training_loss(replay.loss_sum, rec.N) == pytest.approx(outcome.best_loss, rel=1e-12)


def test_partial_sequence_updating_runs_per_window():
    _, bank, rec = _toy(S=1, K=4, N=100, noise=1e-4, seed=5)
    config = TrainerConfig(lr=1e-3, max_epochs=3, patience=3, update_fraction=0.5, log_every=0)
    outcome = train(bank, rec, config)
    assert len(outcome.epoch_log) == 3
    assert outcome.params.is_finite()


def test_training_refuses_caches_over_the_memory_budget(monkeypatch):
    _, bank, rec = _toy(N=32)
    monkeypatch.setattr(trainer_module, "estimate_cache_bytes", lambda N, d: 2 ** 62)
    with pytest.raises(InvalidArgumentError):
        train(bank, rec, TrainerConfig(max_epochs=1))


def test_cache_estimate_grows_with_length_and_width():
    assert estimate_cache_bytes(200, 8) == 2 * estimate_cache_bytes(100, 8)
    assert estimate_cache_bytes(100, 16) > estimate_cache_bytes(100, 8)


def test_segment_bounds():
    assert segment_bounds(10, 3) == [(0, 3), (3, 6), (6, 10)]
    assert segment_bounds(10, 6) == [(0, 1), (1, 3), (3, 5), (5, 6), (6, 8), (8, 10)]
    assert segment_bounds(8, 1) == [(0, 8)]
    with pytest.raises(InvalidArgumentError):
        segment_bounds(2, 3)


def test_segment_and_train_stitches_segments():
    rot, bank, rec = _toy(S=1, K=4, N=80, noise=1e-4, seed=8)
    config = TrainerConfig(lr=1e-3, max_epochs=2, patience=2, log_every=0)
    outcome = segment_and_train(bank, rec, 2, config, StorePolicy.strided(10), rotation=rot,
                                ear="left")

    result = outcome.result
    assert result.N == 80
    assert result.segment_boundaries == [0, 40]
    assert result.failed_segments == []
    assert_array_equal(result.snapshot_indices, np.arange(0, 80, 10))
    assert result.hyperparameters['segments'] == 2
    assert [s.index for s in outcome.segments] == [0, 1]


def test_failed_segment_is_flagged_not_fatal(monkeypatch):
    rot, bank, rec = _toy(S=1, K=4, N=80, noise=1e-4, seed=8)
    real_train = trainer_module.train

    def flaky_train(bank, recording, config, start=0, initial=None):
        if start == 40:
            raise NumericalFailureError("boom", frame=41)
        return real_train(bank, recording, config, start=start, initial=initial)

    monkeypatch.setattr(trainer_module, "train", flaky_train)
    config = TrainerConfig(lr=1e-3, max_epochs=1, patience=1, log_every=0)
    outcome = segment_and_train(bank, rec, 2, config, StorePolicy.strided(10), rotation=rot)

    result = outcome.result
    assert result.failed_segments == [1]
    assert np.all(np.isnan(result.errors[40:]))
    assert np.all(np.isfinite(result.errors[:40]))
    assert_array_equal(result.snapshot_indices, [0, 10, 20, 30])
    assert "boom" in outcome.segments[1].error


@pytest.mark.skipif(not os.environ.get("ROTIR_SLOW_TESTS"), reason="set ROTIR_SLOW_TESTS=1")
def test_trained_identifier_beats_nlms_on_fast_rotation():
    S, K, N = 2, 16, 8000
    rot = RotationProfile(omega=45.0, sample_rate=44100.0)
    bank = build_excitation_bank(generate_perfect_sweep(S * K), S, K, N, sample_rate=44100.0)
    traj = synth_trajectory("smooth_random", SynthParams(N=N, S=S, K=K, rotation=rot, seed=1))
    rec = render(traj, bank, snr_db=30.0, seed=2)
    policy = StorePolicy.strided(10)

    outcome = train(bank, rec, TrainerConfig(max_epochs=300, log_every=0))
    dnn = identify_sequence(outcome.params, bank, rec, store_policy=policy, rotation=rot).result
    nlms = run_identifier(make_identifier("nlms", S * K, mu=0.5), bank, rec, policy, rot)

    truth = traj.frames(dnn.snapshot_indices).reshape(-1, S * K)

    def nm(snapshots):
        return np.mean(10 * np.log10(np.sum((truth - snapshots) ** 2, axis=1)
                                     / np.sum(truth ** 2, axis=1)))

    assert nm(dnn.snapshots) <= nm(nlms.snapshots)
    assert outcome.best_loss <= outcome.initial_loss - 2.0


@pytest.mark.parametrize("N, M", [(10, 6), (10, 4), (100, 30), (1201, 7), (9, 9)])
def test_segment_bounds_cover_the_range_with_exactly_m_parts(N, M):
    bounds = segment_bounds(N, M)
    assert len(bounds) == M
    assert bounds[0][0] == 0 and bounds[-1][1] == N
    assert all(a[1] == b[0] for a, b in zip(bounds, bounds[1:]))
    lengths = [hi - lo for lo, hi in bounds]
    assert min(lengths) >= 1
    assert max(lengths) - min(lengths) <= 1


def test_parallel_segments_match_serial_execution():
    from concurrent.futures import ProcessPoolExecutor

    rot, bank, rec = _toy(S=1, K=4, N=90, noise=1e-4, seed=12)
    config = TrainerConfig(lr=1e-3, max_epochs=2, patience=2, log_every=0)
    policy = StorePolicy.strided(15)

    serial = segment_and_train(bank, rec, 3, config, policy, rotation=rot)
    with ProcessPoolExecutor(max_workers=2) as pool:
        parallel = segment_and_train(bank, rec, 3, config, policy, rotation=rot, executor=pool)

    assert_array_equal(parallel.result.snapshots, serial.result.snapshots)
    assert_array_equal(parallel.result.errors, serial.result.errors)
    for a, b in zip(serial.segments, parallel.segments):
        assert [r.loss for r in a.epoch_log] == [r.loss for r in b.epoch_log]


def test_hidden_state_stays_inside_the_unit_interval():
    rng = np.random.default_rng(21)
    d = 6
    params = init_identity(d, jitter=0.5, seed=4)
    c = np.zeros(d)
    for _ in range(50):
        grad = 1e3 * rng.standard_normal(d)
        _, c, _ = cell_forward(params, grad, 1e-3, c)
        assert np.all(np.abs(c) <= 1.0 + 1e-12)


def test_identify_sequence_on_empty_recording():
    rot, bank, rec = _toy(N=16)
    run = identify_sequence(init_identity(8), bank, rec.segment(0, 0),
                            store_policy=StorePolicy.every(), rotation=rot)
    assert run.loss_sum == 0.0
    assert run.result.is_empty
    assert run.result.errors.size == 0
