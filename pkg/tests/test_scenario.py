"""Unit tests for trajectories, interpolation and recording synthesis."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.models.errors import InvalidArgumentError
from src.models.scenario import (
    IRDatasetGrid, IRTrajectory, RotationProfile, SynthParams, fractional_delay_ir,
    idw_interpolate, render, render_clean, snr_to_variance, synth_trajectory,
    trajectory_from_grid
)
from src.models.signals import build_excitation_bank, generate_perfect_sweep


def _grid(K=4, rows=2):
    azimuths = np.array([0.0, 90.0, 180.0, 270.0])
    irs = np.arange(azimuths.size * rows * K, dtype=np.float64).reshape(azimuths.size, rows, K)
    return IRDatasetGrid(azimuths=azimuths, irs=irs, sample_rate=44100.0)


def test_rotation_angle_wraps():
    rot = RotationProfile(theta0=350.0, omega=45.0, sample_rate=100.0)
    assert rot.angle(0) == pytest.approx(350.0)
    assert rot.angle(100) == pytest.approx(35.0)


def test_samples_for_span():
    rot = RotationProfile(omega=45.0, sample_rate=44100.0)
    assert rot.samples_for_span(180.0) == 176400


def test_static_rotation_has_no_span():
    with pytest.raises(InvalidArgumentError):
        RotationProfile(omega=0.0).samples_for_span(10.0)


def test_idw_exact_hit_returns_stored_ir():
    grid = _grid()
    assert_array_equal(idw_interpolate(grid, 90.0), grid.irs[1])


def test_idw_midpoint_is_the_average():
    grid = _grid()
    assert_allclose(idw_interpolate(grid, 45.0), 0.5 * (grid.irs[0] + grid.irs[1]))


def test_idw_wraps_between_last_and_first_azimuth():
    grid = _grid()
    assert_allclose(idw_interpolate(grid, 315.0), 0.5 * (grid.irs[3] + grid.irs[0]))
    assert_allclose(idw_interpolate(grid, 337.5), 0.25 * grid.irs[3] + 0.75 * grid.irs[0])


def test_grid_rejects_unsorted_azimuths():
    with pytest.raises(InvalidArgumentError):
        IRDatasetGrid(azimuths=np.array([10.0, 5.0]), irs=np.zeros((2, 1, 3)), sample_rate=1.0)


def test_trajectory_from_grid_uses_row_map_and_offsets():
    grid = _grid()
    rot = RotationProfile(theta0=0.0, omega=90.0, sample_rate=1.0)
    traj = trajectory_from_grid(grid, rot, N=4, S=2, speaker_row_map=[1, 0],
                                speaker_offsets=[0.0, 180.0])
    frames = traj.frames([0, 1])
    assert_array_equal(frames[0, 0], grid.irs[0, 1])
    assert_array_equal(frames[0, 1], grid.irs[2, 0])
    assert_array_equal(frames[1, 0], grid.irs[1, 1])
    assert_array_equal(frames[1, 1], grid.irs[3, 0])


def test_trajectory_from_grid_rejects_missing_rows():
    with pytest.raises(InvalidArgumentError):
        trajectory_from_grid(_grid(rows=2), RotationProfile(), N=10, S=2, speaker_row_map=[0, 2])


def test_trajectory_needs_exactly_one_source():
    rot = RotationProfile()
    with pytest.raises(InvalidArgumentError):
        IRTrajectory(2, 1, 2, rot)
    with pytest.raises(InvalidArgumentError):
        IRTrajectory(2, 1, 2, rot, values=np.zeros((2, 1, 2)), frame_fn=lambda idx: None)


def test_lazy_and_materialized_trajectories_agree():
    params = SynthParams(N=50, S=2, K=8, delay_slope=0.01, rotation=RotationProfile(omega=90.0))
    lazy = synth_trajectory("fractional_delay_pan", params)
    assert not lazy.is_materialized
    dense = lazy.materialize()
    assert dense.is_materialized
    assert_array_equal(dense.frames(np.arange(50)), lazy.frames(np.arange(50)))


def test_fractional_delay_integral_delay_is_a_pulse():
    h = fractional_delay_ir(3.0, 8)
    expected = np.zeros(8)
    expected[3] = 1.0
    assert_array_equal(h, expected)


def test_fractional_delay_rejects_delays_outside_the_filter():
    params = SynthParams(N=10, S=2, K=4, base_delay=3.5, speaker_delay_step=1.0)
    with pytest.raises(InvalidArgumentError):
        synth_trajectory("fractional_delay_pan", params)


def test_synth_trajectory_is_seeded():
    params = SynthParams(N=40, S=2, K=6, seed=7)
    a = synth_trajectory("smooth_random", params).frames(np.arange(40))
    b = synth_trajectory("smooth_random", params).frames(np.arange(40))
    assert_array_equal(a, b)
    other = synth_trajectory("smooth_random", SynthParams(N=40, S=2, K=6, seed=8))
    assert not np.array_equal(a, other.frames(np.arange(40)))


def test_static_trajectory_does_not_move():
    traj = synth_trajectory("static", SynthParams(N=30, S=2, K=5, seed=1))
    frames = traj.frames(np.arange(30))
    assert_array_equal(frames, np.broadcast_to(frames[0], frames.shape))


def test_unknown_synth_kind():
    with pytest.raises(InvalidArgumentError):
        synth_trajectory("chirp", SynthParams())


def test_render_matches_scalar_double_sum():
    rng = np.random.default_rng(0)
    for _ in range(100):
        S = int(rng.integers(1, 4))
        K_tilde = int(rng.integers(1, 5))
        K = int(rng.integers(1, 9))
        N = int(rng.integers(1, 129))
        rot = RotationProfile(sample_rate=8000.0)
        bank = build_excitation_bank(generate_perfect_sweep(2 * S * K_tilde), S, 2 * K_tilde, N,
                                     sample_rate=8000.0)
        values = rng.standard_normal((N, S, K))
        traj = IRTrajectory(N, S, K, rot, values=values)

        y = render_clean(traj, bank)

        expected = np.zeros(N)
        for n in range(N):
            for s in range(S):
                for k in range(min(K, n + 1)):
                    expected[n] += bank.rows[s, n - k] * values[n, s, k]
        assert_allclose(y, expected, atol=1e-12, rtol=0)


def test_render_equals_regressor_dot_when_taps_match():
    S, K = 2, 4
    N = 40
    rot = RotationProfile(sample_rate=8000.0)
    bank = build_excitation_bank(generate_perfect_sweep(S * K), S, K, N, sample_rate=8000.0)
    values = np.random.default_rng(3).standard_normal((N, S, K))
    traj = IRTrajectory(N, S, K, rot, values=values)

    y = render_clean(traj, bank)
    X = bank.regressor_matrix(0, N)
    assert_allclose(y, np.einsum("nj,nj->n", X, values.reshape(N, S * K)), atol=1e-12)


def test_render_noise_is_seeded_and_snr_is_reported():
    S, K, N = 2, 8, 2000
    rot = RotationProfile(sample_rate=8000.0)
    bank = build_excitation_bank(generate_perfect_sweep(S * K), S, K, N, sample_rate=8000.0)
    traj = synth_trajectory("static", SynthParams(N=N, S=S, K=K, rotation=rot, seed=2))

    a = render(traj, bank, snr_db=30.0, seed=11)
    b = render(traj, bank, snr_db=30.0, seed=11)
    assert_array_equal(a.y, b.y)
    assert a.snr_db == pytest.approx(30.0)
    assert a.noise_variance == pytest.approx(snr_to_variance(a.clean_power, 30.0))


def test_render_without_noise_is_clean():
    S, K, N = 1, 4, 64
    rot = RotationProfile(sample_rate=8000.0)
    bank = build_excitation_bank(generate_perfect_sweep(S * K), S, K, N, sample_rate=8000.0)
    traj = synth_trajectory("static", SynthParams(N=N, S=S, K=K, rotation=rot, seed=2))
    rec = render(traj, bank, noise_variance=0.0)
    assert_array_equal(rec.y, render_clean(traj, bank))
    assert rec.snr_db is None


def test_render_rejects_speaker_mismatch():
    rot = RotationProfile(sample_rate=8000.0)
    bank = build_excitation_bank(generate_perfect_sweep(8), 2, 4, 16, sample_rate=8000.0)
    traj = IRTrajectory(16, 1, 4, rot, values=np.zeros((16, 1, 4)))
    with pytest.raises(InvalidArgumentError):
        render(traj, bank)


def test_snr_to_variance():
    assert snr_to_variance(1.0, 30.0) == pytest.approx(1e-3)
    with pytest.raises(InvalidArgumentError):
        snr_to_variance(0.0, 30.0)


def test_recording_segment_keeps_metadata():
    S, K, N = 1, 4, 32
    rot = RotationProfile(sample_rate=8000.0)
    bank = build_excitation_bank(generate_perfect_sweep(S * K), S, K, N, sample_rate=8000.0)
    traj = synth_trajectory("static", SynthParams(N=N, S=S, K=K, rotation=rot))
    rec = render(traj, bank, noise_variance=0.1, seed=4, ear="left")
    part = rec.segment(8, 16)
    assert part.N == 8
    assert part.ear == "left"
    assert_array_equal(part.y, rec.y[8:16])
