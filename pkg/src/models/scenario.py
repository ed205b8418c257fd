"""
Scenario Module

Produces ground-truth time-varying impulse response trajectories, either
interpolated from an azimuth-gridded IR dataset or generated synthetically,
and renders the in-ear microphone recording of a rotating speaker array.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sp_signal

from .errors import InvalidArgumentError
from .signals import ExcitationBank

logger = logging.getLogger(__name__)

# Frames rendered per vectorized block
RENDER_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class IRDatasetGrid:
    """Measured IRs on an azimuth grid; irs has shape (azimuths, rows, K)."""

    azimuths: np.ndarray
    irs: np.ndarray
    sample_rate: float

    def __post_init__(self):
        azimuths = np.asarray(self.azimuths, dtype=np.float64)
        irs = np.asarray(self.irs, dtype=np.float64)
        if azimuths.ndim != 1 or azimuths.size < 2:
            raise InvalidArgumentError("IR grid needs at least 2 azimuths")
        if np.any(azimuths < 0.0) or np.any(azimuths >= 360.0):
            raise InvalidArgumentError("Grid azimuths must lie in [0, 360)")
        if np.any(np.diff(azimuths) <= 0.0):
            raise InvalidArgumentError("Grid azimuths must be strictly increasing")
        if irs.ndim != 3 or irs.shape[0] != azimuths.size or irs.shape[2] < 1:
            raise InvalidArgumentError(
                f"Grid IRs have shape {irs.shape}, expected ({azimuths.size}, rows, K>=1)"
            )
        if not np.all(np.isfinite(irs)):
            raise InvalidArgumentError("Grid IRs contain non-finite values")
        if self.sample_rate <= 0:
            raise InvalidArgumentError(f"Sample rate must be positive, got {self.sample_rate}")
        azimuths.setflags(write=False)
        irs.setflags(write=False)
        object.__setattr__(self, "azimuths", azimuths)
        object.__setattr__(self, "irs", irs)

    @property
    def rows(self) -> int:
        return self.irs.shape[1]

    @property
    def K(self) -> int:
        return self.irs.shape[2]


@dataclass(frozen=True)
class RotationProfile:
    """Constant-speed rotation; theta(n) = (theta0 + omega*n/fs) mod 360."""

    theta0: float = 0.0
    omega: float = 45.0
    sample_rate: float = 44100.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidArgumentError(f"Sample rate must be positive, got {self.sample_rate}")
        if self.omega < 0:
            raise InvalidArgumentError(f"Rotational speed must be >= 0, got {self.omega}")

    def angle(self, n):
        """Azimuth in degrees at time index n (scalar or array)."""
        n = np.asarray(n, dtype=np.float64)
        return np.mod(self.theta0 + self.omega * n / self.sample_rate, 360.0)

    def samples_for_span(self, span_degrees: float) -> int:
        """Number of samples needed to rotate by span_degrees."""
        if self.omega <= 0:
            raise InvalidArgumentError("A static rotation never covers a span")
        return int(round(span_degrees / self.omega * self.sample_rate))

    def to_dict(self) -> dict:
        return {"theta0": self.theta0, "omega": self.omega, "sample_rate": self.sample_rate}


class IRTrajectory:
    """
    Ground-truth IRs h_{n,s}(k) over a sequence.

    Frames are either held in a materialized (N, S, K) array or produced on
    demand by a frame function mapping an index array to (len, S, K).
    """

    def __init__(
        self,
        N: int,
        S: int,
        K: int,
        rotation: RotationProfile,
        values: Optional[np.ndarray] = None,
        frame_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        label: str = "trajectory"
    ):
        if (values is None) == (frame_fn is None):
            raise InvalidArgumentError("Provide exactly one of values or frame_fn")
        if N < 0 or S < 1 or K < 1:
            raise InvalidArgumentError(f"Invalid trajectory dimensions N={N}, S={S}, K={K}")
        if values is not None:
            values = np.asarray(values, dtype=np.float64)
            if values.shape != (N, S, K):
                raise InvalidArgumentError(
                    f"Trajectory values have shape {values.shape}, expected {(N, S, K)}"
                )
            if not np.all(np.isfinite(values)):
                raise InvalidArgumentError("Trajectory contains non-finite values")
            values.setflags(write=False)
        self.N = N
        self.S = S
        self.K = K
        self.rotation = rotation
        self.label = label
        self._values = values
        self._frame_fn = frame_fn

    @property
    def is_materialized(self) -> bool:
        return self._values is not None

    def frames(self, indices) -> np.ndarray:
        """IRs for the given time indices, shape (len, S, K)."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        if indices.size and (indices.min() < 0 or indices.max() >= self.N):
            raise InvalidArgumentError(f"Frame index outside [0, {self.N})")
        if self._values is not None:
            return self._values[indices]
        frames = np.asarray(self._frame_fn(indices), dtype=np.float64)
        return frames.reshape(indices.size, self.S, self.K)

    def frame(self, n: int) -> np.ndarray:
        """IRs at time n, shape (S, K)."""
        return self.frames([n])[0]

    def materialize(self) -> "IRTrajectory":
        """Return a trajectory holding every frame in memory."""
        if self._values is not None:
            return self
        return IRTrajectory(
            self.N, self.S, self.K, self.rotation,
            values=self.frames(np.arange(self.N)), label=self.label
        )

    def __repr__(self) -> str:
        mode = "materialized" if self.is_materialized else "lazy"
        return f"IRTrajectory({self.label}, N={self.N}, S={self.S}, K={self.K}, {mode})"


@dataclass(frozen=True, eq=False)
class Recording:
    """Microphone output y(n) with noise metadata."""

    y: np.ndarray
    noise_variance: float
    snr_db: Optional[float]
    seed: int
    sample_rate: Optional[float] = None
    clean_power: float = 0.0
    ear: Optional[str] = None

    def __post_init__(self):
        y = np.array(self.y, dtype=np.float64, copy=True)
        if y.ndim != 1:
            raise InvalidArgumentError("Recording must be one-dimensional")
        if not np.all(np.isfinite(y)):
            raise InvalidArgumentError("Recording contains non-finite values")
        if self.noise_variance < 0:
            raise InvalidArgumentError("Noise variance must be >= 0")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    @property
    def N(self) -> int:
        return self.y.size

    def segment(self, start: int, stop: int) -> "Recording":
        """Sub-recording over [start, stop)."""
        return Recording(
            y=self.y[start:stop], noise_variance=self.noise_variance, snr_db=self.snr_db,
            seed=self.seed, sample_rate=self.sample_rate, clean_power=self.clean_power,
            ear=self.ear
        )

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "sample_rate": self.sample_rate,
            "noise_variance": self.noise_variance,
            "snr_db": self.snr_db,
            "seed": self.seed,
            "clean_power": self.clean_power,
            "ear": self.ear,
        }


class SynthKind(Enum):
    """Synthetic trajectory generators."""
    STATIC = "static"
    FRACTIONAL_DELAY_PAN = "fractional_delay_pan"
    SMOOTH_RANDOM = "smooth_random"


@dataclass
class SynthParams:
    """Parameters of the synthetic trajectory generators."""
    N: int = 8000
    S: int = 2
    K: int = 16
    rotation: RotationProfile = field(default_factory=RotationProfile)
    seed: int = 0
    # static / smooth_random
    decay_taps: float = 4.0
    variation: float = 0.5
    bandwidth_hz: float = 2.0
    # fractional_delay_pan
    base_delay: float = 4.0
    delay_slope: float = 0.0
    speaker_delay_step: float = 0.5
    ear_sign: float = 1.0
    sinc_half_width: float = 4.0
    gain: float = 1.0


def _bracket(grid: IRDatasetGrid, azimuths: np.ndarray):
    """Bracketing grid indices and weights for each query azimuth."""
    az = np.mod(np.asarray(azimuths, dtype=np.float64), 360.0)
    grid_az = grid.azimuths
    count = grid_az.size
    hi = np.searchsorted(grid_az, az, side="right")
    lo = hi - 1
    # Wrap-around between the last and first grid azimuth
    lo_angle = np.where(lo >= 0, grid_az[np.clip(lo, 0, count - 1)], grid_az[-1] - 360.0)
    hi_angle = np.where(hi < count, grid_az[np.clip(hi, 0, count - 1)], grid_az[0] + 360.0)
    lo = np.mod(lo, count)
    hi = np.mod(hi, count)

    d_lo = az - lo_angle
    d_hi = hi_angle - az
    w_lo = d_hi / (d_lo + d_hi)
    exact = d_lo == 0.0
    w_lo = np.where(exact, 1.0, w_lo)
    w_hi = 1.0 - w_lo
    return lo, hi, w_lo, w_hi, exact


def idw_interpolate(grid: IRDatasetGrid, azimuth: float) -> np.ndarray:
    """
    Inverse-distance-weighted IR at an azimuth.

    Uses the two bracketing grid azimuths with weights 1/distance
    (wrap-around at 360 degrees); an exact grid hit returns the stored IR.

    Args:
        grid: IR dataset grid
        azimuth: Query angle in degrees

    Returns:
        Array of shape (rows, K)
    """
    lo, hi, w_lo, w_hi, exact = _bracket(grid, np.array([azimuth]))
    if exact[0]:
        return grid.irs[lo[0]].copy()
    return w_lo[0] * grid.irs[lo[0]] + w_hi[0] * grid.irs[hi[0]]


def trajectory_from_grid(
    grid: IRDatasetGrid,
    rotation: RotationProfile,
    N: int,
    S: int,
    speaker_row_map: Sequence[int],
    speaker_offsets: Optional[Sequence[float]] = None
) -> IRTrajectory:
    """
    Lazy trajectory interpolated from a grid at every sample.

    Args:
        grid: IR dataset grid
        rotation: Rotation profile giving theta(n)
        N: Sequence length
        S: Number of speakers
        speaker_row_map: Grid row for each speaker
        speaker_offsets: Optional azimuth offset (degrees) per speaker

    Returns:
        IRTrajectory with h_{n,s} = idw(grid, theta(n) + offset_s)[row_s]

    Raises:
        InvalidArgumentError: If the map is malformed or references a missing row
    """
    if N < 1:
        raise InvalidArgumentError(f"Trajectory length must be >= 1, got {N}")
    rows = np.asarray(list(speaker_row_map), dtype=np.int64)
    if rows.size != S:
        raise InvalidArgumentError(f"speaker_row_map has {rows.size} entries, expected {S}")
    if np.any(rows < 0) or np.any(rows >= grid.rows):
        raise InvalidArgumentError(f"speaker_row_map references rows outside [0, {grid.rows})")
    if speaker_offsets is None:
        offsets = np.zeros(S)
    else:
        offsets = np.asarray(list(speaker_offsets), dtype=np.float64)
        if offsets.size != S:
            raise InvalidArgumentError(f"speaker_offsets has {offsets.size} entries, expected {S}")
    if rotation.sample_rate != grid.sample_rate:
        logger.warning(
            "Rotation sample rate %s differs from grid sample rate %s",
            rotation.sample_rate, grid.sample_rate
        )

    def frame_fn(indices: np.ndarray) -> np.ndarray:
        theta = rotation.angle(indices)
        out = np.empty((indices.size, S, grid.K), dtype=np.float64)
        for s in range(S):
            lo, hi, w_lo, w_hi, _ = _bracket(grid, theta + offsets[s])
            row = rows[s]
            out[:, s, :] = (w_lo[:, None] * grid.irs[lo, row, :]
                            + w_hi[:, None] * grid.irs[hi, row, :])
        return out

    logger.debug("Grid trajectory N=%d S=%d K=%d", N, S, grid.K)
    return IRTrajectory(N, S, grid.K, rotation, frame_fn=frame_fn, label="grid")


def fractional_delay_ir(delay: float, K: int, half_width: float = 4.0, gain: float = 1.0) -> np.ndarray:
    """
    Hann-windowed sinc fractional delay of length K.

    An integral delay yields an exact shifted unit pulse.
    """
    offset = np.arange(K, dtype=np.float64) - delay
    rounded = np.rint(offset)
    values = np.sinc(offset)
    integral = offset == rounded
    values[integral] = (rounded[integral] == 0.0).astype(np.float64)
    window = np.where(
        np.abs(offset) < half_width,
        0.5 * (1.0 + np.cos(np.pi * offset / half_width)),
        0.0
    )
    return gain * values * window


def _decay_envelope(K: int, decay_taps: float) -> np.ndarray:
    return np.exp(-np.arange(K, dtype=np.float64) / max(decay_taps, 1e-9))


def synth_trajectory(kind, params: SynthParams) -> IRTrajectory:
    """
    Generate a synthetic ground-truth trajectory.

    static: one fixed random IR per speaker.
    fractional_delay_pan: windowed-sinc fractional delays whose delay moves
        linearly with theta(n) (delay = base + sign*slope*theta + s*step).
    smooth_random: per-tap low-pass-filtered random walks around a decaying
        random IR.

    Args:
        kind: SynthKind or its string value
        params: Generator parameters

    Returns:
        IRTrajectory

    Raises:
        InvalidArgumentError: On unknown kinds or invalid parameters
    """
    try:
        kind = SynthKind(kind)
    except ValueError:
        raise InvalidArgumentError(f"Unknown synthetic trajectory kind: {kind!r}") from None
    if params.N < 1 or params.S < 1 or params.K < 1:
        raise InvalidArgumentError(
            f"Invalid dimensions N={params.N}, S={params.S}, K={params.K}"
        )

    N, S, K = params.N, params.S, params.K
    rng = np.random.default_rng(params.seed)

    if kind is SynthKind.STATIC:
        base = rng.standard_normal((S, K)) * _decay_envelope(K, params.decay_taps)
        base.setflags(write=False)
        logger.debug("Static trajectory S=%d K=%d seed=%d", S, K, params.seed)
        return IRTrajectory(
            N, S, K, params.rotation,
            frame_fn=lambda idx: np.broadcast_to(base, (idx.size, S, K)).copy(),
            label=kind.value
        )

    if kind is SynthKind.FRACTIONAL_DELAY_PAN:
        if params.sinc_half_width <= 0:
            raise InvalidArgumentError("sinc_half_width must be positive")
        rotation = params.rotation

        def delays(indices: np.ndarray) -> np.ndarray:
            theta = rotation.angle(indices)
            base = params.base_delay + params.ear_sign * params.delay_slope * theta
            return base[:, None] + params.speaker_delay_step * np.arange(S)[None, :]

        all_delays = delays(np.arange(N))
        if all_delays.min() < 0 or all_delays.max() > K - 1:
            raise InvalidArgumentError(
                f"Delays span [{all_delays.min():.3f}, {all_delays.max():.3f}], outside [0, {K - 1}]"
            )

        def frame_fn(indices: np.ndarray) -> np.ndarray:
            d = delays(indices)
            out = np.empty((indices.size, S, K), dtype=np.float64)
            for i in range(indices.size):
                for s in range(S):
                    out[i, s] = fractional_delay_ir(d[i, s], K, params.sinc_half_width, params.gain)
            return out

        return IRTrajectory(N, S, K, rotation, frame_fn=frame_fn, label=kind.value)

    # smooth_random
    if params.bandwidth_hz <= 0 or params.variation < 0:
        raise InvalidArgumentError("smooth_random needs bandwidth_hz > 0 and variation >= 0")
    envelope = _decay_envelope(K, params.decay_taps)
    base = rng.standard_normal((S, K)) * envelope
    increments = rng.standard_normal((N, S, K))
    pole = np.exp(-2.0 * np.pi * params.bandwidth_hz / params.rotation.sample_rate)
    smoothed = sp_signal.lfilter([1.0 - pole], [1.0, -pole], increments, axis=0)
    walk = np.cumsum(smoothed, axis=0)
    walk -= walk[0]
    rms = np.sqrt(np.mean(walk ** 2))
    if rms > 0:
        walk /= rms
    values = base[None, :, :] + params.variation * walk * envelope[None, None, :]
    logger.debug("Smooth random trajectory N=%d S=%d K=%d seed=%d", N, S, K, params.seed)
    return IRTrajectory(N, S, K, params.rotation, values=values, label=kind.value)


def _history(bank: ExcitationBank, K: int, start: int, stop: int) -> np.ndarray:
    """Excitation histories x_s(n-k), k=0..K-1, shape (stop-start, S, K)."""
    first = start - K + 1
    padded = np.zeros((bank.S, stop - first), dtype=np.float64)
    padded[:, max(first, 0) - first:] = bank.rows[:, max(first, 0):stop]
    windows = sliding_window_view(padded, K, axis=1)[:, :, ::-1]
    return windows.transpose(1, 0, 2)


def snr_to_variance(clean_power: float, target_snr_db: float) -> float:
    """
    Noise variance giving the target SNR for a clean signal power.

    Raises:
        InvalidArgumentError: If clean_power is not positive
    """
    if not clean_power > 0:
        raise InvalidArgumentError(f"Clean power must be positive, got {clean_power}")
    return float(clean_power / 10.0 ** (target_snr_db / 10.0))


def render_clean(traj: IRTrajectory, bank: ExcitationBank) -> np.ndarray:
    """Noise-free output sum_s sum_k x_s(n-k) h_{n,s}(k)."""
    if bank.S != traj.S:
        raise InvalidArgumentError(f"Bank has {bank.S} speakers, trajectory has {traj.S}")
    if bank.length < traj.N:
        raise InvalidArgumentError(f"Bank length {bank.length} shorter than trajectory {traj.N}")
    if (bank.sample_rate is not None
            and bank.sample_rate != traj.rotation.sample_rate):
        raise InvalidArgumentError(
            f"Bank sample rate {bank.sample_rate} differs from trajectory "
            f"{traj.rotation.sample_rate}"
        )
    clean = np.empty(traj.N, dtype=np.float64)
    for start in range(0, traj.N, RENDER_CHUNK):
        stop = min(start + RENDER_CHUNK, traj.N)
        frames = traj.frames(np.arange(start, stop))
        history = _history(bank, traj.K, start, stop)
        clean[start:stop] = np.einsum("nsk,nsk->n", history, frames)
    return clean


def render(
    traj: IRTrajectory,
    bank: ExcitationBank,
    noise_variance: Optional[float] = 0.0,
    seed: int = 0,
    snr_db: Optional[float] = None,
    ear: Optional[str] = None
) -> Recording:
    """
    Render the microphone recording of a time-varying system.

    y(n) = sum_s sum_{k<K} x_s(n-k) h_{n,s}(k) + v(n), v ~ N(0, noise_variance).

    Args:
        traj: Ground-truth trajectory (K true taps)
        bank: Excitation bank with matching S and length >= N
        noise_variance: Noise variance; ignored when snr_db is given
        seed: Noise generator seed
        snr_db: Target SNR in dB, converted with snr_to_variance
        ear: Optional ear tag carried as metadata

    Returns:
        Recording with the realized SNR

    Raises:
        InvalidArgumentError: On dimension mismatch
    """
    clean = render_clean(traj, bank)
    clean_power = float(np.mean(clean ** 2)) if clean.size else 0.0
    if snr_db is not None:
        noise_variance = snr_to_variance(clean_power, snr_db)
    noise_variance = float(noise_variance or 0.0)
    if noise_variance < 0:
        raise InvalidArgumentError(f"Noise variance must be >= 0, got {noise_variance}")

    rng = np.random.default_rng(seed)
    if noise_variance > 0:
        y = clean + rng.normal(0.0, np.sqrt(noise_variance), size=clean.size)
        realized_snr = (10.0 * np.log10(clean_power / noise_variance)
                        if clean_power > 0 else None)
    else:
        y = clean
        realized_snr = None

    logger.debug(
        "Rendered recording N=%d noise_variance=%.3g snr_db=%s",
        traj.N, noise_variance, realized_snr
    )
    return Recording(
        y=y, noise_variance=noise_variance,
        snr_db=None if realized_snr is None else float(realized_snr),
        seed=seed, sample_rate=traj.rotation.sample_rate, clean_power=clean_power, ear=ear
    )
