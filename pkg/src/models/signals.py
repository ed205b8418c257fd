"""
Excitation Signals Module

Generates the perfect-sweep excitation, the per-speaker circularly shifted
excitation bank and the stacked regressor vectors consumed by every
identifier.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft

from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)


def _freeze(array: np.ndarray) -> np.ndarray:
    """Return a read-only float64 copy of an array."""
    frozen = np.array(array, dtype=np.float64, copy=True)
    frozen.setflags(write=False)
    return frozen


@dataclass(frozen=True, eq=False)
class PerfectSweep:
    """One period of a perfect sweep (delta circular autocorrelation)."""

    period: int
    samples: np.ndarray
    scaling: str = "unit_power"

    def __post_init__(self):
        object.__setattr__(self, "samples", _freeze(self.samples))
        if self.samples.shape != (self.period,):
            raise InvalidArgumentError(
                f"Sweep has {self.samples.shape} samples, expected ({self.period},)"
            )

    def circular_autocorrelation(self) -> np.ndarray:
        """Circular autocorrelation r(tau) for tau = 0..P-1."""
        spectrum = sp_fft.rfft(self.samples)
        return sp_fft.irfft(np.abs(spectrum) ** 2, n=self.period)

    def to_dict(self) -> dict:
        """Metadata for sidecars."""
        return {"P": self.period, "scaling": self.scaling}


@dataclass(frozen=True, eq=False)
class ExcitationBank:
    """S circularly shifted, periodically extended copies of a perfect sweep."""

    sweep: PerfectSweep
    S: int
    tap_count: int
    length: int
    rows: np.ndarray = field(repr=False)
    sample_rate: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "rows", _freeze(self.rows))
        if self.rows.shape != (self.S, self.length):
            raise InvalidArgumentError(
                f"Bank rows have shape {self.rows.shape}, expected ({self.S}, {self.length})"
            )
        # Pre-roll of K~ - 1 zeros so that regressors are plain slices
        padded = np.zeros((self.S, self.length + self.tap_count - 1), dtype=np.float64)
        padded[:, self.tap_count - 1:] = self.rows
        padded.setflags(write=False)
        object.__setattr__(self, "_padded", padded)

    @property
    def period(self) -> int:
        return self.sweep.period

    @property
    def width(self) -> int:
        """Regressor width S*K~."""
        return self.S * self.tap_count

    def regressor(self, n: int) -> np.ndarray:
        """Regressor vector at time n; see :func:`regressor`."""
        return regressor(self, n)

    def regressor_matrix(self, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """
        Stack regressors for n in [start, stop) into a (stop-start, S*K~) matrix.

        Args:
            start: First time index
            stop: One past the last time index (defaults to the bank length)

        Returns:
            Matrix whose row i equals regressor(start + i)
        """
        stop = self.length if stop is None else stop
        if not 0 <= start <= stop <= self.length:
            raise InvalidArgumentError(
                f"Regressor range [{start}, {stop}) outside bank length {self.length}"
            )
        K = self.tap_count
        windows = sliding_window_view(self._padded[:, start:stop + K - 1], K, axis=1)
        # windows[s, i, j] = x_s(start + i - K + 1 + j); newest first needs j reversed
        blocks = windows[:, :, ::-1]
        return np.ascontiguousarray(blocks.transpose(1, 0, 2).reshape(stop - start, self.S * K))

    def to_dict(self) -> dict:
        """Metadata for sidecars."""
        return {
            "P": self.period,
            "S": self.S,
            "K_tilde": self.tap_count,
            "N": self.length,
            "sample_rate": self.sample_rate,
            "scaling": self.sweep.scaling,
        }


def generate_perfect_sweep(period: int) -> PerfectSweep:
    """
    Generate one period of a perfect sweep.

    The spectrum has unit magnitude and quadratic phase -pi*k^2/P on bins
    0..P/2 (conjugate-symmetric completion), so the circular autocorrelation
    is P*delta(tau) up to rounding after unit-power scaling.

    Args:
        period: Period length P in samples (even, >= 2)

    Returns:
        PerfectSweep with mean(x^2) == 1

    Raises:
        InvalidArgumentError: If P is odd or smaller than 2
    """
    if not isinstance(period, (int, np.integer)) or period < 2 or period % 2:
        raise InvalidArgumentError(f"Sweep period must be an even integer >= 2, got {period!r}")

    period = int(period)
    k = np.arange(period // 2 + 1, dtype=np.float64)
    spectrum = np.exp(-1j * np.pi * k ** 2 / period)
    # The Nyquist bin must be real for a real sequence; keep unit magnitude
    nyquist_sign = np.sign(spectrum[-1].real)
    spectrum[-1] = nyquist_sign if nyquist_sign != 0 else 1.0

    samples = sp_fft.irfft(spectrum, n=period)
    samples *= 1.0 / np.sqrt(np.mean(samples ** 2))

    logger.debug("Generated perfect sweep with period %d", period)
    return PerfectSweep(period=period, samples=samples)


def build_excitation_bank(
    sweep: PerfectSweep,
    S: int,
    tap_count: int,
    length: int,
    sample_rate: Optional[float] = None
) -> ExcitationBank:
    """
    Build the per-speaker excitation bank.

    Row s (0-based) is the base sweep circularly shifted by s*K~ samples and
    tiled to the requested length.

    Args:
        sweep: Base perfect sweep with period S*K~
        S: Number of speakers
        tap_count: Estimated IR length K~
        length: Number of samples N
        sample_rate: Excitation sample rate in Hz (metadata)

    Returns:
        ExcitationBank

    Raises:
        InvalidArgumentError: On period mismatch or non-positive sizes
    """
    if S < 1 or tap_count < 1:
        raise InvalidArgumentError(f"S and K~ must be positive, got S={S}, K~={tap_count}")
    if sweep.period != S * tap_count:
        raise InvalidArgumentError(
            f"Sweep period {sweep.period} does not equal S*K~ = {S * tap_count}"
        )
    if length < 1:
        raise InvalidArgumentError(f"Bank length must be >= 1, got {length}")

    n = np.arange(length)
    rows = np.empty((S, length), dtype=np.float64)
    for s in range(S):
        rows[s] = sweep.samples[(n + s * tap_count) % sweep.period]

    logger.debug("Built excitation bank S=%d K~=%d N=%d", S, tap_count, length)
    return ExcitationBank(
        sweep=sweep, S=S, tap_count=tap_count, length=length, rows=rows,
        sample_rate=sample_rate
    )


def regressor(bank: ExcitationBank, n: int) -> np.ndarray:
    """
    Stacked regressor x_{n,ele} at time n.

    Block s holds [x_s(n), ..., x_s(n-K~+1)] with samples before time 0 read
    as zero.

    Args:
        bank: Excitation bank
        n: Time index, 0 <= n < N

    Returns:
        Vector of length S*K~

    Raises:
        InvalidArgumentError: If n is out of range
    """
    if not 0 <= n < bank.length:
        raise InvalidArgumentError(f"Time index {n} outside [0, {bank.length})")
    K = bank.tap_count
    window = bank._padded[:, n:n + K]
    return window[:, ::-1].reshape(-1).copy()
