"""
Evaluation Metrics Module

Normalized misalignment, log-spectral distortion and interaural time
difference of identified impulse responses, azimuth alignment of snapshot
sequences, and the post-processing applied before scoring (time windowing
and output-transfer-function compensation).
"""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sp_fft
from scipy import signal as sp_signal

from .. import BAND_PRESETS, MAGNITUDE_FLOOR, NM_FLOOR_DB
from .errors import InvalidArgumentError
from .result_models import IdentificationResult, ItdRow, MetricsReport

logger = logging.getLogger(__name__)

DEFAULT_MAX_LAG_SECONDS = 1e-3


@dataclass(frozen=True, eq=False)
class AlignedPair:
    """
    True and estimated IRs of equal length, shape (frames, S, L).

    The shorter of the two inputs is zero-padded at the tail.
    """
    true_ir: np.ndarray
    est_ir: np.ndarray
    sample_rate: float

    @classmethod
    def build(cls, true_ir: np.ndarray, est_ir: np.ndarray, sample_rate: float) -> 'AlignedPair':
        """
        Align true and estimated IR stacks.

        Args:
            true_ir: Array (..., K); leading axes are flattened to (frames, S)
            est_ir: Array (..., K~) with the same leading shape
            sample_rate: Sampling rate in Hz

        Raises:
            InvalidArgumentError: On mismatched leading shapes or empty input
        """
        h = np.asarray(true_ir, dtype=np.float64)
        g = np.asarray(est_ir, dtype=np.float64)
        if h.shape[:-1] != g.shape[:-1]:
            raise InvalidArgumentError(
                f"True IR stack {h.shape} and estimate stack {g.shape} do not align"
            )
        if h.size == 0 or g.size == 0:
            raise InvalidArgumentError("Cannot evaluate an empty IR stack")
        if sample_rate <= 0:
            raise InvalidArgumentError(f"Sample rate must be positive, got {sample_rate}")
        L = max(h.shape[-1], g.shape[-1])
        h = zero_pad(h, L)
        g = zero_pad(g, L)
        if h.ndim == 1:
            h, g = h[None, None, :], g[None, None, :]
        elif h.ndim == 2:
            h, g = h[None], g[None]
        else:
            h = h.reshape(-1, h.shape[-2], L)
            g = g.reshape(-1, g.shape[-2], L)
        return cls(true_ir=h, est_ir=g, sample_rate=float(sample_rate))

    @property
    def length(self) -> int:
        return self.true_ir.shape[-1]


def zero_pad(ir: np.ndarray, length: int) -> np.ndarray:
    """Zero-pad the last axis to length (no-op when already that long)."""
    ir = np.asarray(ir, dtype=np.float64)
    extra = length - ir.shape[-1]
    if extra < 0:
        raise InvalidArgumentError(f"Cannot pad {ir.shape[-1]} taps down to {length}")
    if extra == 0:
        return ir
    pad = [(0, 0)] * (ir.ndim - 1) + [(0, extra)]
    return np.pad(ir, pad)


def default_fft_size(K: int) -> int:
    """Next power of two >= K."""
    return 1 << max(int(K) - 1, 0).bit_length()


def resolve_band(band, sample_rate: float) -> Tuple[float, float]:
    """
    Resolve a band preset name or (f_lo, f_hi) tuple to numbers.

    Raises:
        InvalidArgumentError: Unknown preset or band outside (0, fs/2]
    """
    if isinstance(band, str):
        if band not in BAND_PRESETS:
            raise InvalidArgumentError(f"Unknown band preset '{band}'")
        band = BAND_PRESETS[band]
    lo, hi = band
    nyquist = sample_rate / 2.0
    hi = nyquist if hi is None else float(hi)
    lo = float(lo)
    if lo < 0 or hi > nyquist or lo >= hi:
        raise InvalidArgumentError(f"Band ({lo}, {hi}) is not within (0, {nyquist}]")
    return lo, hi


def azimuth_map(result: IdentificationResult, target_grid: Sequence[float],
                rotation=None) -> Dict[float, np.ndarray]:
    """
    Pick, for each target azimuth, the snapshot with the closest azimuth tag.

    Args:
        result: Identification result with theta tags
        target_grid: Target azimuths in degrees
        rotation: RotationProfile used when the result carries no tags

    Returns:
        Mapping target azimuth -> (K~, S) estimate matrix

    Raises:
        InvalidArgumentError: If the result has no snapshots or no usable tags
    """
    if result.is_empty:
        raise InvalidArgumentError("Cannot map azimuths of an empty result")
    theta = result.theta
    if np.any(np.isnan(theta)):
        if rotation is None:
            raise InvalidArgumentError("Result carries no azimuth tags and no rotation was given")
        theta = rotation.angle(result.snapshot_indices)
    mapped = {}
    for target in target_grid:
        distance = np.abs((theta - float(target) + 180.0) % 360.0 - 180.0)
        mapped[float(target)] = result.snapshot_matrix(int(np.argmin(distance)))
    return mapped


def frame_nm_db(pairs: AlignedPair) -> Tuple[np.ndarray, int]:
    """
    Per-(frame, speaker) misalignment in dB, floored, with the zero-norm count.

    Returns:
        (1-D array over evaluated frames, number of excluded frames)
    """
    h = pairs.true_ir.reshape(-1, pairs.length)
    g = pairs.est_ir.reshape(-1, pairs.length)
    norm = np.einsum('ij,ij->i', h, h)
    valid = norm > 0
    diff = h[valid] - g[valid]
    ratio = np.einsum('ij,ij->i', diff, diff) / norm[valid]
    with np.errstate(divide='ignore'):
        db = 10.0 * np.log10(ratio)
    return np.maximum(db, NM_FLOOR_DB), int(np.count_nonzero(~valid))


def normalized_misalignment(pairs: AlignedPair) -> Tuple[float, bool, int]:
    """
    Mean over evaluated (frame, speaker) pairs of 10*log10(|h - h_hat|^2 / |h|^2).

    Args:
        pairs: Aligned true/estimated IRs

    Returns:
        (nm_db floored at NM_FLOOR_DB, exact-match flag, excluded zero-norm frames)

    Raises:
        InvalidArgumentError: If every true IR has zero norm
    """
    db, excluded = frame_nm_db(pairs)
    if db.size == 0:
        raise InvalidArgumentError("Every true IR has zero norm; NM is undefined")
    nm = float(np.mean(db))
    exact = bool(np.all(db <= NM_FLOOR_DB))
    return max(nm, NM_FLOOR_DB), exact, excluded


def log_spectral_distortion(pairs: AlignedPair, fft_size: Optional[int] = None,
                            band="full") -> float:
    """
    RMS over frames, speakers and in-band bins of 20*log10(|H| / |H_hat|).

    Args:
        pairs: Aligned true/estimated IRs
        fft_size: One-sided FFT size (default: next power of two >= length)
        band: Preset name or (f_lo, f_hi) in Hz; bins with f_lo < f <= f_hi are used

    Returns:
        LSD in dB

    Raises:
        InvalidArgumentError: fft_size shorter than the IRs, or no bins in band
    """
    fft_size = default_fft_size(pairs.length) if fft_size is None else int(fft_size)
    if fft_size < pairs.length:
        raise InvalidArgumentError(f"FFT size {fft_size} is shorter than {pairs.length} taps")
    lo, hi = resolve_band(band, pairs.sample_rate)
    freqs = sp_fft.rfftfreq(fft_size, d=1.0 / pairs.sample_rate)
    in_band = (freqs > lo) & (freqs <= hi)
    if not np.any(in_band):
        raise InvalidArgumentError(f"No FFT bins between {lo} and {hi} Hz")
    H = np.abs(sp_fft.rfft(pairs.true_ir, n=fft_size, axis=-1))[..., in_band]
    G = np.abs(sp_fft.rfft(pairs.est_ir, n=fft_size, axis=-1))[..., in_band]
    ratio_db = 20.0 * np.log10(np.maximum(H, MAGNITUDE_FLOOR) / np.maximum(G, MAGNITUDE_FLOOR))
    return float(np.sqrt(np.mean(ratio_db ** 2)))


def itd(h_left: np.ndarray, h_right: np.ndarray, sample_rate: float,
        max_lag: Optional[int] = None) -> float:
    """
    Interaural time difference in seconds.

    The lag maximizing the normalized cross-correlation sum_k hL(k) hR(k+tau)
    within |tau| <= max_lag; ties go to the smaller |tau|, and an exact
    +-tau tie returns 0 so that itd(hL, hR) == -itd(hR, hL). A positive
    value means the right ear lags.

    Args:
        h_left: Left-ear IR
        h_right: Right-ear IR of the same length
        sample_rate: Sampling rate in Hz
        max_lag: Largest lag in samples (default 1 ms)

    Raises:
        InvalidArgumentError: On length mismatch, bad max_lag or zero energy
    """
    h_left = np.asarray(h_left, dtype=np.float64)
    h_right = np.asarray(h_right, dtype=np.float64)
    if h_left.shape != h_right.shape or h_left.ndim != 1:
        raise InvalidArgumentError("ITD needs two one-dimensional IRs of equal length")
    K = h_left.size
    if max_lag is None:
        max_lag = min(int(round(DEFAULT_MAX_LAG_SECONDS * sample_rate)), K - 1)
    if not 0 <= max_lag < K:
        raise InvalidArgumentError(f"max_lag must lie in [0, {K}), got {max_lag}")
    energy = np.sqrt(np.dot(h_left, h_left) * np.dot(h_right, h_right))
    if energy == 0:
        raise InvalidArgumentError("ITD is undefined for a zero-energy IR")

    xcorr = sp_signal.correlate(h_right, h_left, mode='full', method='direct') / energy
    lags = sp_signal.correlation_lags(K, K, mode='full')
    window = np.abs(lags) <= max_lag
    xcorr, lags = xcorr[window], lags[window]
    best = xcorr.max()
    candidates = lags[xcorr == best]
    tau = min(candidates, key=abs)
    if tau != 0 and -tau in candidates:
        tau = 0
    return float(tau) / sample_rate


def time_window(ir: np.ndarray, t0: float, t1: float, sample_rate: float) -> np.ndarray:
    """
    Rectangular window keeping samples k with t0*fs <= k < t1*fs (last axis).

    Raises:
        InvalidArgumentError: Unless 0 <= t0 < t1
    """
    if not 0 <= t0 < t1:
        raise InvalidArgumentError(f"Window needs 0 <= t0 < t1, got ({t0}, {t1})")
    ir = np.array(ir, dtype=np.float64, copy=True)
    first = int(np.ceil(round(t0 * sample_rate, 9)))
    last = int(np.ceil(round(t1 * sample_rate, 9)))
    ir[..., :first] = 0.0
    ir[..., last:] = 0.0
    return ir


def otf_compensate(spectrum_est: np.ndarray, spectrum_otf: np.ndarray, reg: float = 0.0) -> np.ndarray:
    """
    Regularized division H * conj(O) / (|O|^2 + reg).

    Raises:
        InvalidArgumentError: On bin-count mismatch or negative reg
    """
    H = np.asarray(spectrum_est)
    O = np.asarray(spectrum_otf)
    if H.shape[-1] != O.shape[-1]:
        raise InvalidArgumentError(f"Spectra have {H.shape[-1]} and {O.shape[-1]} bins")
    if reg < 0:
        raise InvalidArgumentError(f"Regularization must be >= 0, got {reg}")
    with np.errstate(divide='ignore', invalid='ignore'):
        out = H * np.conj(O) / (np.abs(O) ** 2 + reg)
    return out


def otf_compensate_ir(ir: np.ndarray, otf_ir: np.ndarray, reg: float = 0.0,
                      fft_size: Optional[int] = None) -> np.ndarray:
    """Apply otf_compensate in the frequency domain to IRs along the last axis."""
    ir = np.asarray(ir, dtype=np.float64)
    K = ir.shape[-1]
    n = fft_size or default_fft_size(max(K, np.asarray(otf_ir).shape[-1]))
    corrected = otf_compensate(sp_fft.rfft(ir, n=n, axis=-1), sp_fft.rfft(otf_ir, n=n), reg)
    return sp_fft.irfft(corrected, n=n, axis=-1)[..., :K]


def itd_error_table(
    true_set: Mapping[float, Tuple[np.ndarray, np.ndarray]],
    est_set: Mapping[float, Tuple[np.ndarray, np.ndarray]],
    azimuths: Sequence[float],
    sample_rate: float,
    max_lag: Optional[int] = None
) -> list:
    """
    Per-azimuth true and estimated ITDs in microseconds.

    Args:
        true_set: azimuth -> (left IR, right IR)
        est_set: azimuth -> (left IR, right IR)
        azimuths: Azimuths to tabulate
        sample_rate: Sampling rate in Hz
        max_lag: Largest lag in samples

    Returns:
        List of ItdRow in the order of azimuths

    Raises:
        InvalidArgumentError: If an azimuth is missing from either set
    """
    rows = []
    for azimuth in azimuths:
        key = float(azimuth)
        if key not in true_set or key not in est_set:
            raise InvalidArgumentError(f"Azimuth {azimuth} missing from the ITD inputs")
        true_l, true_r = true_set[key]
        est_l, est_r = est_set[key]
        L = max(len(true_l), len(est_l))
        t = itd(zero_pad(true_l, L), zero_pad(true_r, L), sample_rate, max_lag)
        e = itd(zero_pad(est_l, L), zero_pad(est_r, L), sample_rate, max_lag)
        rows.append(ItdRow(azimuth_deg=key, itd_us_true=t * 1e6, itd_us_est=e * 1e6))
    return rows


def evaluate_pairs(pairs: AlignedPair, band="full", fft_size: Optional[int] = None,
                   algo: Optional[str] = None, ear: Optional[str] = None) -> MetricsReport:
    """NM and LSD of one aligned pair set."""
    nm, exact, excluded = normalized_misalignment(pairs)
    lsd = log_spectral_distortion(pairs, fft_size=fft_size, band=band)
    frames = pairs.true_ir.shape[0] * pairs.true_ir.shape[1] - excluded
    return MetricsReport(
        nm_db=nm, lsd_db=lsd, band=resolve_band(band, pairs.sample_rate),
        frames_evaluated=frames, frames_excluded=excluded, exact_match=exact,
        algo=algo, ear=ear
    )


def evaluate_frames(result: IdentificationResult, trajectory, sample_rate: float,
                    band="full", fft_size: Optional[int] = None,
                    window: Optional[Tuple[float, float]] = None) -> MetricsReport:
    """
    Score every stored snapshot against the true IR of the same frame.

    Args:
        result: Identification result
        trajectory: IRTrajectory holding the true IRs
        sample_rate: Sampling rate in Hz
        band: LSD band
        fft_size: LSD FFT size
        window: Optional (t0, t1) rectangular window in seconds

    Raises:
        InvalidArgumentError: On an empty result or mismatched speaker counts
    """
    if result.is_empty:
        raise InvalidArgumentError("Cannot evaluate a result without snapshots")
    if trajectory.S != result.S:
        raise InvalidArgumentError(f"Trajectory has {trajectory.S} speakers, result {result.S}")
    true_ir = trajectory.frames(result.snapshot_indices)
    est_ir = result.snapshots.reshape(-1, result.S, result.K_tilde)
    if window is not None:
        true_ir = time_window(true_ir, window[0], window[1], sample_rate)
        est_ir = time_window(est_ir, window[0], window[1], sample_rate)
    pairs = AlignedPair.build(true_ir, est_ir, sample_rate)
    report = evaluate_pairs(pairs, band=band, fft_size=fft_size, algo=result.algo, ear=result.ear)
    logger.debug("Evaluated %d frames: NM %.2f dB, LSD %.2f dB",
                 report.frames_evaluated, report.nm_db, report.lsd_db)
    return report


def evaluate_grid(est_map: Mapping[float, np.ndarray], true_map: Mapping[float, np.ndarray],
                  sample_rate: float, band="full", fft_size: Optional[int] = None,
                  window: Optional[Tuple[float, float]] = None,
                  algo: Optional[str] = None, ear: Optional[str] = None) -> MetricsReport:
    """
    Score per-azimuth estimates against per-azimuth truths.

    Both maps hold (taps, S) matrices keyed by azimuth; only common azimuths
    are scored.

    Raises:
        InvalidArgumentError: If the maps share no azimuth
    """
    common = [a for a in est_map if a in true_map]
    if not common:
        raise InvalidArgumentError("Estimated and true azimuth grids share no azimuth")
    true_ir = np.stack([np.asarray(true_map[a]).T for a in common])
    est_ir = np.stack([np.asarray(est_map[a]).T for a in common])
    if window is not None:
        true_ir = time_window(true_ir, window[0], window[1], sample_rate)
        est_ir = time_window(est_ir, window[0], window[1], sample_rate)
    pairs = AlignedPair.build(true_ir, est_ir, sample_rate)
    return evaluate_pairs(pairs, band=band, fft_size=fft_size, algo=algo, ear=ear)


def combine_ears(reports: Mapping[str, MetricsReport], itd_table=None) -> MetricsReport:
    """Average NM and LSD over ears, keeping the per-ear values."""
    if not reports:
        raise InvalidArgumentError("No per-ear reports to combine")
    values = list(reports.values())
    first = values[0]
    return MetricsReport(
        nm_db=float(np.mean([r.nm_db for r in values])),
        lsd_db=float(np.mean([r.lsd_db for r in values])),
        band=first.band,
        itd_table=list(itd_table or []),
        frames_evaluated=sum(r.frames_evaluated for r in values),
        frames_excluded=sum(r.frames_excluded for r in values),
        exact_match=all(r.exact_match for r in values),
        algo=first.algo,
        per_ear={ear: {'nm_db': r.nm_db, 'lsd_db': r.lsd_db} for ear, r in reports.items()}
    )
