"""
Data models for identification and evaluation results.

This module contains the data structures passed between the identifiers,
the trainer, the metrics and the artifact store: snapshot policies,
identification results, per-segment outcomes, epoch logs and metric reports.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidArgumentError


class StoreMode(Enum):
    """Which estimates an identifier keeps."""
    EVERY = "every"
    STRIDE = "stride"
    AZIMUTHS = "azimuths"


@dataclass
class StorePolicy:
    """Snapshot selection: every frame, every stride-th frame, or nearest to target azimuths."""

    mode: StoreMode = StoreMode.STRIDE
    stride: int = 1
    azimuths: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.mode = StoreMode(self.mode)
        if self.mode is StoreMode.STRIDE and self.stride < 1:
            raise InvalidArgumentError(f"Snapshot stride must be >= 1, got {self.stride}")
        if self.mode is StoreMode.AZIMUTHS and not self.azimuths:
            raise InvalidArgumentError("Azimuth store policy needs at least one target azimuth")

    @classmethod
    def every(cls) -> 'StorePolicy':
        return cls(mode=StoreMode.EVERY)

    @classmethod
    def strided(cls, stride: int) -> 'StorePolicy':
        return cls(mode=StoreMode.STRIDE, stride=stride)

    @classmethod
    def at_azimuths(cls, azimuths: Sequence[float]) -> 'StorePolicy':
        return cls(mode=StoreMode.AZIMUTHS, azimuths=[float(a) for a in azimuths])

    def select(self, start: int, stop: int, rotation=None) -> np.ndarray:
        """
        Global time indices in [start, stop) whose estimates are kept.

        Args:
            start: First global time index
            stop: One past the last global time index
            rotation: RotationProfile, required for the azimuth mode

        Returns:
            Sorted unique index array
        """
        if stop <= start:
            return np.zeros(0, dtype=np.int64)
        if self.mode is StoreMode.EVERY:
            return np.arange(start, stop, dtype=np.int64)
        if self.mode is StoreMode.STRIDE:
            first = start + (-start) % self.stride
            return np.arange(first, stop, self.stride, dtype=np.int64)
        if rotation is None:
            raise InvalidArgumentError("Azimuth store policy needs a rotation profile")
        n = np.arange(start, stop)
        theta = rotation.angle(n)
        picks = []
        for target in self.azimuths:
            distance = np.abs((theta - target + 180.0) % 360.0 - 180.0)
            picks.append(n[int(np.argmin(distance))])
        return np.unique(np.asarray(picks, dtype=np.int64))

    def to_dict(self) -> Dict[str, Any]:
        return {'mode': self.mode.value, 'stride': self.stride, 'azimuths': list(self.azimuths)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'StorePolicy':
        return cls(
            mode=StoreMode(data.get('mode', 'stride')),
            stride=int(data.get('stride', 1)),
            azimuths=[float(a) for a in data.get('azimuths', [])]
        )


@dataclass
class IdentificationResult:
    """
    Output of one identification run.

    snapshots[i] is the estimate after processing frame snapshot_indices[i]
    (i.e. h_hat_{n+1}), tagged with theta(n).
    """

    algo: str
    hyperparameters: Dict[str, Any]
    N: int
    S: int
    K_tilde: int
    errors: np.ndarray
    snapshot_indices: np.ndarray
    snapshots: np.ndarray
    theta: np.ndarray
    segment_boundaries: List[int] = field(default_factory=list)
    failed_segments: List[int] = field(default_factory=list)
    ear: Optional[str] = None

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=np.float64).reshape(-1)
        self.snapshot_indices = np.asarray(self.snapshot_indices, dtype=np.int64).reshape(-1)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        width = self.S * self.K_tilde
        self.snapshots = np.asarray(self.snapshots, dtype=np.float64).reshape(-1, width)
        if not (self.snapshots.shape[0] == self.snapshot_indices.size == self.theta.size):
            raise InvalidArgumentError("Snapshot, index and azimuth counts differ")

    @property
    def ise(self) -> np.ndarray:
        return self.errors ** 2

    @property
    def is_empty(self) -> bool:
        return self.snapshot_indices.size == 0

    def snapshot_matrix(self, i: int) -> np.ndarray:
        """Snapshot i reshaped blockwise from (1, K~S) to (K~, S)."""
        return self.snapshots[i].reshape(self.S, self.K_tilde).T

    def to_dict(self) -> Dict[str, Any]:
        """Metadata for the result sidecar (payloads are stored separately)."""
        return {
            'algo': self.algo,
            'hyperparameters': self.hyperparameters,
            'N': self.N,
            'S': self.S,
            'K_tilde': self.K_tilde,
            'snapshot_indices': self.snapshot_indices.tolist(),
            'theta': self.theta.tolist(),
            'segment_boundaries': list(self.segment_boundaries),
            'failed_segments': list(self.failed_segments),
            'ear': self.ear,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], errors: np.ndarray, snapshots: np.ndarray) -> 'IdentificationResult':
        return cls(
            algo=data['algo'],
            hyperparameters=data.get('hyperparameters', {}),
            N=int(data['N']),
            S=int(data['S']),
            K_tilde=int(data['K_tilde']),
            errors=errors,
            snapshot_indices=np.asarray(data.get('snapshot_indices', []), dtype=np.int64),
            snapshots=snapshots,
            theta=np.asarray(data.get('theta', []), dtype=np.float64),
            segment_boundaries=list(data.get('segment_boundaries', [])),
            failed_segments=list(data.get('failed_segments', [])),
            ear=data.get('ear')
        )

    @classmethod
    def empty(cls, algo: str, hyperparameters: Dict[str, Any], S: int, K_tilde: int,
              ear: Optional[str] = None) -> 'IdentificationResult':
        return cls(
            algo=algo, hyperparameters=hyperparameters, N=0, S=S, K_tilde=K_tilde,
            errors=np.zeros(0), snapshot_indices=np.zeros(0, dtype=np.int64),
            snapshots=np.zeros((0, S * K_tilde)), theta=np.zeros(0), ear=ear
        )

    @classmethod
    def concatenate(cls, parts: Sequence['IdentificationResult'], algo: str,
                    hyperparameters: Dict[str, Any], S: int, K_tilde: int,
                    failed_segments: Sequence[int] = (),
                    ear: Optional[str] = None) -> 'IdentificationResult':
        """Stitch consecutive segment results, recording segment start indices."""
        if not parts:
            return cls.empty(algo, hyperparameters, S, K_tilde, ear=ear)
        boundaries = []
        offset = 0
        for part in parts:
            boundaries.append(offset)
            offset += part.N
        return cls(
            algo=algo,
            hyperparameters=hyperparameters,
            N=offset,
            S=S,
            K_tilde=K_tilde,
            errors=np.concatenate([p.errors for p in parts]),
            snapshot_indices=np.concatenate([p.snapshot_indices for p in parts]),
            snapshots=np.concatenate([p.snapshots for p in parts], axis=0),
            theta=np.concatenate([p.theta for p in parts]),
            segment_boundaries=boundaries,
            failed_segments=list(failed_segments),
            ear=ear
        )


@dataclass
class EpochRecord:
    """One line of the training log."""
    epoch: int
    loss: float
    wall_time: float
    failed: bool = False

    def to_row(self) -> Tuple[int, str, str]:
        return (self.epoch, repr(float(self.loss)), f"{self.wall_time:.6f}")


@dataclass
class SegmentOutcome:
    """Result of training and identifying one segment."""
    index: int
    start: int
    stop: int
    result: Optional[IdentificationResult] = None
    params: Any = None
    epoch_log: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class ItdRow:
    """One azimuth of an ITD comparison table."""
    azimuth_deg: float
    itd_us_true: float
    itd_us_est: float

    @property
    def abs_err_us(self) -> float:
        return abs(self.itd_us_est - self.itd_us_true)

    def to_row(self) -> Tuple[str, str, str, str]:
        return (repr(self.azimuth_deg), repr(self.itd_us_true),
                repr(self.itd_us_est), repr(self.abs_err_us))


@dataclass
class MetricsReport:
    """NM, LSD and ITD summary of one evaluated run."""

    nm_db: float
    lsd_db: float
    band: Tuple[float, float]
    itd_table: List[ItdRow] = field(default_factory=list)
    frames_evaluated: int = 0
    frames_excluded: int = 0
    exact_match: bool = False
    algo: Optional[str] = None
    ear: Optional[str] = None
    per_ear: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'algo': self.algo,
            'ear': self.ear,
            'nm_db': self.nm_db,
            'lsd_db': self.lsd_db,
            'band': list(self.band),
            'frames_evaluated': self.frames_evaluated,
            'frames_excluded': self.frames_excluded,
            'exact_match': self.exact_match,
            'per_ear': self.per_ear,
            'itd_table': [
                {
                    'azimuth_deg': row.azimuth_deg,
                    'itd_us_true': row.itd_us_true,
                    'itd_us_est': row.itd_us_est,
                    'abs_err_us': row.abs_err_us,
                }
                for row in self.itd_table
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MetricsReport':
        return cls(
            nm_db=float(data['nm_db']),
            lsd_db=float(data['lsd_db']),
            band=tuple(data.get('band', (0.0, 0.0))),
            itd_table=[
                ItdRow(row['azimuth_deg'], row['itd_us_true'], row['itd_us_est'])
                for row in data.get('itd_table', [])
            ],
            frames_evaluated=int(data.get('frames_evaluated', 0)),
            frames_excluded=int(data.get('frames_excluded', 0)),
            exact_match=bool(data.get('exact_match', False)),
            algo=data.get('algo'),
            ear=data.get('ear'),
            per_ear=data.get('per_ear', {})
        )
