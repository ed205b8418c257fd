"""
Streaming Identifiers Module

Classical identifiers of the stacked elevation-plane IR vector sharing one
step contract: LMS, NLMS, JO-NLMS (jointly optimized step and
regularization) and a random-walk Kalman filter.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Any, Dict, Optional

import numpy as np

from .. import KALMAN_INITIAL_COVARIANCE, NLMS_EPS_PER_TAP, Algorithms
from .errors import InvalidArgumentError, NumericalFailureError
from .result_models import IdentificationResult, StorePolicy

logger = logging.getLogger(__name__)

# Regressor rows materialized per block while streaming
STREAM_CHUNK = 2048


@dataclass(frozen=True, eq=False)
class StepRecord:
    """Error, ISE and ISE gradient of one frame."""
    e: float
    ise: float
    grad: np.ndarray


@dataclass(frozen=True, eq=False)
class KalmanState:
    """Random-walk Kalman state; cov is a matrix, or its diagonal when diagonal=True."""
    h_hat: np.ndarray
    cov: np.ndarray
    q: float
    r: float
    diagonal: bool = False

    @classmethod
    def initial(cls, width: int, q: float, r: float, p0: float = KALMAN_INITIAL_COVARIANCE,
                diagonal: bool = False) -> 'KalmanState':
        cov = np.full(width, p0) if diagonal else p0 * np.eye(width)
        return cls(h_hat=np.zeros(width), cov=cov, q=q, r=r, diagonal=diagonal)


@dataclass(frozen=True, eq=False)
class JoNlmsState:
    """JO-NLMS state: estimate, misalignment power m and per-tap process variance estimate."""
    h_hat: np.ndarray
    m: float
    sigma_v2: float
    sigma_w2: float = 0.0

    @classmethod
    def initial(cls, width: int, sigma_v2: float, m0: float = 1.0) -> 'JoNlmsState':
        return cls(h_hat=np.zeros(width), m=m0, sigma_v2=sigma_v2)


def _check_dims(x: np.ndarray, h_hat: np.ndarray) -> None:
    if x.shape != h_hat.shape:
        raise InvalidArgumentError(
            f"Regressor length {x.shape} does not match estimate length {h_hat.shape}"
        )


def estimation_error(x: np.ndarray, y: float, h_hat: np.ndarray) -> float:
    """
    Estimation error e = y - x.h_hat.

    Raises:
        InvalidArgumentError: On dimension mismatch
    """
    x = np.asarray(x, dtype=np.float64)
    h_hat = np.asarray(h_hat, dtype=np.float64)
    _check_dims(x, h_hat)
    return float(y - x @ h_hat)


def ise_gradient(x: np.ndarray, e: float) -> np.ndarray:
    """Gradient of the instantaneous square error, x*e."""
    return np.asarray(x, dtype=np.float64) * e


def step_record(x: np.ndarray, y: float, h_hat: np.ndarray) -> StepRecord:
    """Error, ISE and gradient of one frame."""
    e = estimation_error(x, y, h_hat)
    return StepRecord(e=e, ise=e * e, grad=ise_gradient(x, e))


def lms_step(h_hat: np.ndarray, x: np.ndarray, y: float, mu: float) -> np.ndarray:
    """LMS update h_hat + mu*x*e."""
    if mu < 0:
        raise InvalidArgumentError(f"LMS step size must be >= 0, got {mu}")
    e = estimation_error(x, y, h_hat)
    return h_hat + mu * e * np.asarray(x, dtype=np.float64)


def nlms_step(h_hat: np.ndarray, x: np.ndarray, y: float, mu: float, eps: float) -> np.ndarray:
    """NLMS update h_hat + mu*x*e / (x.x + eps)."""
    x = np.asarray(x, dtype=np.float64)
    e = estimation_error(x, y, h_hat)
    return h_hat + (mu * e / (x @ x + eps)) * x


def kalman_step(state: KalmanState, x: np.ndarray, y: float) -> KalmanState:
    """
    One random-walk Kalman recursion.

    P- = P + qI; g = P-x / (x P- x + r); h' = h + g e; P' = P- - g (x P-),
    symmetrized.

    Raises:
        NumericalFailureError: If the innovation variance is not finite and positive
    """
    x = np.asarray(x, dtype=np.float64)
    _check_dims(x, state.h_hat)
    e = float(y - x @ state.h_hat)

    if state.diagonal:
        prior = state.cov + state.q
        px = prior * x
    else:
        prior = state.cov + state.q * np.eye(state.cov.shape[0])
        px = prior @ x

    if np.isposinf(state.r):
        return replace(state, cov=prior)

    innovation = float(x @ px + state.r)
    if not np.isfinite(innovation) or innovation <= 0.0:
        raise NumericalFailureError(f"Kalman innovation variance is {innovation}")

    gain = px / innovation
    h_next = state.h_hat + gain * e
    if state.diagonal:
        cov = prior - gain * px
    else:
        cov = prior - np.outer(gain, px)
        cov = 0.5 * (cov + cov.T)
    return replace(state, h_hat=h_next, cov=cov)


def jo_nlms_step(state: JoNlmsState, x: np.ndarray, y: float) -> JoNlmsState:
    """
    One JO-NLMS recursion.

    With p = m + L*sigma_w2, the step is mu = p / (p*x.x + L*sigma_v2);
    the misalignment power becomes m' = p*(1 - mu*x.x/L) and the process
    variance estimate is refreshed from the update, ||h' - h||^2 / L.
    For sigma_v2 = 0 the step is exactly 1/x.x (NLMS with mu=1, eps=0).

    Raises:
        NumericalFailureError: If the step is not finite
    """
    x = np.asarray(x, dtype=np.float64)
    _check_dims(x, state.h_hat)
    power = float(x @ x)
    if power == 0.0:
        return state

    L = x.size
    p = state.m + L * state.sigma_w2
    if state.sigma_v2 == 0.0:
        mu = 1.0 / power
    else:
        mu = p / (p * power + L * state.sigma_v2)
    if not np.isfinite(mu):
        raise NumericalFailureError(f"JO-NLMS step is {mu}")

    e = float(y - x @ state.h_hat)
    update = (mu * e) * x
    m_next = max(p * (1.0 - mu * power / L), 0.0)
    return replace(
        state,
        h_hat=state.h_hat + update,
        m=m_next,
        sigma_w2=float(update @ update) / L
    )


class StreamingIdentifier(ABC):
    """Mutable single-threaded identifier advancing one frame per call."""

    name: str = ""

    def __init__(self, width: int):
        if width < 1:
            raise InvalidArgumentError(f"Identifier width must be >= 1, got {width}")
        self.width = width

    @property
    @abstractmethod
    def estimate(self) -> np.ndarray:
        """Current flat estimate h_hat."""

    @abstractmethod
    def step(self, x: np.ndarray, y: float) -> float:
        """Consume one frame and return its a-priori error e(n)."""

    @abstractmethod
    def hyperparameters(self) -> Dict[str, Any]:
        """Hyperparameters recorded in result sidecars."""


class LmsIdentifier(StreamingIdentifier):
    name = Algorithms.LMS

    def __init__(self, width: int, mu: float = 0.01):
        super().__init__(width)
        if mu < 0:
            raise InvalidArgumentError(f"LMS step size must be >= 0, got {mu}")
        self.mu = mu
        self._h = np.zeros(width)

    @property
    def estimate(self) -> np.ndarray:
        return self._h

    def step(self, x, y):
        e = float(y - x @ self._h)
        self._h = self._h + self.mu * e * x
        return e

    def hyperparameters(self):
        return {'mu': self.mu}


class NlmsIdentifier(StreamingIdentifier):
    name = Algorithms.NLMS

    def __init__(self, width: int, mu: float = 0.5, eps: Optional[float] = None):
        super().__init__(width)
        self.mu = mu
        self.eps = NLMS_EPS_PER_TAP * width if eps is None else eps
        if self.eps <= 0:
            raise InvalidArgumentError(f"NLMS regularizer must be > 0, got {self.eps}")
        self._h = np.zeros(width)

    @property
    def estimate(self):
        return self._h

    def step(self, x, y):
        e = float(y - x @ self._h)
        self._h = self._h + (self.mu * e / (x @ x + self.eps)) * x
        return e

    def hyperparameters(self):
        return {'mu': self.mu, 'eps': self.eps}


class KalmanIdentifier(StreamingIdentifier):
    name = Algorithms.KALMAN

    def __init__(self, width: int, q: float = 1e-7, r: float = 0.01,
                 p0: float = KALMAN_INITIAL_COVARIANCE, diagonal: bool = False):
        super().__init__(width)
        self.p0 = p0
        self.state = KalmanState.initial(width, q, r, p0=p0, diagonal=diagonal)

    @property
    def estimate(self):
        return self.state.h_hat

    def step(self, x, y):
        e = float(y - x @ self.state.h_hat)
        self.state = kalman_step(self.state, x, y)
        return e

    def hyperparameters(self):
        return {'q': self.state.q, 'r': self.state.r, 'p0': self.p0,
                'diagonal': self.state.diagonal}


class JoNlmsIdentifier(StreamingIdentifier):
    name = Algorithms.JO_NLMS

    def __init__(self, width: int, sigma_v2: float = 0.01, m0: float = 1.0):
        super().__init__(width)
        if sigma_v2 < 0 or m0 < 0:
            raise InvalidArgumentError("JO-NLMS needs sigma_v2 >= 0 and m0 >= 0")
        self.m0 = m0
        self.state = JoNlmsState.initial(width, sigma_v2, m0=m0)

    @property
    def estimate(self):
        return self.state.h_hat

    def step(self, x, y):
        e = float(y - x @ self.state.h_hat)
        self.state = jo_nlms_step(self.state, x, y)
        return e

    def hyperparameters(self):
        return {'sigma_v2': self.state.sigma_v2, 'm0': self.m0}


_IDENTIFIERS = {
    Algorithms.LMS: LmsIdentifier,
    Algorithms.NLMS: NlmsIdentifier,
    Algorithms.KALMAN: KalmanIdentifier,
    Algorithms.JO_NLMS: JoNlmsIdentifier,
}


def make_identifier(algo: str, width: int, **hyperparameters) -> StreamingIdentifier:
    """
    Build a streaming identifier by name.

    Raises:
        InvalidArgumentError: On unknown algorithm names or hyperparameters
    """
    try:
        cls = _IDENTIFIERS[algo]
    except KeyError:
        raise InvalidArgumentError(f"Unknown streaming identifier: {algo!r}") from None
    try:
        return cls(width, **hyperparameters)
    except TypeError as e:
        raise InvalidArgumentError(f"Invalid hyperparameters for {algo}: {e}") from None


def run_identifier(
    algo: StreamingIdentifier,
    bank,
    recording,
    store_policy: StorePolicy,
    rotation=None,
    start: int = 0,
    ear: Optional[str] = None
) -> IdentificationResult:
    """
    Stream an identifier over a recording.

    Args:
        algo: Streaming identifier (state is advanced in place)
        bank: Excitation bank supplying the regressors
        recording: Recording (local time 0 corresponds to global index start)
        store_policy: Which estimates to keep
        rotation: RotationProfile used for theta(n) tags
        start: Global time index of the first recording sample
        ear: Optional ear tag

    Returns:
        IdentificationResult with the full error trace and selected snapshots

    Raises:
        InvalidArgumentError: On dimension mismatch
        NumericalFailureError: Propagated from a step, with the frame index
    """
    N = recording.N
    if bank.width != algo.width:
        raise InvalidArgumentError(
            f"Bank regressor width {bank.width} differs from identifier width {algo.width}"
        )
    if start + N > bank.length:
        raise InvalidArgumentError(f"Recording exceeds bank length {bank.length}")
    if N == 0:
        return IdentificationResult.empty(algo.name, algo.hyperparameters(), bank.S,
                                          bank.tap_count, ear=ear)

    keep = store_policy.select(start, start + N, rotation)
    keep_set = set(keep.tolist())
    snapshots = np.empty((keep.size, algo.width))
    errors = np.empty(N)
    y = recording.y
    stored = 0
    for block in range(0, N, STREAM_CHUNK):
        stop = min(block + STREAM_CHUNK, N)
        X = bank.regressor_matrix(start + block, start + stop)
        for i in range(stop - block):
            n = block + i
            try:
                errors[n] = algo.step(X[i], y[n])
            except NumericalFailureError as e:
                raise NumericalFailureError(
                    f"{algo.name} step failed: {e}", frame=start + n,
                    running_loss=float(np.sum(errors[:n] ** 2))
                ) from e
            if not np.isfinite(errors[n]):
                raise NumericalFailureError(
                    f"{algo.name} diverged", frame=start + n,
                    running_loss=float(np.sum(errors[:n] ** 2))
                )
            if start + n in keep_set:
                snapshots[stored] = algo.estimate
                stored += 1

    theta = rotation.angle(keep) if rotation is not None else np.full(keep.size, np.nan)
    logger.debug("%s streamed %d frames, kept %d snapshots", algo.name, N, keep.size)
    return IdentificationResult(
        algo=algo.name,
        hyperparameters=algo.hyperparameters(),
        N=N,
        S=bank.S,
        K_tilde=bank.tap_count,
        errors=errors,
        snapshot_indices=keep,
        snapshots=snapshots,
        theta=theta,
        ear=ear
    )
