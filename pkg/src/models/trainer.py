"""
Recurrent Identifier Training

Whole-sequence training of the gated recurrent identifier: a forward pass
over a segment, the log-mean ISE loss, backpropagation through time with
hand-derived adjoints, Adam parameter updates and a convergence loop that
keeps the best epoch. Long recordings are split into segments trained
independently and stitched back together.
"""

import logging
import math
import time
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import psutil

from .. import LOG_LOSS_EPS, Algorithms
from .dnn_model import CellCache, CellOptions, DnnParams, cell_backward, cell_forward, init_identity
from .errors import IdentificationError, InternalError, InvalidArgumentError, NumericalFailureError
from .identifiers import STREAM_CHUNK
from .result_models import EpochRecord, IdentificationResult, SegmentOutcome, StorePolicy

logger = logging.getLogger(__name__)

# Share of available memory the training cache may occupy
MEMORY_BUDGET_FRACTION = 0.5
# Cached (N, d) arrays per step
CACHE_VECTORS_PER_STEP = 9
MAX_CONSECUTIVE_FAILURES = 3


@dataclass
class TrainerConfig:
    """Hyperparameters of the training loop."""
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 300
    convergence_tol: float = 1e-4
    patience: int = 10
    clip_norm: Optional[float] = None
    seed: int = 0
    init_jitter: float = 0.0
    use_gates: bool = True
    learnable_norm: bool = True
    update_fraction: float = 1.0
    log_every: int = 10
    eps_log: float = LOG_LOSS_EPS

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidArgumentError(f"Learning rate must be positive, got {self.lr}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise InvalidArgumentError("Adam betas must lie in [0, 1)")
        if self.max_epochs < 1:
            raise InvalidArgumentError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise InvalidArgumentError(f"patience must be >= 1, got {self.patience}")
        if not 0 < self.update_fraction <= 1:
            raise InvalidArgumentError(
                f"update_fraction must lie in (0, 1], got {self.update_fraction}"
            )
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise InvalidArgumentError("clip_norm must be positive when set")

    @property
    def cell_options(self) -> CellOptions:
        return CellOptions(use_gates=self.use_gates, learnable_norm=self.learnable_norm)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(eq=False)
class SequenceCache:
    """Per-step forward intermediates of one sequence pass."""
    scale: np.ndarray
    e: np.ndarray
    u: np.ndarray
    c: np.ndarray
    r: np.ndarray
    z: np.ndarray
    g: np.ndarray
    tg: np.ndarray
    h1: np.ndarray
    h2: np.ndarray

    @classmethod
    def allocate(cls, N: int, d: int) -> 'SequenceCache':
        return cls(
            scale=np.empty(N), e=np.empty(N),
            **{name: np.empty((N, d)) for name in ("u", "c", "r", "z", "g", "tg", "h1", "h2")}
        )


@dataclass(eq=False)
class SequenceRun:
    """Outcome of one forward pass."""
    result: IdentificationResult
    loss_sum: float
    h_final: np.ndarray
    c_final: np.ndarray
    cache: Optional[SequenceCache] = None

    @property
    def errors(self) -> np.ndarray:
        return self.result.errors


def estimate_cache_bytes(N: int, d: int) -> int:
    """Bytes held by a SequenceCache of N steps at width d."""
    return 8 * N * (CACHE_VECTORS_PER_STEP * d + 2)


def check_memory_budget(N: int, d: int) -> None:
    """
    Refuse a training pass whose cache would exceed the memory budget.

    Raises:
        InvalidArgumentError: If the cache exceeds the budget
    """
    needed = estimate_cache_bytes(N, d)
    available = psutil.virtual_memory().available
    if needed > MEMORY_BUDGET_FRACTION * available:
        raise InvalidArgumentError(
            f"Training cache needs {needed / 2**20:.1f} MiB but only "
            f"{available / 2**20:.1f} MiB are available; use more segments"
        )


def training_loss(loss_sum: float, N: int, eps_log: float = LOG_LOSS_EPS) -> float:
    """Log-mean ISE ln(L/N + eps_log)."""
    if N < 1:
        raise InvalidArgumentError("Training loss needs at least one frame")
    return math.log(loss_sum / N + eps_log)


def identify_sequence(
    params: DnnParams,
    bank,
    recording,
    h0: Optional[np.ndarray] = None,
    c0: Optional[np.ndarray] = None,
    store_policy: Optional[StorePolicy] = None,
    rotation=None,
    start: int = 0,
    options: CellOptions = CellOptions(),
    keep_cache: bool = False,
    ear: Optional[str] = None
) -> SequenceRun:
    """
    Run the recurrent identifier over a recording.

    Args:
        params: Cell parameters
        bank: Excitation bank supplying the regressors
        recording: Recording whose local time 0 is global index start
        h0: Initial estimate (zeros by default)
        c0: Initial hidden state (zeros by default)
        store_policy: Which estimates to keep (none by default)
        rotation: RotationProfile used for theta(n) tags
        start: Global index of the first sample
        options: Structural switches
        keep_cache: Keep forward intermediates for backpropagation
        ear: Optional ear tag

    Returns:
        SequenceRun with the error trace, ISE sum and final states

    Raises:
        InvalidArgumentError: On dimension mismatch
        NumericalFailureError: On a non-finite step, with frame and running loss
    """
    d = bank.width
    N = recording.N
    if params.d != d:
        raise InvalidArgumentError(f"Parameter width {params.d} differs from regressor width {d}")
    if start + N > bank.length:
        raise InvalidArgumentError(f"Recording exceeds bank length {bank.length}")

    h = np.zeros(d) if h0 is None else np.array(h0, dtype=np.float64)
    c = np.zeros(d) if c0 is None else np.array(c0, dtype=np.float64)
    if h.shape != (d,) or c.shape != (d,):
        raise InvalidArgumentError("Initial states must have the regressor width")

    keep = (store_policy.select(start, start + N, rotation) if store_policy is not None
            else np.zeros(0, dtype=np.int64))
    keep_set = set(keep.tolist())
    snapshots = np.empty((keep.size, d))
    stored = 0

    cache = SequenceCache.allocate(N, d) if keep_cache else None
    errors = np.empty(N)
    y = recording.y
    loss_sum = 0.0
    for block in range(0, N, STREAM_CHUNK):
        stop = min(block + STREAM_CHUNK, N)
        X = bank.regressor_matrix(start + block, start + stop)
        for i in range(stop - block):
            n = block + i
            x = X[i]
            e = float(y[n] - x @ h)
            try:
                delta, c_next, step = cell_forward(
                    params, x * e, float(x @ x), c, options, frame=start + n
                )
            except NumericalFailureError as exc:
                raise NumericalFailureError(
                    "Recurrent identifier produced a non-finite update",
                    frame=start + n, running_loss=loss_sum
                ) from exc
            errors[n] = e
            loss_sum += e * e
            if cache is not None:
                cache.scale[n] = step.scale
                cache.e[n] = e
                cache.u[n] = step.u
                cache.c[n] = c
                cache.r[n] = step.r
                cache.z[n] = step.z
                cache.g[n] = step.g
                cache.tg[n] = step.tg
                cache.h1[n] = step.h1
                cache.h2[n] = step.h2
            h = h + delta
            c = c_next
            if start + n in keep_set:
                snapshots[stored] = h
                stored += 1

    if not math.isfinite(loss_sum):
        raise NumericalFailureError("ISE sum is not finite", frame=start + N - 1,
                                    running_loss=loss_sum)

    theta = rotation.angle(keep) if rotation is not None else np.full(keep.size, np.nan)
    result = IdentificationResult(
        algo=Algorithms.DNN, hyperparameters={}, N=N, S=bank.S, K_tilde=bank.tap_count,
        errors=errors, snapshot_indices=keep, snapshots=snapshots, theta=theta, ear=ear
    )
    return SequenceRun(result=result, loss_sum=loss_sum, h_final=h, c_final=c, cache=cache)


def backprop_sequence(
    params: DnnParams,
    bank,
    run: SequenceRun,
    start: int = 0,
    options: CellOptions = CellOptions(),
    eps_log: float = LOG_LOSS_EPS
) -> DnnParams:
    """
    Gradient of ln(L/N + eps_log) with respect to every parameter.

    Reverse-time recursion over the cached forward pass; the adjoints of the
    estimate and the hidden state start at zero after the last frame.

    Args:
        params: Parameters used in the forward pass
        bank: Excitation bank of the forward pass
        run: Forward pass made with keep_cache=True
        start: Global index of the first sample of the forward pass
        options: Structural switches of the forward pass
        eps_log: Loss floor

    Returns:
        DnnParams holding the gradients (norm_vec slot exactly zero when frozen)

    Raises:
        InternalError: If the run carries no cache
    """
    cache = run.cache
    if cache is None:
        raise InternalError("Backpropagation needs a forward pass with keep_cache=True")
    N = run.result.N
    d = params.d
    grads = params.zeros_like()
    w = 1.0 / (run.loss_sum + N * eps_log)

    dh = np.zeros(d)
    dc = np.zeros(d)
    for block_stop in range(N, 0, -STREAM_CHUNK):
        block = max(block_stop - STREAM_CHUNK, 0)
        X = bank.regressor_matrix(start + block, start + block_stop)
        for i in range(block_stop - block - 1, -1, -1):
            n = block + i
            x = X[i]
            e = cache.e[n]
            step = CellCache(x * e, cache.scale[n], cache.u[n], cache.c[n], cache.r[n], cache.z[n],
                    cache.g[n], cache.tg[n], cache.h1[n], cache.h2[n])
            d_grad, dc = cell_backward(params, step, dh, dc, grads, options)
            de = float(x @ d_grad) + 2.0 * w * e
            dh = dh - x * de
    return grads


@dataclass(eq=False)
class AdamState:
    """First and second moment estimates with the step counter."""
    m: DnnParams
    v: DnnParams
    t: int = 0

    @classmethod
    def zeros(cls, params: DnnParams) -> 'AdamState':
        return cls(m=params.zeros_like(), v=params.zeros_like())


def global_norm(grads: DnnParams) -> float:
    return math.sqrt(sum(float(np.sum(value * value)) for _, value in grads.items()))


def adam_step(params: DnnParams, grads: DnnParams, state: AdamState,
              config: TrainerConfig) -> Tuple[DnnParams, AdamState]:
    """
    One bias-corrected Adam update, with optional global-norm clipping.

    Args:
        params: Current parameters (not modified)
        grads: Loss gradients
        state: Optimizer moments (not modified)
        config: Learning rate, betas, epsilon and clip norm

    Returns:
        (updated parameters, updated optimizer state)
    """
    scale = 1.0
    if config.clip_norm is not None:
        norm = global_norm(grads)
        if norm > config.clip_norm:
            scale = config.clip_norm / norm

    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    m = params.zeros_like()
    v = params.zeros_like()
    new_params = params.copy()
    for name, g in grads.items():
        g = g * scale
        m_t = b1 * getattr(state.m, name) + (1.0 - b1) * g
        v_t = b2 * getattr(state.v, name) + (1.0 - b2) * g * g
        m_hat = m_t / (1.0 - b1 ** t)
        v_hat = v_t / (1.0 - b2 ** t)
        getattr(new_params, name)[...] -= config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        getattr(m, name)[...] = m_t
        getattr(v, name)[...] = v_t
    return new_params, AdamState(m=m, v=v, t=t)


@dataclass(eq=False)
class TrainingOutcome:
    """Best parameters and the per-epoch log of one training run."""
    params: DnnParams
    epoch_log: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 1
    best_loss: float = math.inf
    converged: bool = False

    @property
    def initial_loss(self) -> float:
        for record in self.epoch_log:
            if not record.failed:
                return record.loss
        return math.nan


def _windows(N: int, fraction: float) -> List[Tuple[int, int]]:
    """Consecutive update windows covering [0, N)."""
    length = max(1, int(math.ceil(N * fraction)))
    return [(lo, min(lo + length, N)) for lo in range(0, N, length)]


def _run_epoch(params: DnnParams, state: AdamState, bank, recording, config: TrainerConfig,
               start: int) -> Tuple[float, DnnParams, AdamState]:
    """
    One epoch: forward, loss, backward and update per window.

    Estimate and hidden state carry over between windows without gradient flow.

    Returns:
        (epoch loss evaluated at the parameters on entry of each window, new params, new state)
    """
    options = config.cell_options
    h = None
    c = None
    total = 0.0
    for lo, hi in _windows(recording.N, config.update_fraction):
        run = identify_sequence(
            params, bank, recording.segment(lo, hi), h0=h, c0=c, start=start + lo,
            options=options, keep_cache=True
        )
        grads = backprop_sequence(params, bank, run, start=start + lo, options=options,
                                  eps_log=config.eps_log)
        if not grads.is_finite():
            raise NumericalFailureError("Non-finite gradient", frame=start + hi - 1,
                                        running_loss=total + run.loss_sum)
        params, state = adam_step(params, grads, state, config)
        total += run.loss_sum
        h, c = run.h_final, run.c_final
    return training_loss(total, recording.N, config.eps_log), params, state


def train(bank, recording, config: TrainerConfig, start: int = 0,
          initial: Optional[DnnParams] = None) -> TrainingOutcome:
    """
    Train the recurrent identifier on one recording segment.

    Epochs repeat until the relative loss improvement stays below
    convergence_tol for patience epochs or max_epochs is reached. The
    parameters of the lowest-loss epoch are returned. A failed epoch reverts
    to the best parameters, resets the optimizer and halves the learning
    rate; three consecutive failures abort.

    Args:
        bank: Excitation bank
        recording: Training recording (local time 0 is global index start)
        config: Trainer configuration
        start: Global index of the first sample
        initial: Starting parameters (identity initialization by default)

    Returns:
        TrainingOutcome

    Raises:
        InvalidArgumentError: On bad sizes or when the cache exceeds the memory budget
        NumericalFailureError: After three consecutive failed epochs
    """
    d = bank.width
    if recording.N < 1:
        raise InvalidArgumentError("Training needs at least one frame")
    window = _windows(recording.N, config.update_fraction)[0]
    check_memory_budget(window[1] - window[0], d)

    params = initial.copy() if initial is not None else init_identity(
        d, jitter=config.init_jitter, seed=config.seed
    )
    state = AdamState.zeros(params)
    lr_config = config
    outcome = TrainingOutcome(params=params.copy())
    previous = None
    stalled = 0
    failures = 0

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        entry = params
        try:
            loss, params, state = _run_epoch(params, state, bank, recording, lr_config, start)
        except NumericalFailureError as e:
            failures += 1
            outcome.epoch_log.append(EpochRecord(epoch, math.nan, time.perf_counter() - t0, failed=True))
            logger.warning("Epoch %d failed (%d in a row): %s", epoch, failures, e)
            if failures >= MAX_CONSECUTIVE_FAILURES:
                raise NumericalFailureError(
                    f"Training aborted after {failures} consecutive failed epochs",
                    frame=e.frame, running_loss=e.running_loss
                ) from e
            params = outcome.params.copy()
            state = AdamState.zeros(params)
            lr_config = TrainerConfig(**{**lr_config.to_dict(), 'lr': lr_config.lr / 2})
            continue
        failures = 0
        outcome.epoch_log.append(EpochRecord(epoch, loss, time.perf_counter() - t0))

        if loss < outcome.best_loss:
            outcome.best_loss = loss
            outcome.best_epoch = epoch
            # Loss of the update window schedule is measured at the entry parameters
            outcome.params = entry.copy() if config.update_fraction >= 1 else params.copy()

        if config.log_every and epoch % config.log_every == 0:
            logger.info("Epoch %d loss %.6f (best %.6f at %d)", epoch, loss,
                        outcome.best_loss, outcome.best_epoch)

        if previous is not None:
            improvement = (previous - loss) / max(abs(previous), 1e-30)
            stalled = stalled + 1 if improvement < config.convergence_tol else 0
            if stalled >= config.patience:
                outcome.converged = True
                logger.info("Converged after %d epochs", epoch)
                break
        previous = loss

    return outcome


def segment_bounds(N: int, segments: int) -> List[Tuple[int, int]]:
    """Split [0, N) into exactly `segments` contiguous parts whose lengths differ by at most one."""
    if segments < 1:
        raise InvalidArgumentError(f"Segment count must be >= 1, got {segments}")
    if N < segments:
        raise InvalidArgumentError(f"Cannot split {N} frames into {segments} segments")
    return [(i * N // segments, (i + 1) * N // segments) for i in range(segments)]


def train_segment(index: int, lo: int, hi: int, bank, recording, config: TrainerConfig,
                  store_policy: StorePolicy, rotation, ear: Optional[str]) -> SegmentOutcome:
    """Train on one segment and identify it with the best parameters."""
    part = recording.segment(lo, hi)
    try:
        trained = train(bank, part, config, start=lo)
        run = identify_sequence(trained.params, bank, part, store_policy=store_policy,
                                rotation=rotation, start=lo, options=config.cell_options,
                                ear=ear)
    except IdentificationError as e:
        logger.error("Segment %d [%d, %d) failed: %s", index, lo, hi, e)
        return SegmentOutcome(index=index, start=lo, stop=hi, error=str(e))
    return SegmentOutcome(
        index=index, start=lo, stop=hi, result=run.result, params=trained.params,
        epoch_log=trained.epoch_log, best_epoch=trained.best_epoch
    )


def _failed_part(outcome: SegmentOutcome, S: int, K_tilde: int, ear) -> IdentificationResult:
    n = outcome.stop - outcome.start
    return IdentificationResult(
        algo=Algorithms.DNN, hyperparameters={}, N=n, S=S, K_tilde=K_tilde,
        errors=np.full(n, np.nan), snapshot_indices=np.zeros(0, dtype=np.int64),
        snapshots=np.zeros((0, S * K_tilde)), theta=np.zeros(0), ear=ear
    )


@dataclass(eq=False)
class SegmentedOutcome:
    """Stitched identification result and the per-segment training outcomes."""
    result: IdentificationResult
    segments: List[SegmentOutcome]


def segment_and_train(
    bank,
    recording,
    segments: int,
    config: TrainerConfig,
    store_policy: StorePolicy,
    rotation=None,
    executor: Optional[Executor] = None,
    ear: Optional[str] = None
) -> SegmentedOutcome:
    """
    Train and identify each segment independently, then stitch the results.

    Segments start from zero estimate and hidden state. With an executor the
    segments run concurrently; the output does not depend on scheduling.
    Failed segments keep NaN errors and no snapshots and are listed in
    failed_segments.

    Args:
        bank: Excitation bank
        recording: Full recording
        segments: Number of segments M
        config: Trainer configuration
        store_policy: Which estimates to keep
        rotation: RotationProfile used for theta(n) tags
        executor: Optional executor for concurrent segments
        ear: Optional ear tag

    Returns:
        SegmentedOutcome
    """
    bounds = segment_bounds(recording.N, segments)
    args = [(i, lo, hi, bank, recording, config, store_policy, rotation, ear)
            for i, (lo, hi) in enumerate(bounds)]
    if executor is None:
        outcomes = [train_segment(*a) for a in args]
    else:
        futures = [executor.submit(train_segment, *a) for a in args]
        outcomes = [f.result() for f in futures]

    return stitch_segments(outcomes, bank.S, bank.tap_count, config, ear=ear)


def stitch_segments(outcomes: List[SegmentOutcome], S: int, K_tilde: int, config: TrainerConfig,
                    ear: Optional[str] = None) -> SegmentedOutcome:
    """
    Join per-segment outcomes (in segment order) into one identification result.

    Failed segments keep NaN errors and no snapshots and are listed in
    failed_segments.
    """
    outcomes = sorted(outcomes, key=lambda o: o.index)
    parts = [o.result if not o.failed else _failed_part(o, S, K_tilde, ear) for o in outcomes]
    failed = [o.index for o in outcomes if o.failed]
    hyperparameters = {**config.to_dict(), 'segments': len(outcomes)}
    result = IdentificationResult.concatenate(
        parts, Algorithms.DNN, hyperparameters, S, K_tilde, failed_segments=failed, ear=ear
    )
    logger.info("Identified %d segments (%d failed)", len(outcomes), len(failed))
    return SegmentedOutcome(result=result, segments=outcomes)
