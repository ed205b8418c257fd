"""
Gated Recurrent Identifier Cell

Parameters, identity initialization, and the single-step forward and
reverse passes of the trainable recurrent identifier that maps the ISE
gradient, the regressor power and a hidden state to an additive update of
the stacked IR estimate.
"""

import logging
from dataclasses import dataclass, fields
from typing import Dict, Iterator, NamedTuple, Optional, Tuple

import numpy as np
from scipy.special import expit

from .. import RECIPROCAL_POWER_EPS
from .errors import InvalidArgumentError, NumericalFailureError

logger = logging.getLogger(__name__)

LAYOUT_VERSION = 1

MATRIX_FIELDS = ("W_u", "W_c", "W_r", "U_r", "W_z", "U_z", "W1", "W2", "W3")
VECTOR_FIELDS = ("norm_vec", "b_c", "b_r", "b_z", "b1", "b2", "b3")
GATE_FIELDS = ("W_r", "U_r", "b_r", "W_z", "U_z", "b_z")


@dataclass(eq=False)
class DnnParams:
    """
    All learnable tensors of the recurrent identifier, in checkpoint order.

    norm_vec maps the reciprocal regressor power to a normalization vector;
    W_u, W_c and b_c form the combination of the normalized gradient with
    the reset-gated hidden path; W_r/U_r/b_r and W_z/U_z/b_z are the reset
    and update gates; W1..W3 with b1..b3 form the three-layer head.
    """

    norm_vec: np.ndarray
    W_u: np.ndarray
    W_c: np.ndarray
    b_c: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray
    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.norm_vec).size
        for name in self.field_names():
            value = np.asarray(getattr(self, name), dtype=np.float64)
            expected = (d, d) if name in MATRIX_FIELDS else (d,)
            if value.shape != expected:
                raise InvalidArgumentError(f"{name} has shape {value.shape}, expected {expected}")
            setattr(self, name, value)

    @staticmethod
    def field_names() -> Tuple[str, ...]:
        return tuple(f.name for f in fields(DnnParams))

    @property
    def d(self) -> int:
        return self.norm_vec.size

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.field_names():
            yield name, getattr(self, name)

    def copy(self) -> 'DnnParams':
        return DnnParams(**{name: value.copy() for name, value in self.items()})

    def zeros_like(self) -> 'DnnParams':
        return DnnParams(**{name: np.zeros_like(value) for name, value in self.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(value)) for _, value in self.items())

    def to_dict(self) -> Dict[str, np.ndarray]:
        return dict(self.items())


def count_parameters(params: DnnParams) -> int:
    """Total number of scalars, 9d^2 + 7d."""
    return int(sum(value.size for _, value in params.items()))


def init_identity(d: int, jitter: float = 0.0, seed: Optional[int] = None) -> DnnParams:
    """
    Identity initialization.

    Combination and head weights are identity, all biases zero, norm_vec all
    ones (unit-step NLMS normalization) and gate weights zero so both gates
    start open at 0.5.

    Args:
        d: State width S*K~
        jitter: Optional standard deviation of a seeded perturbation on every tensor
        seed: Seed of the perturbation

    Returns:
        DnnParams

    Raises:
        InvalidArgumentError: If d < 1
    """
    if d < 1:
        raise InvalidArgumentError(f"State width must be >= 1, got {d}")
    eye = np.eye(d)
    zeros_m = np.zeros((d, d))
    zeros_v = np.zeros(d)
    params = DnnParams(
        norm_vec=np.ones(d),
        W_u=eye.copy(), W_c=eye.copy(), b_c=zeros_v.copy(),
        W_r=zeros_m.copy(), U_r=zeros_m.copy(), b_r=zeros_v.copy(),
        W_z=zeros_m.copy(), U_z=zeros_m.copy(), b_z=zeros_v.copy(),
        W1=eye.copy(), b1=zeros_v.copy(),
        W2=eye.copy(), b2=zeros_v.copy(),
        W3=eye.copy(), b3=zeros_v.copy(),
    )
    if jitter > 0:
        rng = np.random.default_rng(seed)
        for name, value in params.items():
            value += jitter * rng.standard_normal(value.shape)
    return params


@dataclass(frozen=True)
class CellOptions:
    """Structural switches used by the ablation variants."""
    use_gates: bool = True
    learnable_norm: bool = True
    eps_p: float = RECIPROCAL_POWER_EPS


class CellCache(NamedTuple):
    """Intermediates of one forward step needed by the reverse pass."""
    grad: np.ndarray
    scale: float
    u: np.ndarray
    c: np.ndarray
    r: np.ndarray
    z: np.ndarray
    g: np.ndarray
    tg: np.ndarray
    h1: np.ndarray
    h2: np.ndarray


def cell_forward(
    params: DnnParams,
    grad: np.ndarray,
    power: float,
    c: np.ndarray,
    options: CellOptions = CellOptions(),
    frame: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray, CellCache]:
    """
    One step of the recurrent identifier.

        p      = 1 / (power + eps_p)
        u      = (norm_vec * p) * grad
        r      = sigmoid(W_r u + U_r c + b_r)
        z      = sigmoid(W_z u + U_z c + b_z)
        g      = W_u u + W_c (r * c) + b_c
        c_next = (1 - z) * c + z * tanh(g)
        delta  = W3 tanh(W2 tanh(W1 g + b1) + b2) + b3

    Args:
        params: Cell parameters
        grad: ISE gradient x*e
        power: Regressor power x.x (>= 0)
        c: Hidden state
        options: Structural switches
        frame: Time index used in failure messages

    Returns:
        (delta, c_next, cache)

    Raises:
        InvalidArgumentError: If power is negative
        NumericalFailureError: If any output is not finite
    """
    if power < 0:
        raise InvalidArgumentError(f"Regressor power must be >= 0, got {power}")
    scale = 1.0 / (power + options.eps_p)
    u = (params.norm_vec * scale) * grad

    if options.use_gates:
        r = expit(params.W_r @ u + params.U_r @ c + params.b_r)
        z = expit(params.W_z @ u + params.U_z @ c + params.b_z)
    else:
        r = np.ones_like(c)
        z = np.ones_like(c)

    g = params.W_u @ u + params.W_c @ (r * c) + params.b_c
    tg = np.tanh(g)
    c_next = (1.0 - z) * c + z * tg

    h1 = np.tanh(params.W1 @ g + params.b1)
    h2 = np.tanh(params.W2 @ h1 + params.b2)
    delta = params.W3 @ h2 + params.b3

    if not (np.all(np.isfinite(delta)) and np.all(np.isfinite(c_next))):
        raise NumericalFailureError("Non-finite identifier cell output", frame=frame)

    return delta, c_next, CellCache(grad, scale, u, c, r, z, g, tg, h1, h2)


def cell_backward(
    params: DnnParams,
    cache: CellCache,
    d_delta: np.ndarray,
    dc_next: np.ndarray,
    grads: DnnParams,
    options: CellOptions = CellOptions()
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Reverse pass of one step, accumulating parameter gradients in place.

    Args:
        params: Cell parameters used in the forward step
        cache: Forward intermediates of the step
        d_delta: Adjoint of the emitted update
        dc_next: Adjoint of the emitted hidden state
        grads: Gradient accumulator (same layout as params)
        options: Structural switches used in the forward step

    Returns:
        (adjoint of the ISE gradient input, adjoint of the incoming hidden state)
    """
    grad, scale, u, c, r, z, g, tg, h1, h2 = cache

    # Head
    grads.W3 += np.outer(d_delta, h2)
    grads.b3 += d_delta
    da2 = (params.W3.T @ d_delta) * (1.0 - h2 * h2)
    grads.W2 += np.outer(da2, h1)
    grads.b2 += da2
    da1 = (params.W2.T @ da2) * (1.0 - h1 * h1)
    grads.W1 += np.outer(da1, g)
    grads.b1 += da1
    dg = params.W1.T @ da1

    # Hidden state blend
    dg += dc_next * z * (1.0 - tg * tg)
    dc = dc_next * (1.0 - z)

    # Combination
    rc = r * c
    grads.W_u += np.outer(dg, u)
    grads.W_c += np.outer(dg, rc)
    grads.b_c += dg
    du = params.W_u.T @ dg
    drc = params.W_c.T @ dg
    dc += drc * r

    if options.use_gates:
        dz = dc_next * (tg - c)
        dr = drc * c
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        grads.W_z += np.outer(daz, u)
        grads.U_z += np.outer(daz, c)
        grads.b_z += daz
        grads.W_r += np.outer(dar, u)
        grads.U_r += np.outer(dar, c)
        grads.b_r += dar
        du += params.W_z.T @ daz + params.W_r.T @ dar
        dc += params.U_z.T @ daz + params.U_r.T @ dar

    # Learnable normalization
    if options.learnable_norm:
        grads.norm_vec += du * grad * scale
    d_grad = du * params.norm_vec * scale
    return d_grad, dc
