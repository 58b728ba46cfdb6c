import json
import logging
import math
from pathlib import Path
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, parse_obj_as, validator
from scipy.special import ndtr

from .data import Dataset
from .utils import (
    CheckpointMismatch,
    CheckpointVersionError,
    DimensionMismatch,
    EmptyBatch,
    SpecError,
    pretty_lenient_json,
    rng_stream,
)
from .validation import Activation, BaseSeedLaw, DominatedInit, GaussianInit, GenericDominatedInit, InitSpec

logger = logging.getLogger('alignlab.network')

PARAMS_VERSION = 1
DEFAULT_ZETA = 1e-12
_INV_SQRT_2PI = 1 / math.sqrt(2 * math.pi)


class NetParams(BaseModel):
    """
    θ = (a_j, w_j) of h_θ(x) = Σ_j a_j σ(w_j^⊤x), a has length m and row j of W is w_j.
    """

    a: np.ndarray
    W: np.ndarray
    activation: Activation = Activation.relu
    init_spec: Optional[InitSpec] = None
    seed: Optional[int] = None

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @validator('a', pre=True)
    def check_a(cls, v):
        a = np.array(v, dtype=float)
        if a.ndim != 1 or a.shape[0] < 1:
            raise ValueError(f'a must be a nonempty vector, got shape {a.shape}')
        if not np.all(np.isfinite(a)):
            raise ValueError('a must be finite')
        a.setflags(write=False)
        return a

    @validator('W', pre=True)
    def check_W(cls, v, values):
        W = np.array(v, dtype=float)
        if W.ndim != 2:
            raise ValueError(f'W must be a matrix, got shape {W.shape}')
        if 'a' in values and W.shape[0] != values['a'].shape[0]:
            raise ValueError(f'W has {W.shape[0]} rows but a has length {values["a"].shape[0]}')
        if not np.all(np.isfinite(W)):
            raise ValueError('W must be finite')
        W.setflags(write=False)
        return W

    @property
    def m(self) -> int:
        return self.a.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def replace(self, a: np.ndarray, W: np.ndarray) -> 'NetParams':
        return NetParams(a=a, W=W, activation=self.activation, init_spec=self.init_spec, seed=self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.a, self.W.ravel()])


class ActivationPattern(NamedTuple):
    """
    A_n(w) = (sign(w^⊤x_k))_k in {−1, 0, +1}^n.
    """

    signs: Tuple[int, ...]

    def __neg__(self):
        return ActivationPattern(tuple(-s for s in self.signs))

    @property
    def strict(self) -> bool:
        return 0 not in self.signs

    @classmethod
    def from_array(cls, a) -> 'ActivationPattern':
        return cls(tuple(int(s) for s in a))


def activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.relu:
        return np.maximum(z, 0)
    # exact GeLU z·Φ(z)
    return z * ndtr(z)


def activate_grad(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.relu:
        # the 0 element of the subdifferential at the kink
        return (z > 0).astype(float)
    return ndtr(z) + z * np.exp(-0.5 * z * z) * _INV_SQRT_2PI


def _check_x(params: NetParams, X: np.ndarray):
    if X.shape[-1] != params.d:
        raise DimensionMismatch(f'inputs have dimension {X.shape[-1]}, network expects {params.d}')


def predict(params: NetParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    _check_x(params, X)
    return activate(X @ params.W.T, params.activation) @ params.a


def forward(params: NetParams, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionMismatch(f'forward expects a single input vector, got shape {x.shape}')
    return float(predict(params, x[None, :])[0])


def residuals(params: NetParams, dataset: Dataset) -> np.ndarray:
    """
    h_θ(x_k) − y_k
    """
    return predict(params, dataset.X) - dataset.y


def train_loss(params: NetParams, dataset: Dataset) -> float:
    """
    L(θ) = (1/2n)·Σ_k (h_θ(x_k) − y_k)²
    """
    if dataset.n == 0:
        raise EmptyBatch('empty dataset')
    r = residuals(params, dataset)
    return float(r @ r / (2 * dataset.n))


def train_mse(params: NetParams, dataset: Dataset) -> float:
    return 2 * train_loss(params, dataset)


def grad(params: NetParams, dataset: Dataset, batch_indices=None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact gradient of the loss restricted to `batch_indices` (all points when None).

    With D_i = (1/b)·Σ_k σ'(x_k^⊤w_i)·(y_k − h_θ(x_k))·x_k this is grad_w_i = −a_i·D_i and
    grad_a_i = −(1/b)·Σ_k (y_k − h_θ(x_k))·σ(x_k^⊤w_i), which equals −w_i^⊤D_i for ReLU.
    """
    if batch_indices is None:
        X, y = dataset.X, dataset.y
    else:
        batch_indices = np.asarray(batch_indices)
        if batch_indices.size == 0:
            raise EmptyBatch('empty batch')
        X, y = dataset.X[batch_indices], dataset.y[batch_indices]
    _check_x(params, X)
    Z = X @ params.W.T
    S = activate(Z, params.activation)
    r = y - S @ params.a
    b = X.shape[0]
    D = (activate_grad(Z, params.activation) * r[:, None]).T @ X / b
    grad_W = -params.a[:, None] * D
    grad_a = -(S.T @ r) / b
    return grad_a, grad_W


def activation_pattern(w, dataset: Union[Dataset, np.ndarray], zeta: float = DEFAULT_ZETA) -> ActivationPattern:
    """
    sign(w^⊤x_k) for every data point, |w^⊤x_k| <= ζ·‖w‖·‖x_k‖ counts as 0.
    """
    return ActivationPattern.from_array(pattern_array(w, dataset, zeta))


def pattern_array(w, dataset: Union[Dataset, np.ndarray], zeta: float = DEFAULT_ZETA) -> np.ndarray:
    X = dataset.X if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=float)
    w = np.asarray(w, dtype=float)
    margins = X @ w
    band = zeta * np.linalg.norm(w) * np.linalg.norm(X, axis=1)
    signs = np.sign(margins).astype(np.int8)
    signs[np.abs(margins) <= band] = 0
    return signs


def _check_shapes(params_t: NetParams, params_0: NetParams):
    if params_t.W.shape != params_0.W.shape:
        raise DimensionMismatch(f'parameter shapes differ: {params_t.W.shape} vs {params_0.W.shape}')


def balancedness(params: NetParams) -> np.ndarray:
    return params.a ** 2 - np.sum(params.W ** 2, axis=1)


def balancedness_gap(params_t: NetParams, params_0: NetParams) -> float:
    """
    max_i |(a_i(t)² − ‖w_i(t)‖²) − (a_i(0)² − ‖w_i(0)‖²)|, zero along the exact gradient flow.
    """
    _check_shapes(params_t, params_0)
    return float(np.max(np.abs(balancedness(params_t) - balancedness(params_0))))


def sign_flips(params_t: NetParams, params_0: NetParams) -> int:
    _check_shapes(params_t, params_0)
    return int(np.count_nonzero(np.sign(params_t.a) != np.sign(params_0.a)))


def _unit_ball(rng: np.random.Generator, m: int, d: int) -> np.ndarray:
    g = rng.standard_normal((m, d))
    directions = g / np.linalg.norm(g, axis=1, keepdims=True)
    return directions * rng.uniform(size=(m, 1)) ** (1 / d)


def _random_signs(rng: np.random.Generator, m: int) -> np.ndarray:
    return 2.0 * rng.integers(0, 2, size=m) - 1


def _generic_base(spec: GenericDominatedInit, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    if spec.base_seed_law == BaseSeedLaw.sign_ball:
        return _random_signs(rng, spec.m), _unit_ball(rng, spec.m, spec.d)
    w = rng.standard_normal((spec.m, spec.d)) / math.sqrt(spec.d)
    a = _random_signs(rng, spec.m) * np.linalg.norm(w, axis=1)
    scale = math.sqrt(max(np.mean(a ** 2), 1.0))
    return a / scale, w / scale


def init(spec: InitSpec, seed: int) -> NetParams:
    """
    Draw the initial parameters described by `spec`, deterministic in `seed`.
    """
    rng = rng_stream(seed, 'init')
    m, d = spec.m, spec.d
    if isinstance(spec, DominatedInit):
        scale = spec.lam / math.sqrt(m)
        a = scale * _random_signs(rng, m)
        W = 0.5 * scale * _unit_ball(rng, m, d)
    elif isinstance(spec, GenericDominatedInit):
        a_base, W_base = _generic_base(spec, rng)
        if np.any(np.abs(a_base) < (1 - 1e-12) * np.linalg.norm(W_base, axis=1)) or np.mean(a_base ** 2) > 1 + 1e-12:
            raise SpecError(f'{spec.base_seed_law} draw violates the domination property')
        scale = spec.lam / math.sqrt(m)
        a, W = scale * a_base, scale * W_base
    else:
        assert isinstance(spec, GaussianInit)
        std = math.sqrt(spec.variance)
        a = std * rng.standard_normal(m)
        W = std * rng.standard_normal((m, d))
    return NetParams(a=a, W=W, activation=spec.activation, init_spec=spec, seed=seed)


def params_record(params: NetParams) -> dict:
    return dict(
        version=PARAMS_VERSION,
        activation=params.activation,
        m=params.m,
        d=params.d,
        a=params.a,
        W=params.W,
        init_spec=params.init_spec,
        seed=params.seed,
    )


def params_from_record(record: dict, *, d: int = None) -> NetParams:
    if record.get('version') != PARAMS_VERSION:
        raise CheckpointVersionError(f'unsupported parameter version {record.get("version")!r}')
    if d is not None and record['d'] != d:
        raise CheckpointMismatch(f'parameters have d={record["d"]}, expected {d}')
    init_spec = record.get('init_spec')
    return NetParams(
        a=record['a'],
        W=np.reshape(record['W'], (record['m'], record['d'])),
        activation=record['activation'],
        init_spec=init_spec and parse_obj_as(InitSpec, init_spec),
        seed=record.get('seed'),
    )


def save_params(params: NetParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(pretty_lenient_json(params_record(params)))
    logger.info('saved network parameters m=%d d=%d to %s', params.m, params.d, path)
    return path


def load_params(path: Union[str, Path], *, d: int = None) -> NetParams:
    return params_from_record(json.loads(Path(path).read_text()), d=d)
