import json
import logging
import math
from functools import lru_cache
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, parse_obj_as, validator

from .utils import DimensionMismatch, NoClosedForm, SpecError, pretty_lenient_json, read_csv, rng_stream, write_csv
from .validation import (
    Assumption1Input,
    InputSpec,
    LinearTeacher,
    OrthogonalBasisInput,
    StandardGaussianInput,
    TeacherSpec,
)

logger = logging.getLogger('alignlab.data')

DATASET_VERSION = 1


def _frozen_array(v, ndim):
    a = np.array(v, dtype=float)
    if a.ndim != ndim:
        raise ValueError(f'expected a {ndim}-dimensional array, got shape {a.shape}')
    if not np.all(np.isfinite(a)):
        raise ValueError('entries must be finite')
    a.setflags(write=False)
    return a


class Dataset(BaseModel):
    """
    n data points (x_k, y_k) with their provenance, X is n×d and y has length n.

    `teacher` and `input_spec` are None for imported data without provenance.
    """

    X: np.ndarray
    y: np.ndarray
    noise: Optional[np.ndarray] = None
    teacher: Optional[TeacherSpec] = None
    input_spec: Optional[InputSpec] = None
    seed: Optional[int] = None

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @validator('X', pre=True)
    def check_X(cls, v):
        return _frozen_array(v, 2)

    @validator('y', pre=True)
    def check_y(cls, v, values):
        y = _frozen_array(v, 1)
        if 'X' in values and values['X'].shape[0] != y.shape[0]:
            raise ValueError(f'X has {values["X"].shape[0]} rows but y has length {y.shape[0]}')
        return y

    @validator('noise', pre=True)
    def check_noise(cls, v, values):
        if v is None:
            return v
        noise = _frozen_array(v, 1)
        if 'y' in values and values['y'].shape != noise.shape:
            raise ValueError('noise must have the same length as y')
        return noise

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def sigma2(self) -> Optional[float]:
        return None if self.teacher is None else self.teacher.noise_std ** 2


class SignSplit(BaseModel):
    pos_indices: np.ndarray
    neg_indices: np.ndarray

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False


def teacher_fn(teacher: TeacherSpec, X: np.ndarray) -> np.ndarray:
    if isinstance(teacher, LinearTeacher):
        return X @ np.asarray(teacher.beta_star)
    betas = np.asarray(teacher.betas)
    return teacher.scale * np.maximum(X @ betas.T, 0).sum(axis=1)


def _check_dims(input_spec: InputSpec, teacher: TeacherSpec):
    if input_spec.d != teacher.d:
        raise DimensionMismatch(f'input spec has d={input_spec.d} but teacher has d={teacher.d}')


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _sample_assumption1(spec: Assumption1Input, n: int, rng: np.random.Generator) -> np.ndarray:
    u = _unit(spec.beta_star)
    signs = 2.0 * rng.integers(0, 2, size=n) - 1
    s = signs * rng.uniform(1 - spec.epsilon, 1 + spec.epsilon, size=n)
    X = s[:, None] * u[None, :]
    if spec.d > 1:
        g = rng.standard_normal((n, spec.d))
        g -= (g @ u)[:, None] * u[None, :]
        v = g / np.linalg.norm(g, axis=1, keepdims=True)
        X += math.sqrt(spec.d - 1) * v
    return X


def sample_inputs(input_spec: InputSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(input_spec, StandardGaussianInput):
        return rng.standard_normal((n, input_spec.d))
    if isinstance(input_spec, Assumption1Input):
        return _sample_assumption1(input_spec, n, rng)
    if n > input_spec.d:
        raise SpecError(f'orthogonal data needs n <= d, got n={n} and d={input_spec.d}')
    return np.eye(input_spec.d)[:n]


def gen_dataset(input_spec: InputSpec, teacher: TeacherSpec, n: int, seed: int) -> Dataset:
    """
    Draw n i.i.d. inputs from `input_spec` and label them as y_k = f*(x_k) + η_k with Gaussian noise of std
    `teacher.noise_std`. For orthogonal data the labels of the spec replace f*.

    Deterministic in `seed`: inputs and noise come from independent streams of the same seed.
    """
    if n < 1:
        raise SpecError(f'n must be at least 1, got {n}')
    _check_dims(input_spec, teacher)
    X = sample_inputs(input_spec, n, rng_stream(seed, 'inputs'))
    if isinstance(input_spec, OrthogonalBasisInput):
        if n != len(input_spec.labels):
            raise DimensionMismatch(f'orthogonal spec carries {len(input_spec.labels)} labels, asked for n={n}')
        signal = np.asarray(input_spec.labels, dtype=float)
    else:
        signal = teacher_fn(teacher, X)
    noise = teacher.noise_std * rng_stream(seed, 'noise').standard_normal(n)
    logger.debug('generated %s dataset n=%d d=%d seed=%d', input_spec.kind, n, input_spec.d, seed)
    return Dataset(X=X, y=signal + noise, noise=noise, teacher=teacher, input_spec=input_spec, seed=seed)


def mirror_dataset(dataset: Dataset) -> Dataset:
    """
    Append -x_k for every x_k, labelled f*(-x_k) + η_k with the noise of the original point.
    """
    if dataset.teacher is None or dataset.noise is None:
        raise SpecError('mirroring needs the teacher and noise provenance of the dataset')
    X_mirror = -dataset.X
    y_mirror = teacher_fn(dataset.teacher, X_mirror) + dataset.noise
    return Dataset(
        X=np.vstack([dataset.X, X_mirror]),
        y=np.concatenate([dataset.y, y_mirror]),
        noise=np.concatenate([dataset.noise, dataset.noise]),
        teacher=dataset.teacher,
        input_spec=dataset.input_spec,
        seed=dataset.seed,
    )


def split_signs(dataset: Dataset, beta) -> SignSplit:
    """
    S+ = {k | x_k^⊤β >= 0}, S- its complement, ties go to S+.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (dataset.d,):
        raise DimensionMismatch(f'beta has shape {beta.shape}, expected ({dataset.d},)')
    if not np.any(beta):
        raise SpecError('cannot split on a zero beta')
    positive = dataset.X @ beta >= 0
    return SignSplit(pos_indices=np.flatnonzero(positive), neg_indices=np.flatnonzero(~positive))


@lru_cache(maxsize=128)
def _assumption1_covariance(beta_star: Tuple[float, ...], epsilon: float) -> np.ndarray:
    u = _unit(beta_star)
    sigma = np.eye(len(beta_star)) + (epsilon ** 2 / 3) * np.outer(u, u)
    sigma.setflags(write=False)
    return sigma


def input_covariance(input_spec: InputSpec) -> np.ndarray:
    """
    Σ = E[xx^⊤] of the input distribution.

    For the Assumption1 construction E[s²] = 1 + ε²/3 along β and the √(d−1)·v part contributes the identity on
    β's orthogonal complement, so Σ = I + (ε²/3)·uu^⊤ with u = β/‖β‖.
    """
    if isinstance(input_spec, StandardGaussianInput):
        return np.eye(input_spec.d)
    if isinstance(input_spec, Assumption1Input):
        return _assumption1_covariance(tuple(input_spec.beta_star), input_spec.epsilon)
    raise NoClosedForm('orthogonal data has no population covariance')


def population_D(input_spec: InputSpec, teacher: TeacherSpec, w) -> np.ndarray:
    """
    D(w) = E[1{w^⊤x>0} y x], which equals Σβ*/2 for every w when the input law is symmetric and the teacher linear.
    """
    if not isinstance(teacher, LinearTeacher):
        raise NoClosedForm(f'no closed form D(w) for a {teacher.kind} teacher')
    if not getattr(input_spec, 'symmetric', False):
        raise NoClosedForm(f'no closed form D(w) for {input_spec.kind} inputs')
    _check_dims(input_spec, teacher)
    w = np.asarray(w, dtype=float)
    if w.shape != (input_spec.d,):
        raise DimensionMismatch(f'w has shape {w.shape}, expected ({input_spec.d},)')
    return input_covariance(input_spec) @ np.asarray(teacher.beta_star) / 2


def sigma_beta(input_spec: InputSpec, teacher: TeacherSpec) -> np.ndarray:
    return 2 * population_D(input_spec, teacher, np.ones(input_spec.d))


def empirical_margin(dataset: Dataset, beta) -> float:
    """
    min_k |x_k^⊤β|·√d / (‖x_k‖·‖β‖)
    """
    beta = np.asarray(beta, dtype=float)
    norms = np.linalg.norm(dataset.X, axis=1) * np.linalg.norm(beta)
    return float(np.min(np.abs(dataset.X @ beta) * math.sqrt(dataset.d) / norms))


def assumption1_report(input_spec: Assumption1Input, beta=None) -> dict:
    """
    Closed form check of the margin and covariance conditions for the Assumption1 generator.
    """
    d, eps = input_spec.d, input_spec.epsilon
    beta = np.asarray(input_spec.beta_star if beta is None else beta, dtype=float)
    # |x^⊤u| >= 1−ε and ‖x‖² <= (1+ε)² + d − 1
    margin = (1 - eps) * math.sqrt(d) / math.sqrt((1 + eps) ** 2 + d - 1)
    cov_gap = eps ** 2 / 3
    bound = min(margin / (2 * math.sqrt(d) * np.linalg.norm(beta)), 3 / 5)
    return dict(margin_lower_bound=margin, cov_op_gap=cov_gap, bound=float(bound), holds=bool(cov_gap < bound))


def export_csv(dataset: Dataset, path: Union[str, Path]) -> Path:
    header = [f'x{i + 1}' for i in range(dataset.d)] + ['y']
    return write_csv(path, header, (list(x) + [y] for x, y in zip(dataset.X, dataset.y)))


def import_csv(path: Union[str, Path]) -> Dataset:
    rows = read_csv(path)
    if not rows:
        raise SpecError(f'{path} contains no data rows')
    columns = [c for c in rows[0] if c != 'y']
    X = [[float(r[c]) for c in columns] for r in rows]
    y = [float(r['y']) for r in rows]
    return Dataset(X=X, y=y)


def export_json(dataset: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = dict(
        version=DATASET_VERSION,
        seed=dataset.seed,
        input_spec=dataset.input_spec,
        teacher=dataset.teacher,
        X=dataset.X,
        y=dataset.y,
        noise=dataset.noise,
    )
    path.write_text(pretty_lenient_json(record))
    return path


def import_json(path: Union[str, Path]) -> Dataset:
    record = json.loads(Path(path).read_text())
    if record.get('version') != DATASET_VERSION:
        raise SpecError(f'unsupported dataset version {record.get("version")!r}')
    return Dataset(
        X=record['X'],
        y=record['y'],
        noise=record.get('noise'),
        teacher=record['teacher'] and parse_obj_as(TeacherSpec, record['teacher']),
        input_spec=record['input_spec'] and parse_obj_as(InputSpec, record['input_spec']),
        seed=record.get('seed'),
    )
