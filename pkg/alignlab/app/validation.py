import math
from enum import Enum, unique
from pathlib import Path
from typing import ClassVar, List, Literal, Optional, Union

from pydantic import BaseModel, confloat, conint, conlist, root_validator, validator

from .utils import sha256_hex


class SpecModel(BaseModel):
    class Config:
        allow_mutation = False
        extra = 'forbid'


def _finite_vector(v, name):
    if not all(math.isfinite(x) for x in v):
        raise ValueError(f'{name} must be finite')
    return v


@unique
class Activation(str, Enum):
    relu = 'relu'
    gelu = 'gelu'


class StandardGaussianInput(SpecModel):
    kind: Literal['standard_gaussian'] = 'standard_gaussian'
    d: conint(ge=1)

    symmetric: ClassVar[bool] = True


class Assumption1Input(SpecModel):
    """
    x = s·β/‖β‖ + √(d−1)·v, v uniform on the unit sphere of β's orthogonal complement and s uniform on
    [−1−ε,−1+ε] ∪ [1−ε,1+ε].
    """

    kind: Literal['assumption1'] = 'assumption1'
    d: conint(ge=1)
    beta_star: List[float]
    epsilon: confloat(gt=0, lt=1) = 0.1

    symmetric: ClassVar[bool] = True

    @validator('beta_star')
    def check_beta(cls, v, values):
        _finite_vector(v, 'beta_star')
        if not any(v):
            raise ValueError('beta_star must be nonzero')
        if 'd' in values and len(v) != values['d']:
            raise ValueError(f'beta_star has length {len(v)}, expected d={values["d"]}')
        return v


class OrthogonalBasisInput(SpecModel):
    kind: Literal['orthogonal'] = 'orthogonal'
    d: conint(ge=1)
    labels: conlist(float, min_items=1)

    symmetric: ClassVar[bool] = False

    @validator('labels')
    def check_labels(cls, v, values):
        _finite_vector(v, 'labels')
        if 'd' in values and len(v) > values['d']:
            raise ValueError(f'orthogonal data needs n <= d, got n={len(v)} and d={values["d"]}')
        return v


InputSpec = Union[StandardGaussianInput, Assumption1Input, OrthogonalBasisInput]


class LinearTeacher(SpecModel):
    kind: Literal['linear'] = 'linear'
    beta_star: conlist(float, min_items=1)
    noise_std: confloat(ge=0) = 0.0

    @validator('beta_star')
    def check_beta(cls, v):
        return _finite_vector(v, 'beta_star')

    @property
    def d(self):
        return len(self.beta_star)


class KReluTeacher(SpecModel):
    """
    f*(x) = scale·Σ_i (β_i^⊤x)₊
    """

    kind: Literal['k_relu'] = 'k_relu'
    betas: conlist(List[float], min_items=1)
    scale: confloat(gt=0) = 0.2
    noise_std: confloat(ge=0) = 0.0

    @validator('betas')
    def check_betas(cls, v):
        if len({len(b) for b in v}) != 1 or not v[0]:
            raise ValueError('all betas must share the same nonzero length')
        for b in v:
            _finite_vector(b, 'betas')
        return v

    @property
    def d(self):
        return len(self.betas[0])


TeacherSpec = Union[LinearTeacher, KReluTeacher]


class InitBase(SpecModel):
    m: conint(ge=1)
    d: conint(ge=1)
    activation: Activation = Activation.relu


class DominatedInit(InitBase):
    """
    w_i ~ 0.5·λ·m^(-1/2)·U(unit ball), a_i ~ λ·m^(-1/2)·U{−1, +1}
    """

    kind: Literal['dominated'] = 'dominated'
    lam: confloat(gt=0)


@unique
class BaseSeedLaw(str, Enum):
    sign_ball = 'sign_ball'
    gaussian_balanced = 'gaussian_balanced'


class GenericDominatedInit(InitBase):
    kind: Literal['generic_dominated'] = 'generic_dominated'
    lam: confloat(gt=0)
    base_seed_law: BaseSeedLaw = BaseSeedLaw.sign_ball


@unique
class VarianceRule(str, Enum):
    over_m = 'over_m'
    over_sqrt_m = 'over_sqrt_m'


class GaussianInit(InitBase):
    kind: Literal['gaussian'] = 'gaussian'
    variance_rule: VarianceRule = VarianceRule.over_m
    base_variance: confloat(gt=0) = 1e-5

    @property
    def variance(self):
        if self.variance_rule == VarianceRule.over_m:
            return self.base_variance / self.m
        return self.base_variance / math.sqrt(self.m)


InitSpec = Union[DominatedInit, GenericDominatedInit, GaussianInit]


class ConstantSchedule(SpecModel):
    kind: Literal['constant'] = 'constant'


class GeometricSchedule(SpecModel):
    kind: Literal['geometric'] = 'geometric'
    factor: confloat(gt=0, le=1) = 0.85
    every_steps: conint(ge=1) = 50_000


Schedule = Union[ConstantSchedule, GeometricSchedule]


class GD(SpecModel):
    kind: Literal['gd'] = 'gd'
    lr: confloat(gt=0) = 0.01
    schedule: Schedule = ConstantSchedule()

    batch_size: ClassVar[Optional[int]] = None


class SGD(SpecModel):
    kind: Literal['sgd'] = 'sgd'
    lr: confloat(gt=0) = 0.01
    batch_size: conint(ge=1) = 32
    schedule: Schedule = ConstantSchedule()


class Adam(SpecModel):
    kind: Literal['adam'] = 'adam'
    lr: confloat(gt=0) = 0.001
    beta1: confloat(ge=0, lt=1) = 0.9
    beta2: confloat(ge=0, lt=1) = 0.999
    eps: confloat(gt=0) = 1e-8
    batch_size: Optional[conint(ge=1)] = 32
    schedule: Schedule = ConstantSchedule()


OptimizerSpec = Union[GD, SGD, Adam]


class StopSpec(SpecModel):
    max_steps: conint(ge=1) = 800_000
    loss_tol: confloat(ge=0) = 1e-8
    param_rel_change_tol: confloat(ge=0) = 1e-7
    window_steps: conint(ge=1) = 10_000


class ProbeSpec(SpecModel):
    every: conint(ge=1) = 1000
    trajectory: bool = True


@unique
class ExperimentKind(str, Enum):
    sweep = 'sweep'
    single = 'single'
    stability = 'stability'
    concentration = 'concentration'
    extremal = 'extremal'
    align_probe = 'align_probe'


@unique
class CellMode(str, Enum):
    auto = 'auto'
    exact = 'exact'
    sampled = 'sampled'


class ExperimentConfig(SpecModel):
    kind: ExperimentKind = ExperimentKind.sweep
    name: str = 'experiment'
    d: conint(ge=1) = 5
    m: conint(ge=1) = 1000
    data: InputSpec
    teacher: TeacherSpec
    init: InitSpec
    optimizer: OptimizerSpec = SGD()
    stop: StopSpec = StopSpec()
    probe: ProbeSpec = ProbeSpec()
    n_values: conlist(conint(ge=1), min_items=1) = [100, 500, 2000, 5000]
    seeds: conlist(int, min_items=1) = [0, 1, 2]
    n_test: conint(ge=1) = 100_000
    out_dir: Path = Path('runs')
    save_checkpoints: bool = False

    # stability
    checkpoint: Optional[Path] = None
    lr_floor_ratio: confloat(gt=0, lt=1) = 1e-8

    # concentration and extremal
    cell_mode: CellMode = CellMode.auto
    cell_budget: conint(ge=1) = 100_000
    mirror: bool = False

    # early alignment probe
    epsilon: confloat(gt=0, lt=1) = 0.2
    lambdas: conlist(confloat(gt=0), min_items=1) = [1e-3, 1e-4]

    @root_validator(pre=True)
    def fill_dimensions(cls, values):
        d, m = values.get('d', 5), values.get('m', 1000)
        for field in ('data', 'init'):
            v = values.get(field)
            if isinstance(v, dict):
                v = dict(v)
                v.setdefault('d', d)
                if field == 'init':
                    v.setdefault('m', m)
                values[field] = v
        return values

    @validator('n_values')
    def check_n_values(cls, v):
        if list(v) != sorted(v):
            raise ValueError('n_values must be sorted ascending')
        return v

    @root_validator(skip_on_failure=True)
    def check_dimensions(cls, values):
        d, m = values['d'], values['m']
        if values['data'].d != d:
            raise ValueError(f'data spec has d={values["data"].d}, expected {d}')
        if values['teacher'].d != d:
            raise ValueError(f'teacher has d={values["teacher"].d}, expected {d}')
        init = values['init']
        if (init.m, init.d) != (m, d):
            raise ValueError(f'init spec has (m, d)=({init.m}, {init.d}), expected ({m}, {d})')
        return values

    def fingerprint(self) -> str:
        return sha256_hex(self.dict(exclude={'name', 'out_dir'}))[:16]
