from pathlib import Path

from pydantic import BaseSettings, confloat, conint, validator


class Settings(BaseSettings):
    workers: conint(ge=1) = 1
    out_dir: Path = Path('runs')

    # activation patterns and extremal certification
    pattern_zeta: confloat(gt=0) = 1e-12
    certify_tol: confloat(gt=0) = 1e-9
    max_boundary_vertices: conint(ge=0) = 12

    # exact hyperplane arrangement enumeration budget
    exact_max_d: conint(ge=1) = 4
    exact_max_n: conint(ge=1) = 64
    cell_perturbation: confloat(gt=0) = 1e-7
    sampled_cell_budget: conint(ge=1) = 100_000

    # analysis
    n_test: conint(ge=1) = 100_000
    interpolation_tol: confloat(gt=0) = 1 / 3
    interpolation_abs_tol: confloat(gt=0) = 1e-4
    dormant_ratio: confloat(ge=0, lt=1) = 1e-3
    cluster_cos: confloat(gt=0, lt=1) = 0.95

    divergence_factor: confloat(gt=1) = 1e6

    @validator('out_dir', pre=True)
    def expand_out_dir(cls, v):
        return Path(v).expanduser()

    class Config:
        env_prefix = 'ALIGNLAB_'
        fields = {
            'workers': {'env': 'ALIGNLAB_WORKERS'},
            'out_dir': {'env': 'ALIGNLAB_OUT_DIR'},
        }
