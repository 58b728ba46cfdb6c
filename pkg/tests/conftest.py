import pytest

from alignlab.app.data import Dataset, gen_dataset
from alignlab.app.settings import Settings
from alignlab.app.validation import (
    ExperimentConfig,
    LinearTeacher,
    OrthogonalBasisInput,
    StandardGaussianInput,
    StopSpec,
)


def pytest_addoption(parser):
    parser.addoption('--slow', action='store_true', default=False, help='run the slow experiment checks')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--slow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def settings(tmp_path):
    return Settings(out_dir=tmp_path, workers=1, n_test=2000)


@pytest.fixture(name='teacher')
def _fix_teacher():
    return LinearTeacher(beta_star=[1, 0, 0], noise_std=0.3)


@pytest.fixture(name='gaussian_data')
def _fix_gaussian_data(teacher):
    return gen_dataset(StandardGaussianInput(d=3), teacher, 40, seed=7)


@pytest.fixture(name='orthogonal_data')
def _fix_orthogonal_data():
    """
    x_k = e_k in R^2 with y = (1, 1)
    """
    spec = OrthogonalBasisInput(d=2, labels=[1, 1])
    return gen_dataset(spec, LinearTeacher(beta_star=[0, 0]), 2, seed=0)


@pytest.fixture(name='hand_data')
def _fix_hand_data():
    return Dataset(
        X=[[1.0, 0.0]], y=[1.0], input_spec=StandardGaussianInput(d=2), teacher=LinearTeacher(beta_star=[1, 0])
    )


@pytest.fixture(name='config')
def _fix_config(tmp_path):
    return ExperimentConfig(
        name='small',
        d=3,
        m=20,
        data={'kind': 'standard_gaussian'},
        teacher={'kind': 'linear', 'beta_star': [1, 0, 0], 'noise_std': 0.3},
        init={'kind': 'dominated', 'lam': 0.01},
        optimizer={'kind': 'gd', 'lr': 0.05},
        stop=StopSpec(max_steps=200, window_steps=50),
        probe={'every': 50},
        n_values=[20, 40],
        seeds=[0, 1],
        n_test=2000,
        out_dir=tmp_path / 'runs',
    )
