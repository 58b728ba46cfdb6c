import math

import numpy as np
import pytest

from alignlab.app.data import gen_dataset
from alignlab.app.network import NetParams, init, train_loss
from alignlab.app.optim import (
    BatchSampler,
    OptState,
    Trainer,
    apply_update,
    learning_rate,
    load_checkpoint,
    step,
    train,
)
from alignlab.app.utils import (
    CheckpointCorrupted,
    CheckpointMismatch,
    CheckpointVersionError,
    NonFiniteGradient,
    TrainingDiverged,
    read_csv,
    rng_stream,
)
from alignlab.app.validation import (
    GD,
    SGD,
    Adam,
    DominatedInit,
    GeometricSchedule,
    ProbeSpec,
    StandardGaussianInput,
    StopSpec,
)

NO_STOP = StopSpec(max_steps=10_000, loss_tol=0, param_rel_change_tol=0, window_steps=10_000)


def test_learning_rate():
    opt = GD(lr=0.1, schedule=GeometricSchedule(factor=0.5, every_steps=10))
    assert learning_rate(opt, 0) == 0.1
    assert learning_rate(opt, 9) == 0.1
    assert learning_rate(opt, 10) == 0.05
    assert learning_rate(opt, 25) == 0.025
    assert learning_rate(GD(lr=0.1), 10 ** 6) == 0.1


def test_gd_update():
    """
    one GD step on L(u) = u²/2 from u = 1
    """
    state = OptState.initial(GD(lr=0.1), 1)
    theta, state = apply_update(state, np.array([1.0]), np.array([1.0]), 0.1)
    assert theta[0] == pytest.approx(0.9)
    assert state.t == 1


def test_adam_first_step():
    state = OptState.initial(Adam(lr=0.001), 1)
    theta, new_state = apply_update(state, np.array([0.0]), np.array([0.5]), 0.001)
    assert theta[0] == pytest.approx(-0.001, rel=1e-6)
    assert new_state.m1[0] == pytest.approx(0.05)
    assert new_state.m2[0] == pytest.approx(0.00025)
    assert state.t == 0
    assert state.m1[0] == 0


def test_step_non_finite(mocker, gaussian_data):
    params = NetParams(a=[1.0], W=[[1.0, 0.0, 0.0]])
    mocker.patch('alignlab.app.optim.grad', return_value=(np.array([math.nan]), np.zeros((1, 3))))
    with pytest.raises(NonFiniteGradient) as exc_info:
        step(params, OptState.initial(GD(), params.m * 4), gaussian_data)
    assert exc_info.value.data == {'step': 0}


def test_batch_sampler_epochs():
    sampler = BatchSampler(10, 4, rng_stream(0, 'batches'))
    batches = [sampler.next() for _ in range(3)]
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    assert len(sampler.next()) == 4


def test_batch_sampler_full_batch():
    assert BatchSampler(10, None, rng_stream(0, 'batches')).next() is None
    assert BatchSampler(10, 32, rng_stream(0, 'batches')).next() is None


def test_batch_sampler_record():
    sampler = BatchSampler(10, 3, rng_stream(1, 'batches'))
    sampler.next()
    copy = BatchSampler.from_record(sampler.record())
    for _ in range(6):
        assert np.array_equal(sampler.next(), copy.next())


def test_gd_decreases_loss(gaussian_data):
    params = init(DominatedInit(m=20, d=3, lam=0.01), seed=0)
    result = train(params, gaussian_data, GD(lr=0.1), StopSpec(max_steps=2000), ProbeSpec(every=100))
    assert result.stop_reason == 'max_steps'
    assert result.steps == 2000
    assert result.final_loss < 0.5 * result.initial_loss
    assert [p.step for p in result.trajectory] == list(range(0, 2001, 100))
    assert result.params_0 is params


def test_train_deterministic(gaussian_data):
    params = init(DominatedInit(m=10, d=3, lam=0.1), seed=0)
    a = train(params, gaussian_data, SGD(lr=0.05, batch_size=8), StopSpec(max_steps=300), seed=3)
    b = train(params, gaussian_data, SGD(lr=0.05, batch_size=8), StopSpec(max_steps=300), seed=3)
    c = train(params, gaussian_data, SGD(lr=0.05, batch_size=8), StopSpec(max_steps=300), seed=4)
    assert np.array_equal(a.params.W, b.params.W)
    assert not np.array_equal(a.params.W, c.params.W)


def test_trajectory_csv(tmp_path, gaussian_data):
    params = init(DominatedInit(m=5, d=3, lam=0.1), seed=0)
    path = tmp_path / 'traj' / 'run.csv'
    result = train(params, gaussian_data, GD(lr=0.1), StopSpec(max_steps=30), ProbeSpec(every=10), trajectory_path=path)
    assert result.trajectory_path == path
    rows = read_csv(path)
    assert list(rows[0]) == ['step', 'lr', 'train_loss', 'sign_flips', 'balancedness_gap']
    assert [int(r['step']) for r in rows] == [0, 10, 20, 30]
    assert float(rows[-1]['train_loss']) == result.final_loss


def test_trajectory_disabled(tmp_path, gaussian_data):
    params = init(DominatedInit(m=5, d=3, lam=0.1), seed=0)
    probe = ProbeSpec(every=10, trajectory=False)
    result = train(params, gaussian_data, GD(), StopSpec(max_steps=10), probe, trajectory_path=tmp_path / 'x.csv')
    assert result.trajectory_path is None
    assert not (tmp_path / 'x.csv').exists()


def test_trajectory_streamed(tmp_path, gaussian_data):
    """
    rows already written survive a run that dies part way
    """
    params = init(DominatedInit(m=5, d=3, lam=0.1), seed=0)
    path = tmp_path / 'run.csv'

    def stop_at_20(step_, _params):
        assert [int(r['step']) for r in read_csv(path)][-1] == step_
        if step_ == 20:
            raise RuntimeError('stopped')

    with pytest.raises(RuntimeError):
        train(
            params,
            gaussian_data,
            GD(lr=0.1),
            StopSpec(max_steps=50),
            ProbeSpec(every=10),
            trajectory_path=path,
            callback=stop_at_20,
        )
    assert [int(r['step']) for r in read_csv(path)] == [0, 10, 20]


def test_sgd_full_batch_is_gd(gaussian_data):
    params = init(DominatedInit(m=10, d=3, lam=0.1), seed=0)
    gd = train(params, gaussian_data, GD(lr=0.05), StopSpec(max_steps=200), seed=3)
    sgd = train(params, gaussian_data, SGD(lr=0.05, batch_size=gaussian_data.n), StopSpec(max_steps=200), seed=4)
    assert np.array_equal(gd.params.a, sgd.params.a)
    assert np.array_equal(gd.params.W, sgd.params.W)
    assert gd.final_loss == sgd.final_loss


def test_balancedness_halves_with_lr(gaussian_data):
    """
    GD drifts from the conserved a² − ‖w‖² by O(lr)
    """
    params = init(DominatedInit(m=20, d=3, lam=0.01), seed=0)
    gaps = []
    for lr in (1e-2, 5e-3, 2.5e-3):
        result = train(params, gaussian_data, GD(lr=lr), NO_STOP, ProbeSpec(every=1000))
        assert result.steps == 10_000
        assert result.final_loss < 0.5 * result.initial_loss
        assert result.trajectory[-1].sign_flips == 0
        gap = result.trajectory[-1].balancedness_gap
        assert gap <= 50 * lr
        gaps.append(gap)
    assert 1.5 <= gaps[0] / gaps[1] <= 2.5
    assert 1.5 <= gaps[1] / gaps[2] <= 2.5


def test_callback(mocker, gaussian_data):
    params = init(DominatedInit(m=5, d=3, lam=0.1), seed=0)
    callback = mocker.Mock()
    train(params, gaussian_data, GD(), StopSpec(max_steps=20), ProbeSpec(every=10), callback=callback)
    assert [c.args[0] for c in callback.call_args_list] == [0, 10, 20]


def test_converged(gaussian_data):
    params = init(DominatedInit(m=5, d=3, lam=0.1), seed=0)
    stop = StopSpec(max_steps=1000, loss_tol=1.0, param_rel_change_tol=1.0, window_steps=10)
    result = train(params, gaussian_data, GD(), stop)
    assert result.stop_reason == 'converged'
    assert result.steps == 10


def test_lr_floor(gaussian_data):
    params = init(DominatedInit(m=5, d=3, lam=0.1), seed=0)
    opt = GD(lr=0.1, schedule=GeometricSchedule(factor=0.5, every_steps=10))
    trainer = Trainer(params, gaussian_data, opt, NO_STOP)
    result = trainer.run(lr_floor=0.03)
    assert result.stop_reason == 'lr_floor'
    assert result.steps == 20
    assert result.trajectory[-1].lr == 0.025


def test_divergence(gaussian_data, settings):
    params = init(DominatedInit(m=5, d=3, lam=0.1), seed=0)
    trainer = Trainer(params, gaussian_data, GD(), settings=settings)
    trainer._check_divergence(trainer.initial_loss * 10)
    with pytest.raises(TrainingDiverged) as exc_info:
        trainer._check_divergence(trainer.initial_loss * 1e7)
    assert exc_info.value.data['step'] == 0
    with pytest.raises(TrainingDiverged):
        trainer._check_divergence(math.inf)


@pytest.mark.parametrize('opt', [GD(lr=0.05), SGD(lr=0.05, batch_size=7), Adam(lr=0.01, batch_size=16)])
def test_checkpoint_resume(tmp_path, gaussian_data, opt):
    params = init(DominatedInit(m=8, d=3, lam=0.1), seed=2)
    straight = Trainer(params, gaussian_data, opt, NO_STOP, ProbeSpec(every=25), seed=5)
    straight.run(200)

    first = Trainer(params, gaussian_data, opt, NO_STOP, ProbeSpec(every=25), seed=5, meta={'n': 40})
    first.run(100)
    path = first.checkpoint(tmp_path / 'ck.json')
    resumed = Trainer.from_checkpoint(path, gaussian_data)
    assert resumed.step == 100
    assert resumed.meta == {'n': 40}
    result = resumed.run(100)
    assert result.steps == 200
    assert np.array_equal(result.params.W, straight.params.W)
    assert np.array_equal(result.params.a, straight.params.a)
    assert np.array_equal(result.params_0.W, params.W)


def test_checkpoint_restart_schedule(tmp_path, gaussian_data):
    params = init(DominatedInit(m=5, d=3, lam=0.1), seed=0)
    opt = GD(lr=0.1, schedule=GeometricSchedule(factor=0.5, every_steps=10))
    trainer = Trainer(params, gaussian_data, opt, NO_STOP)
    trainer.run(30)
    path = trainer.checkpoint(tmp_path / 'ck.json')
    assert Trainer.from_checkpoint(path, gaussian_data).lr == 0.0125
    assert Trainer.from_checkpoint(path, gaussian_data, restart_schedule=True).lr == 0.1


def test_checkpoint_optimizer_kind(tmp_path, gaussian_data):
    params = init(DominatedInit(m=5, d=3, lam=0.1), seed=0)
    trainer = Trainer(params, gaussian_data, GD(), NO_STOP)
    path = trainer.checkpoint(tmp_path / 'ck.json')
    with pytest.raises(CheckpointMismatch):
        Trainer.from_checkpoint(path, gaussian_data, opt=Adam())


def test_checkpoint_wrong_dataset(tmp_path, gaussian_data, teacher):
    params = init(DominatedInit(m=5, d=3, lam=0.1), seed=0)
    path = Trainer(params, gaussian_data, SGD(batch_size=4), NO_STOP).checkpoint(tmp_path / 'ck.json')
    other = gen_dataset(StandardGaussianInput(d=3), teacher, 10, seed=0)
    with pytest.raises(CheckpointMismatch):
        Trainer.from_checkpoint(path, other)


def test_checkpoint_corrupted(tmp_path, gaussian_data):
    params = init(DominatedInit(m=5, d=3, lam=0.1), seed=0)
    path = Trainer(params, gaussian_data, GD(), NO_STOP).checkpoint(tmp_path / 'ck.json')
    text = path.read_text()
    path.write_text(text.replace('"step": 0', '"step": 1'))
    with pytest.raises(CheckpointCorrupted):
        load_checkpoint(path)
    path.write_text(text.replace('"version": 1', '"version": 2'))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)
    path.write_text('{not json')
    with pytest.raises(CheckpointCorrupted):
        load_checkpoint(path)


def test_resume_loss_matches(tmp_path, gaussian_data):
    params = init(DominatedInit(m=5, d=3, lam=0.1), seed=0)
    trainer = Trainer(params, gaussian_data, GD(lr=0.1), NO_STOP)
    trainer.run(50)
    resumed = Trainer.from_checkpoint(trainer.checkpoint(tmp_path / 'ck.json'), gaussian_data)
    assert train_loss(resumed.params, gaussian_data) == train_loss(trainer.params, gaussian_data)
