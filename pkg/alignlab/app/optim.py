import json
import logging
import math
from pathlib import Path
from time import time
from typing import Callable, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import parse_obj_as

from .data import Dataset
from .network import NetParams, balancedness_gap, grad, params_from_record, params_record, sign_flips, train_loss
from .settings import Settings
from .utils import (
    CheckpointCorrupted,
    CheckpointMismatch,
    CheckpointVersionError,
    CsvStream,
    NonFiniteGradient,
    TrainingDiverged,
    canonical_json,
    pretty_lenient_json,
    restore_rng,
    rng_state,
    rng_stream,
    sha256_hex,
)
from .validation import GD, Adam, ConstantSchedule, OptimizerSpec, ProbeSpec, StopSpec

logger = logging.getLogger('alignlab.optim')

CHECKPOINT_VERSION = 1
TRAJECTORY_HEADER = 'step', 'lr', 'train_loss', 'sign_flips', 'balancedness_gap'


def learning_rate(opt: OptimizerSpec, step: int) -> float:
    if isinstance(opt.schedule, ConstantSchedule):
        return opt.lr
    return opt.lr * opt.schedule.factor ** (step // opt.schedule.every_steps)


class OptState:
    """
    Optimizer state over the flat parameter vector (a, W.ravel()), Adam moments are None for GD and SGD.
    """

    def __init__(self, opt: OptimizerSpec, t: int = 0, m1: np.ndarray = None, m2: np.ndarray = None):
        self.opt = opt
        self.t = t
        self.m1 = m1
        self.m2 = m2

    @classmethod
    def initial(cls, opt: OptimizerSpec, size: int) -> 'OptState':
        if isinstance(opt, Adam):
            return cls(opt, 0, np.zeros(size), np.zeros(size))
        return cls(opt)

    def copy(self) -> 'OptState':
        m1, m2 = (None if m is None else m.copy() for m in (self.m1, self.m2))
        return OptState(self.opt, self.t, m1, m2)

    def record(self) -> dict:
        return dict(opt=self.opt, t=self.t, m1=self.m1, m2=self.m2)

    @classmethod
    def from_record(cls, record: dict, opt: OptimizerSpec = None) -> 'OptState':
        saved = parse_obj_as(OptimizerSpec, record['opt'])
        opt = opt or saved
        if opt.kind != saved.kind:
            raise CheckpointMismatch(f'checkpoint holds {saved.kind} state, cannot resume with {opt.kind}')
        m1, m2 = (None if record[k] is None else np.array(record[k], dtype=float) for k in ('m1', 'm2'))
        return cls(opt, record['t'], m1, m2)


def apply_update(state: OptState, theta: np.ndarray, g: np.ndarray, lr: float) -> Tuple[np.ndarray, OptState]:
    """
    One update of the flat parameters from the flat gradient, Adam follows the pytorch recurrence.
    """
    new = state.copy()
    new.t += 1
    if not isinstance(state.opt, Adam):
        return theta - lr * g, new
    b1, b2 = state.opt.beta1, state.opt.beta2
    new.m1 = b1 * state.m1 + (1 - b1) * g
    new.m2 = b2 * state.m2 + (1 - b2) * g * g
    bias1 = 1 - b1 ** new.t
    bias2 = 1 - b2 ** new.t
    denom = np.sqrt(new.m2) / math.sqrt(bias2) + state.opt.eps
    return theta - (lr / bias1) * new.m1 / denom, new


def step(
    params: NetParams, state: OptState, dataset: Dataset, batch_indices=None, lr: float = None
) -> Tuple[NetParams, OptState]:
    lr = state.opt.lr if lr is None else lr
    grad_a, grad_W = grad(params, dataset, batch_indices)
    g = np.concatenate([grad_a, grad_W.ravel()])
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient(f'non-finite gradient at step {state.t}', step=state.t)
    theta, state = apply_update(state, params.flat(), g, lr)
    m = params.m
    return params.replace(a=theta[:m], W=theta[m:].reshape(params.W.shape)), state


class BatchSampler:
    """
    Epoch-shuffled minibatches without replacement, the last batch of an epoch may be short.

    Returns None (the whole dataset) when the batch covers every point.
    """

    def __init__(self, n: int, batch_size: Optional[int], rng: np.random.Generator):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.order: Optional[np.ndarray] = None
        self.pos = 0

    @property
    def full_batch(self) -> bool:
        return self.batch_size is None or self.batch_size >= self.n

    def next(self) -> Optional[np.ndarray]:
        if self.full_batch:
            return None
        if self.order is None or self.pos >= self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        batch = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return batch

    def record(self) -> dict:
        return dict(n=self.n, batch_size=self.batch_size, rng=rng_state(self.rng), order=self.order, pos=self.pos)

    @classmethod
    def from_record(cls, record: dict) -> 'BatchSampler':
        sampler = cls(record['n'], record['batch_size'], restore_rng(record['rng']))
        if record['order'] is not None:
            sampler.order = np.array(record['order'], dtype=np.int64)
        sampler.pos = record['pos']
        return sampler


class TrajectoryPoint(NamedTuple):
    step: int
    lr: float
    train_loss: float
    sign_flips: int
    balancedness_gap: float


class TrainResult(NamedTuple):
    params: NetParams
    params_0: NetParams
    trajectory: List[TrajectoryPoint]
    stop_reason: str
    steps: int
    final_loss: float
    initial_loss: float
    wall_time: float
    trajectory_path: Optional[Path] = None


ProbeCallback = Callable[[int, NetParams], None]


class Trainer:
    """
    Resumable training run: owns the parameters, optimizer state, batch sampler and the reference parameters at
    step 0 used for sign flips and balancedness.

    `schedule_origin` is the step the learning rate schedule counts from, a warm restart sets it to the restart step.
    `meta` is stored with checkpoints.
    """

    def __init__(
        self,
        params: NetParams,
        dataset: Dataset,
        opt: OptimizerSpec,
        stop: StopSpec = StopSpec(),
        probe: ProbeSpec = ProbeSpec(),
        seed: int = 0,
        *,
        settings: Settings = None,
        fingerprint: str = None,
        meta: dict = None,
    ):
        self.dataset = dataset
        self.opt = opt
        self.stop = stop
        self.probe = probe
        self.seed = seed
        self.settings = settings or Settings()
        self.fingerprint = fingerprint
        self.meta = meta or {}
        self.params_0 = params
        self.params = params
        self.state = OptState.initial(opt, params.m * (params.d + 1))
        self.sampler = BatchSampler(dataset.n, getattr(opt, 'batch_size', None), rng_stream(seed, 'batches'))
        self.step = 0
        self.schedule_origin = 0
        self.initial_loss = train_loss(params, dataset)
        self.window_loss = self.initial_loss
        self.window_theta = params.flat()
        self.trajectory: List[TrajectoryPoint] = []
        self._stream: Optional[CsvStream] = None

    @property
    def lr(self) -> float:
        return learning_rate(self.opt, self.step - self.schedule_origin)

    def probe_point(self, loss: float = None) -> TrajectoryPoint:
        loss = train_loss(self.params, self.dataset) if loss is None else loss
        return TrajectoryPoint(
            step=self.step,
            lr=self.lr,
            train_loss=loss,
            sign_flips=sign_flips(self.params, self.params_0),
            balancedness_gap=balancedness_gap(self.params, self.params_0),
        )

    def _check_divergence(self, loss: float):
        limit = self.settings.divergence_factor * max(self.initial_loss, np.finfo(float).tiny)
        if not math.isfinite(loss) or loss > limit:
            logger.warning(
                'training diverged at step %d, loss %0.3g vs initial %0.3g', self.step, loss, self.initial_loss
            )
            raise TrainingDiverged(
                f'loss {loss:0.3g} exceeded {self.settings.divergence_factor:0.0g}x initial at step {self.step}',
                step=self.step,
                loss=loss,
                initial_loss=self.initial_loss,
            )

    def _converged(self, loss: float) -> bool:
        theta = self.params.flat()
        loss_change = abs(self.window_loss - loss) / max(self.window_loss, np.finfo(float).tiny)
        theta_change = np.linalg.norm(theta - self.window_theta) / max(np.linalg.norm(self.window_theta), 1e-300)
        self.window_loss, self.window_theta = loss, theta
        return loss_change <= self.stop.loss_tol and theta_change <= self.stop.param_rel_change_tol

    def run(
        self,
        max_steps: int = None,
        *,
        lr_floor: float = None,
        trajectory_path: Union[str, Path] = None,
        callback: ProbeCallback = None,
    ) -> TrainResult:
        """
        Train until `max_steps` (default from the stop spec), convergence over a window or, when `lr_floor` is
        given, the scheduled learning rate dropping below it.
        """
        start = time()
        max_steps = self.stop.max_steps if max_steps is None else max_steps
        end = self.step + max_steps
        logger.info(
            'training m=%d n=%d with %s lr=%0.3g from step %d, up to %d steps',
            self.params.m,
            self.dataset.n,
            self.opt.kind,
            self.lr,
            self.step,
            max_steps,
        )
        stream = None
        if trajectory_path and self.probe.trajectory:
            stream = CsvStream(trajectory_path, TRAJECTORY_HEADER)
            for point in self.trajectory:
                stream.write(point)
        self._stream = stream
        try:
            stop_reason, final_loss = self._train(end, lr_floor, callback)
        finally:
            self._stream = None
            if stream:
                stream.close()
        path = stream.path if stream else None
        wall_time = time() - start
        logger.info(
            'training stopped after %d steps (%s), train loss %0.6g, %0.1fs',
            self.step,
            stop_reason,
            final_loss,
            wall_time,
        )
        return TrainResult(
            params=self.params,
            params_0=self.params_0,
            trajectory=list(self.trajectory),
            stop_reason=stop_reason,
            steps=self.step,
            final_loss=final_loss,
            initial_loss=self.initial_loss,
            wall_time=wall_time,
            trajectory_path=path,
        )

    def _train(self, end: int, lr_floor: Optional[float], callback: Optional[ProbeCallback]) -> Tuple[str, float]:
        if not self.trajectory:
            self._record(self.probe_point(self.initial_loss if self.step == 0 else None), callback)
        stop_reason = 'max_steps'
        while self.step < end:
            lr = self.lr
            if lr_floor is not None and lr < lr_floor:
                stop_reason = 'lr_floor'
                break
            self.params, self.state = step(self.params, self.state, self.dataset, self.sampler.next(), lr)
            self.step += 1
            window_end = self.step % self.stop.window_steps == 0
            if self.step % self.probe.every == 0 or window_end:
                loss = train_loss(self.params, self.dataset)
                self._check_divergence(loss)
                if self.step % self.probe.every == 0:
                    self._record(self.probe_point(loss), callback)
                if window_end and self._converged(loss):
                    stop_reason = 'converged'
                    break

        final_loss = train_loss(self.params, self.dataset)
        if self.trajectory[-1].step != self.step:
            self._record(self.probe_point(final_loss), callback)
        return stop_reason, final_loss

    def _record(self, point: TrajectoryPoint, callback: Optional[ProbeCallback]):
        self.trajectory.append(point)
        if self._stream:
            self._stream.write(point)
        if callback:
            callback(point.step, self.params)

    def checkpoint(self, path: Union[str, Path]) -> Path:
        payload = json.loads(
            canonical_json(
                dict(
                    fingerprint=self.fingerprint,
                    meta=self.meta,
                    seed=self.seed,
                    step=self.step,
                    schedule_origin=self.schedule_origin,
                    params=params_record(self.params),
                    params_0=params_record(self.params_0),
                    opt_state=self.state.record(),
                    sampler=self.sampler.record(),
                    stop=self.stop,
                    probe=self.probe,
                    initial_loss=self.initial_loss,
                    window_loss=self.window_loss,
                    window_theta=self.window_theta,
                )
            )
        )
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        record = dict(version=CHECKPOINT_VERSION, sha256=sha256_hex(payload), payload=payload)
        path.write_text(pretty_lenient_json(record))
        logger.info('checkpoint at step %d saved to %s', self.step, path)
        return path

    @classmethod
    def from_checkpoint(
        cls,
        path: Union[str, Path],
        dataset: Dataset,
        *,
        opt: OptimizerSpec = None,
        stop: StopSpec = None,
        restart_schedule: bool = False,
        settings: Settings = None,
    ) -> 'Trainer':
        """
        Rebuild a run from `path`. Passing `opt` (of the same kind) swaps the optimizer settings, with
        `restart_schedule` its schedule counts from the checkpoint step.
        """
        payload = load_checkpoint(path)
        params = params_from_record(payload['params'], d=dataset.d)
        state = OptState.from_record(payload['opt_state'], opt)
        trainer = cls(
            params,
            dataset,
            state.opt,
            stop or StopSpec.parse_obj(payload['stop']),
            ProbeSpec.parse_obj(payload['probe']),
            payload['seed'],
            settings=settings,
            fingerprint=payload['fingerprint'],
            meta=payload['meta'],
        )
        sampler = BatchSampler.from_record(payload['sampler'])
        if sampler.n != dataset.n:
            raise CheckpointMismatch(f'checkpoint was trained on n={sampler.n}, dataset has n={dataset.n}')
        sampler.batch_size = getattr(state.opt, 'batch_size', None)
        trainer.sampler = sampler
        trainer.state = state
        trainer.params_0 = params_from_record(payload['params_0'], d=dataset.d)
        trainer.step = payload['step']
        trainer.schedule_origin = trainer.step if restart_schedule else payload['schedule_origin']
        trainer.initial_loss = payload['initial_loss']
        trainer.window_loss = payload['window_loss']
        trainer.window_theta = np.array(payload['window_theta'], dtype=float)
        logger.info('resumed from %s at step %d', path, trainer.step)
        return trainer


def load_checkpoint(path: Union[str, Path]) -> dict:
    try:
        record = json.loads(Path(path).read_text())
    except ValueError as e:
        raise CheckpointCorrupted(f'{path} is not valid json') from e
    if record.get('version') != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f'unsupported checkpoint version {record.get("version")!r}')
    payload = record.get('payload')
    if payload is None or sha256_hex(payload) != record.get('sha256'):
        raise CheckpointCorrupted(f'{path} failed its checksum')
    return payload


def train(
    params: NetParams,
    dataset: Dataset,
    opt: OptimizerSpec = GD(),
    stop: StopSpec = StopSpec(),
    probe: ProbeSpec = ProbeSpec(),
    seed: int = 0,
    *,
    settings: Settings = None,
    trajectory_path: Union[str, Path] = None,
    callback: ProbeCallback = None,
) -> TrainResult:
    trainer = Trainer(params, dataset, opt, stop, probe, seed, settings=settings)
    return trainer.run(trajectory_path=trajectory_path, callback=callback)
