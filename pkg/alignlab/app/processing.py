import logging
import math
from pathlib import Path
from time import time
from typing import Any, Dict, List, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, Field

from .analysis import (
    LimitPredictor,
    cosine_histogram,
    effective_width,
    held_out_set,
    interpolation_check,
    l2_rel_gap,
    ols,
    ols_split,
    test_metrics,
)
from .data import Dataset, gen_dataset, mirror_dataset, population_D, sigma_beta
from .geometry import (
    Verdict,
    alignment_probe,
    alignment_tau,
    arrangement,
    extremal_set,
    find_extremal,
    sup_deviation,
    write_extremal_jsonl,
)
from .network import NetParams, init, params_from_record, train_loss, train_mse
from .optim import Trainer, load_checkpoint
from .settings import Settings
from .utils import (
    AlignLabError,
    CheckpointError,
    CheckpointMismatch,
    ConfigError,
    NoClosedForm,
    OlsError,
    derive_seed,
    pretty_lenient_json,
    write_csv,
)
from .validation import (
    DominatedInit,
    ExperimentConfig,
    ExperimentKind,
    GenericDominatedInit,
    GeometricSchedule,
    LinearTeacher,
    OrthogonalBasisInput,
)
from .worker import run_jobs

logger = logging.getLogger('alignlab.processing')

SCHEMA_VERSION = 1
SWEEP_COLUMNS = (
    'n',
    'seed',
    'status',
    'error',
    'steps',
    'stop_reason',
    'train_loss',
    'train_mse',
    'test_loss_half',
    'test_mse',
    'excess_risk',
    'sigma2',
    'ols_train_loss',
    'ols_train_mse',
    'ols_test_mse',
    'split_ols_gap',
    'frac_cos_above_0.9',
    'effective_width',
    'interpolated',
    'l2_rel_to_limit',
    'sign_flips',
    'balancedness_gap',
    'fingerprint',
)
CONCENTRATION_COLUMNS = 'n', 'd', 'seed', 'sup_dev', 'sup_dev_normalized', 'cells', 'exact'
EXTREMAL_COLUMNS = (
    'n',
    'seed',
    'cells',
    'exact',
    'extremal_count',
    'zero_count',
    'max_rel_dev',
    'find_plus_verdict',
    'find_plus_rel_dev',
    'find_minus_verdict',
    'find_minus_rel_dev',
)
ALIGN_COLUMNS = (
    'lambda',
    'n',
    'seed',
    'tau',
    'probe_step',
    'min_target_cos',
    'mean_target_cos',
    'frac_target_cos_above_0.9',
    'bounds_hold',
    'sign_flips',
)
HISTOGRAM_COLUMNS = 'bin_lo', 'bin_hi', 'count'


class RunRecord(BaseModel):
    fingerprint: str
    kind: ExperimentKind = ExperimentKind.sweep
    n: int
    seed: int
    status: str = 'ok'
    error: Optional[str] = None
    steps: Optional[int] = None
    stop_reason: Optional[str] = None
    train_loss: Optional[float] = None
    train_mse: Optional[float] = None
    test_loss_half: Optional[float] = None
    test_mse: Optional[float] = None
    excess_risk: Optional[float] = None
    sigma2: Optional[float] = None
    ols_train_loss: Optional[float] = None
    ols_train_mse: Optional[float] = None
    ols_test_mse: Optional[float] = None
    split_ols_gap: Optional[float] = None
    frac_cos_above_0_9: Optional[float] = Field(None, alias='frac_cos_above_0.9')
    effective_width: Optional[int] = None
    interpolated: Optional[bool] = None
    l2_rel_to_limit: Optional[float] = None
    sign_flips: Optional[int] = None
    balancedness_gap: Optional[float] = None
    wall_time: float = 0.0
    trajectory_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None

    class Config:
        allow_population_by_field_name = True

    def row(self) -> List[Any]:
        data = self.dict(by_alias=True)
        return [SCHEMA_VERSION] + [data[c] for c in SWEEP_COLUMNS]


class SweepResult(NamedTuple):
    records: List[RunRecord]
    csv_path: Path


def _finite_or_none(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def make_dataset(config: ExperimentConfig, n: int, seed: int) -> Dataset:
    """
    The training set of run (n, seed), mirrored when the config asks for it.
    """
    dataset = gen_dataset(config.data, config.teacher, n, derive_seed(seed, f'dataset-{n}'))
    return mirror_dataset(dataset) if config.mirror else dataset


def split_reference(config: ExperimentConfig, beta_hat: np.ndarray) -> np.ndarray:
    """
    β* for a linear teacher, the global OLS estimator otherwise
    """
    if isinstance(config.teacher, LinearTeacher) and any(config.teacher.beta_star):
        return np.asarray(config.teacher.beta_star, dtype=float)
    return beta_hat


def analysis_columns(
    config: ExperimentConfig, dataset: Dataset, params: NetParams, seed: int, settings: Settings
) -> Dict[str, Any]:
    cols = dict(train_loss=train_loss(params, dataset), train_mse=train_mse(params, dataset), sigma2=dataset.sigma2)
    beta_hat = ols(dataset.X, dataset.y)
    cols.update(ols_train_loss=beta_hat.residual_mse / 2, ols_train_mse=beta_hat.residual_mse)

    test = None
    if not isinstance(config.data, OrthogonalBasisInput):
        test = held_out_set(config.data, config.teacher, config.n_test, seed)
        net = test_metrics(params, config.data, config.teacher, config.n_test, seed, dataset=test)
        cols.update(test_loss_half=net.test_loss_half, test_mse=net.test_mse, excess_risk=net.excess_risk)
        ols_net = test_metrics(beta_hat, config.data, config.teacher, config.n_test, seed, dataset=test)
        cols['ols_test_mse'] = ols_net.test_mse

    try:
        plus, minus = ols_split(dataset, split_reference(config, beta_hat.beta))
    except OlsError as e:
        logger.info('no split OLS for n=%d: %s', dataset.n, e)
    else:
        scale = np.linalg.norm(beta_hat.beta) or 1.0
        cols['split_ols_gap'] = float(np.linalg.norm(plus.beta - minus.beta) / scale)
        if test is not None:
            cols['l2_rel_to_limit'] = l2_rel_gap(params, LimitPredictor.from_split(plus, minus), test.X)

    if np.any(beta_hat.beta):
        cols['frac_cos_above_0.9'] = cosine_histogram(params, beta_hat.beta).fraction_above(0.9)
    cols['effective_width'] = effective_width(params, settings.cluster_cos, settings.dormant_ratio)
    cols['interpolated'] = interpolation_check(
        params, dataset, settings.interpolation_tol, settings.interpolation_abs_tol
    )
    return {k: _finite_or_none(v) for k, v in cols.items()}


def run_single(config: ExperimentConfig, n: int, seed: int, settings: Settings = None) -> RunRecord:
    """
    Train one network on a fresh dataset of size n and analyse the end point.
    """
    settings = settings or Settings()
    start = time()
    dataset = make_dataset(config, n, seed)
    fingerprint = config.fingerprint()
    trainer = Trainer(
        init(config.init, seed),
        dataset,
        config.optimizer,
        config.stop,
        config.probe,
        seed,
        settings=settings,
        fingerprint=fingerprint,
        meta=dict(n=n, seed=seed),
    )
    stem = f'{config.name}_n{n}_s{seed}'
    result = trainer.run(trajectory_path=config.out_dir / 'trajectories' / f'{stem}.csv')
    checkpoint_path = None
    if config.save_checkpoints:
        checkpoint_path = trainer.checkpoint(config.out_dir / 'checkpoints' / f'{stem}.json')
    cols = analysis_columns(config, dataset, result.params, seed, settings)
    last = result.trajectory[-1]
    wall_time = time() - start
    # wall time stays out of the csv rows
    logger.info('run n=%d seed=%d finished in %0.1fs', n, seed, wall_time)
    return RunRecord(
        fingerprint=fingerprint,
        kind=config.kind,
        n=n,
        seed=seed,
        steps=result.steps,
        stop_reason=result.stop_reason,
        sign_flips=last.sign_flips,
        balancedness_gap=last.balancedness_gap,
        wall_time=wall_time,
        trajectory_path=result.trajectory_path,
        checkpoint_path=checkpoint_path,
        **cols,
    )


def failed_record(config: ExperimentConfig, n: int, seed: int, exc: Exception) -> RunRecord:
    return RunRecord(
        fingerprint=config.fingerprint(),
        kind=config.kind,
        n=n,
        seed=seed,
        status='failed',
        error=exc.status if isinstance(exc, AlignLabError) else type(exc).__name__,
    )


def _failure_handler(config: ExperimentConfig):
    def on_error(key, exc):
        n, seed = key
        logger.error(
            'run n=%d seed=%d failed: %s',
            n,
            seed,
            exc,
            exc_info=exc,
            extra={'data': {'fingerprint': config.fingerprint(), 'n': n, 'seed': seed}},
        )
        return failed_record(config, n, seed, exc)

    return on_error


def _write_echo(config: ExperimentConfig, records: List[BaseModel] = None):
    config.out_dir.mkdir(parents=True, exist_ok=True)
    (config.out_dir / f'{config.name}_config.json').write_text(pretty_lenient_json(config))
    if records is not None:
        (config.out_dir / f'{config.name}_records.json').write_text(pretty_lenient_json(records))


def write_records_csv(records: List[RunRecord], path: Path) -> Path:
    return write_csv(path, ('schema_version',) + SWEEP_COLUMNS, (r.row() for r in records))


def run_sweep(config: ExperimentConfig, settings: Settings = None, workers: int = None) -> SweepResult:
    """
    One training run per (n, seed), rows in (n, seed) order. Failed runs are logged and kept as status=failed rows.
    """
    settings = settings or Settings()
    jobs = [
        ((n, seed), dict(config=config, n=n, seed=seed, settings=settings))
        for n in config.n_values
        for seed in config.seeds
    ]
    logger.info('sweep %s (%s): %d runs', config.name, config.fingerprint(), len(jobs))
    results = run_jobs(run_single, jobs, workers or settings.workers, on_error=_failure_handler(config))
    records = [r for _, r in results]
    _write_echo(config, records)
    path = write_records_csv(records, config.out_dir / f'{config.name}_sweep.csv')
    failed = sum(r.status != 'ok' for r in records)
    if failed:
        logger.warning('%d of %d runs failed in sweep %s', failed, len(records), config.name)
    return SweepResult(records, path)


def run_one(config: ExperimentConfig, settings: Settings = None, seed: int = None) -> SweepResult:
    """
    The first n of the config with one seed, written like a single row sweep.
    """
    seed = config.seeds[0] if seed is None else seed
    n = config.n_values[0]
    try:
        record = run_single(config, n, seed, settings)
    except AlignLabError as e:
        record = _failure_handler(config)((n, seed), e)
    _write_echo(config, [record])
    return SweepResult([record], write_records_csv([record], config.out_dir / f'{config.name}_n{n}_s{seed}.csv'))


class StabilityResult(NamedTuple):
    restart_loss: float
    final_loss: float
    rel_change: float
    steps: int
    final_lr: float
    stop_reason: str
    csv_path: Path


def _checkpoint_meta(path: Path) -> dict:
    meta = load_checkpoint(path).get('meta') or {}
    if 'n' not in meta or 'seed' not in meta:
        raise CheckpointMismatch(f'{path} carries no run metadata')
    return meta


def _decay_steps(config: ExperimentConfig) -> int:
    schedule = config.optimizer.schedule
    if isinstance(schedule, GeometricSchedule) and schedule.factor < 1:
        decays = math.floor(math.log(config.lr_floor_ratio) / math.log(schedule.factor)) + 1
        return schedule.every_steps * decays + 1
    return config.stop.max_steps


def run_stability(config: ExperimentConfig, checkpoint: Path = None, settings: Settings = None) -> StabilityResult:
    """
    Warm restart from a checkpoint on the same training set with the configured learning rate schedule, counted from
    the restart, until the learning rate falls below lr_floor_ratio·lr.
    """
    path = checkpoint or config.checkpoint
    if path is None or not Path(path).exists():
        raise CheckpointError(f'checkpoint {path} not found')
    meta = _checkpoint_meta(path)
    dataset = make_dataset(config, meta['n'], meta['seed'])
    stop = config.stop.copy(update=dict(loss_tol=0.0, param_rel_change_tol=0.0))
    trainer = Trainer.from_checkpoint(
        path, dataset, opt=config.optimizer, stop=stop, restart_schedule=True, settings=settings
    )
    restart_loss = train_loss(trainer.params, dataset)
    result = trainer.run(
        max_steps=_decay_steps(config),
        lr_floor=config.lr_floor_ratio * config.optimizer.lr,
        trajectory_path=config.out_dir / f'{config.name}_stability.csv',
    )
    rel_change = abs(result.final_loss - restart_loss) / max(restart_loss, np.finfo(float).tiny)
    logger.info('warm restart: train loss %0.6g -> %0.6g (%0.2g relative)', restart_loss, result.final_loss, rel_change)
    summary = StabilityResult(
        restart_loss=restart_loss,
        final_loss=result.final_loss,
        rel_change=rel_change,
        steps=result.steps,
        final_lr=result.trajectory[-1].lr,
        stop_reason=result.stop_reason,
        csv_path=result.trajectory_path,
    )
    _write_echo(config)
    (config.out_dir / f'{config.name}_stability.json').write_text(pretty_lenient_json(summary._asdict()))
    return summary


def cell_options(config: ExperimentConfig, settings: Settings, seed: int) -> Dict[str, Any]:
    return dict(
        budget=config.cell_budget,
        zeta=settings.pattern_zeta,
        delta=settings.cell_perturbation,
        max_d=settings.exact_max_d,
        max_n=settings.exact_max_n,
        seed=seed,
    )


def concentration_job(config: ExperimentConfig, n: int, seed: int, settings: Settings) -> Dict[str, Any]:
    dataset = make_dataset(config, n, seed)
    dev = sup_deviation(dataset, config.data, config.teacher, config.cell_mode, **cell_options(config, settings, seed))
    return dict(
        n=dataset.n,
        d=dataset.d,
        seed=seed,
        sup_dev=dev.value,
        sup_dev_normalized=dev.normalized,
        cells=dev.cells,
        exact=dev.exact,
    )


class ConcentrationResult(NamedTuple):
    rows: List[Dict[str, Any]]
    slope: Optional[float]
    csv_path: Path


def log_log_slope(rows: List[Dict[str, Any]], key: str = 'sup_dev') -> Optional[float]:
    """
    slope of log(median value) against log(n)
    """
    by_n = {}
    for row in rows:
        by_n.setdefault(row['n'], []).append(row[key])
    ns = sorted(by_n)
    medians = [float(np.median(by_n[n])) for n in ns]
    if len(ns) < 2 or min(medians) <= 0:
        return None
    return float(np.polyfit(np.log(ns), np.log(medians), 1)[0])


def run_concentration(config: ExperimentConfig, settings: Settings = None, workers: int = None) -> ConcentrationResult:
    """
    sup_w ‖D_n(w, 0) − D(w)‖ over the n grid and seeds, with the fitted log-log slope against n.
    """
    settings = settings or Settings()
    # fail before any work when there is no closed form D(w)
    population_D(config.data, config.teacher, np.ones(config.d))
    jobs = [
        ((n, seed), dict(config=config, n=n, seed=seed, settings=settings))
        for n in config.n_values
        for seed in config.seeds
    ]
    rows = [r for _, r in run_jobs(concentration_job, jobs, workers or settings.workers)]
    slope = log_log_slope(rows)
    path = write_csv(
        config.out_dir / f'{config.name}_concentration.csv',
        ('schema_version',) + CONCENTRATION_COLUMNS,
        ([SCHEMA_VERSION] + [r[c] for c in CONCENTRATION_COLUMNS] for r in rows),
    )
    _write_echo(config)
    (config.out_dir / f'{config.name}_concentration_fit.json').write_text(
        pretty_lenient_json(dict(slope=slope, fingerprint=config.fingerprint()))
    )
    logger.info('concentration %s: log-log slope %s', config.name, slope)
    return ConcentrationResult(rows, slope, path)


def _rel_dev(D: np.ndarray, target: np.ndarray) -> float:
    """
    distance from D to the nearer of ±target, relative to ‖2·target‖
    """
    return float(min(np.linalg.norm(D - target), np.linalg.norm(D + target)) / (2 * np.linalg.norm(target)))


def extremal_job(config: ExperimentConfig, n: int, seed: int, settings: Settings) -> Dict[str, Any]:
    dataset = make_dataset(config, n, seed)
    options = cell_options(config, settings, seed)
    cells = arrangement(dataset, config.cell_mode, **options)
    candidates = extremal_set(
        dataset,
        config.cell_mode,
        settings.certify_tol,
        zeta=settings.pattern_zeta,
        max_boundary=settings.max_boundary_vertices,
        cells=cells,
    )
    jsonl = write_extremal_jsonl(candidates, config.out_dir / 'extremal' / f'{config.name}_n{n}_s{seed}.jsonl')
    row = dict(n=dataset.n, seed=seed, cells=len(cells), exact=cells.exact, extremal_count=len(candidates))
    nonzero = [c.D for c in candidates if np.any(c.D)]
    row['zero_count'] = len(candidates) - len(nonzero)
    try:
        target = population_D(config.data, config.teacher, np.ones(dataset.d))
    except NoClosedForm:
        return row
    if not np.any(target):
        return row
    row['max_rel_dev'] = max((_rel_dev(D, target) for D in nonzero), default=None)
    beta = np.asarray(config.teacher.beta_star, dtype=float)
    for name, w0 in (('plus', beta), ('minus', -beta)):
        found = find_extremal(
            dataset,
            w0,
            tol=settings.certify_tol,
            zeta=settings.pattern_zeta,
            max_boundary=settings.max_boundary_vertices,
        )
        row[f'find_{name}_verdict'] = found.verdict
        if found.verdict == Verdict.extremal:
            row[f'find_{name}_rel_dev'] = _rel_dev(found.D, target)
    return row


class TableResult(NamedTuple):
    rows: List[Dict[str, Any]]
    csv_path: Path


def run_extremal(config: ExperimentConfig, settings: Settings = None, workers: int = None) -> TableResult:
    """
    Certified extremal vectors of every (n, seed) dataset, written as json lines, with their distance to ±Σβ*/2.
    """
    settings = settings or Settings()
    jobs = [
        ((n, seed), dict(config=config, n=n, seed=seed, settings=settings))
        for n in config.n_values
        for seed in config.seeds
    ]
    rows = [r for _, r in run_jobs(extremal_job, jobs, workers or settings.workers)]
    path = write_csv(
        config.out_dir / f'{config.name}_extremal.csv',
        ('schema_version',) + EXTREMAL_COLUMNS,
        ([SCHEMA_VERSION] + [r.get(c) for c in EXTREMAL_COLUMNS] for r in rows),
    )
    _write_echo(config)
    return TableResult(rows, path)


def align_probe_job(config: ExperimentConfig, lam: float, n: int, seed: int, settings: Settings) -> Dict[str, Any]:
    """
    Train from a dominated initialization of scale λ up to the step nearest the early alignment time τ.
    """
    init_spec = config.init.copy(update={'lam': lam})
    dataset = make_dataset(config, n, seed)
    target = sigma_beta(config.data, config.teacher)
    tau = alignment_tau(config.epsilon, lam, target)
    probe_step = max(1, round(tau / config.optimizer.lr))
    stop = config.stop.copy(update=dict(loss_tol=0.0, param_rel_change_tol=0.0))
    trainer = Trainer(init(init_spec, seed), dataset, config.optimizer, stop, config.probe, seed, settings=settings)
    result = trainer.run(max_steps=probe_step)
    report = alignment_probe(
        result.params, config.data, config.teacher, epsilon=config.epsilon, lam=lam, params_0=result.params_0
    )
    cos = np.array([nr.cos_to_plus if nr.a_sign > 0 else nr.cos_to_minus for nr in report.neurons if not nr.zero_norm])
    return {
        'lambda': lam,
        'n': dataset.n,
        'seed': seed,
        'tau': report.tau,
        'probe_step': probe_step,
        'min_target_cos': report.min_target_cos,
        'mean_target_cos': float(np.mean(cos)) if len(cos) else None,
        'frac_target_cos_above_0.9': float(np.mean(cos > 0.9)) if len(cos) else None,
        'bounds_hold': report.bounds_hold,
        'sign_flips': result.trajectory[-1].sign_flips,
    }


def run_align_probe(config: ExperimentConfig, settings: Settings = None, workers: int = None) -> TableResult:
    """
    Neuron alignment with ±Σβ* at the end of the early phase, for every initialization scale in `lambdas`.
    """
    if not isinstance(config.init, (DominatedInit, GenericDominatedInit)):
        raise ConfigError(f'the alignment probe needs a dominated initialization, got {config.init.kind}')
    if not isinstance(config.teacher, LinearTeacher):
        raise ConfigError('the alignment probe needs a linear teacher')
    settings = settings or Settings()
    jobs = [
        ((lam, n, seed), dict(config=config, lam=lam, n=n, seed=seed, settings=settings))
        for lam in config.lambdas
        for n in config.n_values
        for seed in config.seeds
    ]
    rows = [r for _, r in run_jobs(align_probe_job, jobs, workers or settings.workers)]
    path = write_csv(
        config.out_dir / f'{config.name}_align_probe.csv',
        ('schema_version',) + ALIGN_COLUMNS,
        ([SCHEMA_VERSION] + [r[c] for c in ALIGN_COLUMNS] for r in rows),
    )
    _write_echo(config)
    return TableResult(rows, path)


class AnalyzeResult(NamedTuple):
    columns: Dict[str, Any]
    histogram_path: Path
    summary_path: Path


def analyze(
    config: ExperimentConfig, checkpoint: Path = None, settings: Settings = None, bins: int = 20
) -> AnalyzeResult:
    """
    Recompute the analysis columns for the parameters of a checkpoint and write their cosine histogram against the
    global OLS estimator.
    """
    settings = settings or Settings()
    path = checkpoint or config.checkpoint
    if path is None or not Path(path).exists():
        raise CheckpointError(f'checkpoint {path} not found')
    payload = load_checkpoint(path)
    meta = _checkpoint_meta(path)
    dataset = make_dataset(config, meta['n'], meta['seed'])
    params = params_from_record(payload['params'], d=dataset.d)
    columns = analysis_columns(config, dataset, params, meta['seed'], settings)
    beta_hat = ols(dataset.X, dataset.y).beta
    if not np.any(beta_hat):
        raise OlsError('the OLS estimator is zero, no reference direction for the histogram')
    hist = cosine_histogram(params, beta_hat, bins)
    stem = Path(path).stem
    histogram_path = write_csv(
        config.out_dir / f'{stem}_cosines.csv',
        HISTOGRAM_COLUMNS,
        zip(hist.edges[:-1], hist.edges[1:], hist.counts),
    )
    summary = dict(columns, zero_norm=hist.zero_norm, checkpoint=path, fingerprint=payload.get('fingerprint'))
    summary_path = config.out_dir / f'{stem}_analysis.json'
    summary_path.write_text(pretty_lenient_json(summary))
    return AnalyzeResult(columns, histogram_path, summary_path)


def run_experiment(config: ExperimentConfig, settings: Settings = None, workers: int = None):
    if config.kind == ExperimentKind.sweep:
        return run_sweep(config, settings, workers)
    if config.kind == ExperimentKind.single:
        return run_one(config, settings)
    if config.kind == ExperimentKind.stability:
        return run_stability(config, settings=settings)
    if config.kind == ExperimentKind.concentration:
        return run_concentration(config, settings, workers)
    if config.kind == ExperimentKind.extremal:
        return run_extremal(config, settings, workers)
    return run_align_probe(config, settings, workers)
