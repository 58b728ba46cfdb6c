import json
import logging
import sys
from functools import wraps
from pathlib import Path

import click
from pydantic import ValidationError

from alignlab.app.data import export_csv, export_json
from alignlab.app.logs import setup_logging
from alignlab.app.plots import emit_plots
from alignlab.app.processing import (
    analyze,
    make_dataset,
    run_align_probe,
    run_concentration,
    run_extremal,
    run_one,
    run_stability,
    run_sweep,
)
from alignlab.app.settings import Settings
from alignlab.app.utils import AlignLabError, ConfigError, RunFailure
from alignlab.app.validation import ExperimentConfig, ExperimentKind

logger = logging.getLogger('alignlab.run')

EXIT_CONFIG = 2
EXIT_RUN = 3


def load_settings() -> Settings:
    try:
        return Settings()
    except ValidationError as e:
        raise ConfigError(f'invalid settings:\n{e}') from e


def load_config(ctx: click.Context, kind: ExperimentKind) -> ExperimentConfig:
    """
    Experiment config from the --config json file, with the group options and settings filling the gaps.
    """
    opts = ctx.obj
    settings: Settings = opts['settings']
    raw = {}
    if opts['config']:
        try:
            raw = json.loads(Path(opts['config']).read_text())
        except (OSError, ValueError) as e:
            raise ConfigError(f'unable to read config {opts["config"]}: {e}') from e
        if not isinstance(raw, dict):
            raise ConfigError('config must be a json object')
    raw['kind'] = kind
    if opts['out_dir']:
        raw['out_dir'] = opts['out_dir']
    raw.setdefault('out_dir', settings.out_dir)
    if opts['seed'] is not None:
        raw['seeds'] = [opts['seed']]
    raw.setdefault('n_test', settings.n_test)
    raw.setdefault('cell_budget', settings.sampled_cell_budget)
    try:
        config = ExperimentConfig.parse_obj(raw)
    except ValidationError as e:
        raise ConfigError(f'invalid config:\n{e}') from e
    logger.info('%s %s, fingerprint %s', kind.value, config.name, config.fingerprint())
    return config


def command(f):
    """
    Maps library errors onto exit codes: 2 for configuration problems, 3 for failed runs.
    """

    @wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except ConfigError as e:
            logger.error('configuration error: %s', e)
            sys.exit(EXIT_CONFIG)
        except AlignLabError as e:
            logger.error('%s: %s', e.status, e, extra={'data': e.as_dict()})
            sys.exit(EXIT_RUN)

    return wrapper


@click.group()
@click.option('-v', '--verbose', is_flag=True)
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='experiment config json')
@click.option('--seed', type=int, help='run this seed only')
@click.option('--out-dir', type=click.Path(file_okay=False))
@click.option('--workers', type=int, help='worker processes, defaults to ALIGNLAB_WORKERS')
@click.option('--log-file', type=click.Path(dir_okay=False), help='also append timestamped logs to this file')
@click.pass_context
@command
def cli(ctx, verbose, config_path, seed, out_dir, workers, log_file):
    """
    Experiments on two-layer networks trained from small initialization.
    """
    setup_logging(verbose, log_file)
    settings = load_settings()
    ctx.obj = dict(config=config_path, seed=seed, out_dir=out_dir, settings=settings)
    ctx.obj['workers'] = workers or settings.workers


@cli.command()
@click.option('--n', 'n', type=int, help='sample size, defaults to the first of n_values')
@click.option('--format', 'fmt', type=click.Choice(['csv', 'json']), default='csv')
@click.pass_context
@command
def gen(ctx, n, fmt):
    """
    Generate and export a training set.
    """
    config = load_config(ctx, ExperimentKind.single)
    n = n or config.n_values[0]
    seed = config.seeds[0]
    dataset = make_dataset(config, n, seed)
    path = config.out_dir / f'{config.name}_n{n}_s{seed}.{fmt}'
    path = (export_csv if fmt == 'csv' else export_json)(dataset, path)
    click.echo(path)


@cli.command()
@click.pass_context
@command
def train(ctx):
    """
    Train one network on the first n of the config and analyse it.
    """
    result = run_one(load_config(ctx, ExperimentKind.single), ctx.obj['settings'])
    record = result.records[0]
    click.echo(f'{record.status} n={record.n} seed={record.seed} steps={record.steps} train_mse={record.train_mse}')
    click.echo(result.csv_path)
    if record.status != 'ok':
        raise RunFailure(f'run failed: {record.error}')


@cli.command()
@click.pass_context
@command
def sweep(ctx):
    """
    Train over every (n, seed) of the config.
    """
    result = run_sweep(load_config(ctx, ExperimentKind.sweep), ctx.obj['settings'], ctx.obj['workers'])
    failed = sum(r.status != 'ok' for r in result.records)
    click.echo(f'{len(result.records)} runs, {failed} failed')
    click.echo(result.csv_path)
    if failed == len(result.records):
        raise RunFailure('every run of the sweep failed')


@cli.command()
@click.option('--checkpoint', type=click.Path(dir_okay=False), help='defaults to the checkpoint of the config')
@click.pass_context
@command
def stability(ctx, checkpoint):
    """
    Warm restart from a checkpoint with a decaying learning rate and report the change in training loss.
    """
    config = load_config(ctx, ExperimentKind.stability)
    result = run_stability(config, checkpoint and Path(checkpoint), ctx.obj['settings'])
    click.echo(
        f'train loss {result.restart_loss:0.6g} -> {result.final_loss:0.6g}, relative change {result.rel_change:0.3g}'
    )
    click.echo(result.csv_path)


@cli.command()
@click.pass_context
@command
def concentration(ctx):
    """
    Supremum deviation of the empirical field from its population value over the n grid.
    """
    result = run_concentration(load_config(ctx, ExperimentKind.concentration), ctx.obj['settings'], ctx.obj['workers'])
    click.echo(f'log-log slope {result.slope}')
    click.echo(result.csv_path)


@cli.command()
@click.pass_context
@command
def extremal(ctx):
    """
    Enumerate and certify extremal vectors.
    """
    result = run_extremal(load_config(ctx, ExperimentKind.extremal), ctx.obj['settings'], ctx.obj['workers'])
    click.echo(result.csv_path)


@cli.command('align-probe')
@click.pass_context
@command
def align_probe(ctx):
    """
    Neuron alignment at the end of the early phase for each initialization scale.
    """
    result = run_align_probe(load_config(ctx, ExperimentKind.align_probe), ctx.obj['settings'], ctx.obj['workers'])
    click.echo(result.csv_path)


@cli.command('analyze')
@click.option('--checkpoint', type=click.Path(dir_okay=False), help='defaults to the checkpoint of the config')
@click.option('--bins', type=int, default=20)
@click.pass_context
@command
def analyze_cmd(ctx, checkpoint, bins):
    """
    Analysis columns and cosine histogram of a saved network.
    """
    config = load_config(ctx, ExperimentKind.single)
    result = analyze(config, checkpoint and Path(checkpoint), ctx.obj['settings'], bins)
    click.echo(result.summary_path)
    click.echo(result.histogram_path)


@cli.command()
@click.argument('csv_files', nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.pass_context
@command
def plot(ctx, csv_files):
    """
    Render result csv files as svg.
    """
    for path in emit_plots(csv_files, ctx.obj['out_dir']):
        click.echo(path)


if __name__ == '__main__':
    cli()
