import os
import sys
import json
import logging
import functools

import click
import pandas as pd

from app import configure_logging, prepare_output_dir
from utils.asr_backend import write_hypotheses
from utils.config import ConfigError, load_experiment_config
from utils.experiments import (PRIOR_SYSTEMS, SYSTEMS, doa_sweep, generate_corpus, load_split, load_trainer,
                               data_dir, prior_table, results_dir, spacing_sweep, train_system,
                               trend_report, write_table)
from utils.gradcheck import GRADCHECK_OPS, SCOPES, VerificationError, failed_ops, run_gradchecks

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_VERIFICATION = 3


def exit_codes(command):
    """Map config problems to exit 2 and verification failures to exit 3."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except ConfigError as e:
            logger.error(f"Config error: {str(e)}")
            sys.exit(EXIT_CONFIG)
        except VerificationError as e:
            logger.error(f"Verification failed: {str(e)}")
            sys.exit(EXIT_VERIFICATION)
    return wrapper


def _systems(config, requested):
    names = list(requested) or list(config.systems)
    for name in names:
        if name not in SYSTEMS:
            raise ConfigError(f"systems: unknown system {name!r} (known: {list(SYSTEMS)})")
    return names


config_argument = click.argument('config_path', type=click.Path(dir_okay=False))
system_option = click.option('--system', 'systems', multiple=True,
                             help='System name (repeatable); defaults to the config\'s systems.')


@click.group()
@click.option('--log-level', default=None, help='Overrides BEAMFLOW_LOG_LEVEL.')
def cli(log_level):
    """BeamFlow: multichannel far-field speech recognition experiments."""
    configure_logging(log_level)


@cli.command()
@config_argument
@click.option('--spacing-sweep', is_flag=True, help='Also render eval sets at every sweep spacing.')
@click.option('--prior-set', is_flag=True, help='Also render the no-added-noise corpus for direction priors.')
@exit_codes
def generate(config_path, spacing_sweep, prior_set):
    """Simulate the train/dev/eval corpus."""
    config = load_experiment_config(config_path)
    prepare_output_dir(config)
    manifests = generate_corpus(config, spacing_sweep=spacing_sweep, prior_set=prior_set)
    click.echo(json.dumps(manifests, indent=2))


@cli.command()
@config_argument
@system_option
@click.option('--prior-set', is_flag=True, help='Train on the no-added-noise corpus.')
@click.option('--resume', is_flag=True, help='Continue from the latest checkpoint.')
@exit_codes
def train(config_path, systems, prior_set, resume):
    """Train one or more systems, writing checkpoints and metrics.csv per run."""
    config = load_experiment_config(config_path)
    prepare_output_dir(config)
    names = list(systems) or (PRIOR_SYSTEMS if prior_set else config.systems)
    for name in _systems(config, names):
        metrics = train_system(config, name, prior_set=prior_set, resume=resume)
        last = metrics.iloc[-1] if len(metrics) else None
        if last is not None:
            click.echo(f"{name}: epoch {int(last['epoch'])} theta={last['theta']:.4f} dev_wer={last['dev_wer']:.3f}")


@cli.command(name='eval')
@config_argument
@system_option
@click.option('--checkpoint', default=None, help='Checkpoint stem (single system only).')
@click.option('--prior', is_flag=True, help='Direction-prior table on the no-added-noise corpus.')
@exit_codes
def evaluate(config_path, systems, checkpoint, prior):
    """Decode the eval split and emit a WER table (CSV + markdown)."""
    config = load_experiment_config(config_path)
    out = results_dir(config)

    if prior:
        table = prior_table(config, _systems(config, systems) if systems else PRIOR_SYSTEMS)
        paths = write_table(table, os.path.join(out, 'prior'))
        click.echo(table.to_markdown(floatfmt='.2f'))
        logger.info(f"[EVAL] wrote {paths['csv']}")
        return

    names = _systems(config, systems)
    if checkpoint and len(names) != 1:
        raise ConfigError("--checkpoint needs exactly one --system")
    items = load_split(config, data_dir(config), 'eval')
    rows = {}
    for name in names:
        trainer = load_trainer(config, name, checkpoint=checkpoint)
        result = trainer.evaluate(items, beam_width=config.evaluation.beam_width)
        write_hypotheses(os.path.join(trainer.run_dir, 'eval_hypotheses.txt'), result['hypotheses'])
        rows[name] = {'eval': 100.0 * result['wer']}
    table = pd.DataFrame.from_dict(rows, orient='index')
    table.index.name = 'system'
    write_table(table, os.path.join(out, 'eval'))
    click.echo(table.to_markdown(floatfmt='.2f'))


@cli.command(name='doa-sweep')
@config_argument
@system_option
@exit_codes
def doa_sweep_command(config_path, systems):
    """WER against injected DOA error rate."""
    config = load_experiment_config(config_path)
    table = doa_sweep(config, _systems(config, systems))
    write_table(table, os.path.join(results_dir(config), 'doa_sweep'))
    for system, trend in trend_report(table).items():
        logger.info(f"[EVAL] {system}: spearman rho={trend['spearman_rho']:.3f} flat={trend['flat']}")
    click.echo(table.to_markdown(floatfmt='.2f'))


@cli.command(name='spacing-sweep')
@config_argument
@system_option
@exit_codes
def spacing_sweep_command(config_path, systems):
    """WER on eval sets rendered at each microphone spacing."""
    config = load_experiment_config(config_path)
    table = spacing_sweep(config, _systems(config, systems))
    write_table(table, os.path.join(results_dir(config), 'spacing_sweep'))
    click.echo(table.to_markdown(floatfmt='.2f'))


@cli.command()
@click.option('--scope', type=click.Choice(SCOPES), default='all', show_default=True)
@click.option('--canary', type=click.Choice(list(GRADCHECK_OPS)), default=None,
              help='Sign-flip this op\'s backward; the report must flag it.')
@click.option('--seed', default=0, show_default=True)
@click.option('--max-coords', default=200, show_default=True, help='Sampled coordinates per large block.')
@exit_codes
def gradcheck(scope, canary, seed, max_coords):
    """Finite-difference check of every registered differentiable op."""
    rows = run_gradchecks(scope=scope, canary=canary, seed=seed, max_coords=max_coords)
    report = pd.DataFrame(rows)
    summary = report.groupby('op', sort=False).agg(max_rel_err=('max_rel_err', 'max'),
                                                   tolerance=('tolerance', 'first'),
                                                   passed=('passed', 'all'))
    click.echo(summary.to_markdown(floatfmt='.2e'))
    failed = failed_ops(rows)
    if failed:
        raise VerificationError(f"gradient check failed for: {', '.join(failed)}")
