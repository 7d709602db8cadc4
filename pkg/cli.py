"""CLI entry point: train, sample, classify, bench, roundtrip-check."""

import functools
import json
import logging
import os
import sys
from pathlib import Path

import click

from run_config import SEED_ENV, load_config

logger = logging.getLogger(__name__)

DEFAULT_LEDGER = 'data/ledger.db'


def _emit(report: dict, err: bool = False):
    click.echo(json.dumps(report, default=str), err=err)


def _finish(ctx: click.Context, kind: str, checkpoint, report: dict, err: bool = False):
    """Echo the report, record it in the ledger, exit non-zero unless it succeeded"""
    ledger_path = ctx.obj.get('ledger')
    if ledger_path:
        from run_ledger import RunLedger
        report['changes'] = RunLedger(ledger_path).record(kind, str(checkpoint), report)
    _emit(report, err=err)
    if not report.get('success'):
        ctx.exit(1)


def _seed_or_env(seed):
    if seed is not None:
        return seed
    return int(os.environ.get(SEED_ENV, 0))


def _guard(fn):
    """Map library errors to a clean non-zero exit"""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        from trainer import TrainingAborted
        try:
            return fn(*args, **kwargs)
        except TrainingAborted as e:
            kept = f" (last good checkpoint: {e.last_checkpoint})" if e.last_checkpoint else ""
            raise click.ClickException(f"training aborted at step {e.step}: {e}{kept}")
        except (ValueError, FileNotFoundError) as e:
            raise click.ClickException(str(e))
    return wrapper


@click.group()
@click.option('--log-level', default='INFO', show_default=True,
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))
@click.option('--ledger', default=DEFAULT_LEDGER, show_default=True, help='SQLite run ledger')
@click.option('--no-ledger', is_flag=True, help='Do not record reports')
@click.pass_context
def main(ctx, log_level, ledger, no_ledger):
    """Autoregressive flow engine with representation-alignment training."""
    logging.basicConfig(level=getattr(logging, log_level.upper()), stream=sys.stderr,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    ctx.ensure_object(dict)
    ctx.obj['ledger'] = None if no_ledger else ledger


config_option = click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
                             help='key = value config file')
set_option = click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE', help='Override a config key')


@main.command()
@config_option
@set_option
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None, help='Run directory')
@click.option('--metrics', 'metrics_path', default=None, help="Metrics file ('-' or unset: stdout)")
@click.option('--resume', type=click.Path(exists=True, file_okay=False), default=None,
              help='Continue from a checkpoint directory')
@click.pass_context
@_guard
def train(ctx, config_path, overrides, out_dir, metrics_path, resume):
    """Train a model; one metrics record per step."""
    from trainer import train as run_training
    cfg = load_config(config_path, overrides)
    out_dir = Path(out_dir or f"runs/{cfg.dataset}")
    report = run_training(cfg, out_dir, metrics_path, resume)
    _finish(ctx, 'train', report['checkpoint'], report, err=metrics_path in (None, '-'))


@main.command()
@click.option('--checkpoint', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--n', type=int, default=None, help='Samples per class (or for --label); default sample.n of the run')
@click.option('--label', type=int, default=None, help='Only this class')
@click.option('--cfg-scale', type=float, default=None, help='Guidance scale; default sample.cfg_scale of the run')
@click.option('--seed', type=int, default=None)
@click.option('--out', 'out_path', type=click.Path(), default=None, help='Sample archive directory')
@click.option('--denoise/--no-denoise', default=None, help='One score-denoising step; default sample.denoise of the run')
@click.option('--unconditional', is_flag=True, help='Sample the null class')
@click.pass_context
@_guard
def sample(ctx, checkpoint, n, label, cfg_scale, seed, out_path, denoise, unconditional):
    """Draw seeded samples and report per-class moments."""
    from evaluation import sample_cmd
    report = sample_cmd(checkpoint, n, label, cfg_scale, _seed_or_env(seed), out_path, denoise, unconditional)
    _finish(ctx, 'sample', checkpoint, report)


@main.command()
@click.option('--checkpoint', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--n', default=2000, show_default=True)
@click.option('--seed', type=int, default=None)
@click.option('--raw-weights', is_flag=True, help='Use raw instead of EMA weights')
@click.option('--multistep-lr', 'multistep_lrs', type=float, multiple=True, help='Also run the multi-step variant')
@click.option('--multistep-steps', default=5, show_default=True)
@click.pass_context
@_guard
def classify(ctx, checkpoint, n, seed, raw_weights, multistep_lrs, multistep_steps):
    """Single-step vs brute-force classification accuracy and agreement."""
    from evaluation import classify_cmd
    report = classify_cmd(checkpoint, n, _seed_or_env(seed), not raw_weights, multistep_lrs, multistep_steps)
    _finish(ctx, 'classify', checkpoint, report)


@main.command()
@config_option
@set_option
@click.option('--repeats', default=3, show_default=True)
@click.pass_context
@_guard
def bench(ctx, config_path, overrides, repeats):
    """Throughput of Forward / Detach / Reverse / naive Reverse."""
    from bench import bench_reverse
    cfg = load_config(config_path, overrides)
    report = bench_reverse(cfg, repeats)
    _finish(ctx, 'bench', config_path or 'defaults', report)


@main.command('roundtrip-check')
@click.option('--checkpoint', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--probe', default=16, show_default=True)
@click.pass_context
@_guard
def roundtrip_check_cmd(ctx, checkpoint, probe):
    """Run the invariant suite against a checkpoint."""
    from invariant_suite import roundtrip_check
    report = roundtrip_check(checkpoint, probe)
    _finish(ctx, 'roundtrip-check', checkpoint, report)


if __name__ == '__main__':
    main()
