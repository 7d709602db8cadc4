import json

import pytest
from click.testing import CliRunner

from cli import main
from checkpoint_store import load_checkpoint
from run_ledger import RunLedger
from conftest import TINY_RUN


def report_of(result):
    """The JSON report is the last line that looks like an object"""
    for line in reversed(result.output.splitlines()):
        if line.startswith('{'):
            return json.loads(line)
    raise AssertionError(f"no report in output:\n{result.output}")


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def tiny_conf(tmp_path):
    path = tmp_path / 'tiny.conf'
    path.write_text(''.join(f"{key} = {value}\n" for key, value in TINY_RUN.items()))
    return path


def test_train_records_report_in_ledger(runner, tiny_conf, tmp_path):
    ledger = tmp_path / 'ledger.db'
    result = runner.invoke(main, ['--ledger', str(ledger), 'train', '--config', str(tiny_conf),
                                  '--set', 'train.steps=2', '--out', str(tmp_path / 'run'),
                                  '--metrics', str(tmp_path / 'm.ndjson')])
    assert result.exit_code == 0, result.output
    report = report_of(result)
    assert report['success'] and report['steps'] == 2 and report['changes'] == []
    assert len((tmp_path / 'm.ndjson').read_text().splitlines()) == 2
    assert RunLedger(str(ledger)).get_stats()['total_reports'] == 1


def test_seed_environment_reaches_the_run(runner, tiny_conf, tmp_path):
    result = runner.invoke(main, ['--no-ledger', 'train', '--config', str(tiny_conf), '--set', 'train.steps=1',
                                  '--out', str(tmp_path / 'run'), '--metrics', str(tmp_path / 'm.ndjson')],
                           env={'FLOWBACK_SEED': '17'})
    assert result.exit_code == 0, result.output
    assert load_checkpoint(tmp_path / 'run' / 'checkpoint').config['seed'] == '17'


def test_unknown_config_key_fails_cleanly(runner, tiny_conf, tmp_path):
    result = runner.invoke(main, ['--no-ledger', 'train', '--config', str(tiny_conf), '--set', 'model.depth=3',
                                  '--out', str(tmp_path / 'run')])
    assert result.exit_code == 1
    assert "unknown config key 'model.depth'" in result.output


def test_sample_and_classify(runner, tiny_checkpoint, tmp_path):
    result = runner.invoke(main, ['--no-ledger', 'sample', '--checkpoint', tiny_checkpoint, '--n', '5',
                                  '--seed', '2', '--out', str(tmp_path / 'samples')])
    assert result.exit_code == 0, result.output
    assert report_of(result)['n'] == 10
    assert (tmp_path / 'samples' / 'manifest.txt').exists()

    result = runner.invoke(main, ['--no-ledger', 'classify', '--checkpoint', tiny_checkpoint, '--n', '20',
                                  '--multistep-lr', '1.0'])
    assert result.exit_code == 0, result.output
    report = report_of(result)
    assert report['n'] == 20 and 'multistep_agreement_lr1' in report


def test_roundtrip_check_command(runner, tiny_checkpoint, tmp_path):
    result = runner.invoke(main, ['--ledger', str(tmp_path / 'l.db'), 'roundtrip-check',
                                  '--checkpoint', tiny_checkpoint, '--probe', '4'])
    assert result.exit_code == 0, result.output
    assert report_of(result)['success']


def test_out_of_range_label_is_an_error(runner, tiny_checkpoint):
    result = runner.invoke(main, ['--no-ledger', 'sample', '--checkpoint', tiny_checkpoint, '--label', '7'])
    assert result.exit_code == 1
    assert 'outside' in result.output


def test_missing_checkpoint_is_a_usage_error(runner, tmp_path):
    result = runner.invoke(main, ['--no-ledger', 'classify', '--checkpoint', str(tmp_path / 'nope')])
    assert result.exit_code == 2


def test_sample_defaults_follow_the_run_config(runner, tiny_conf, tmp_path):
    result = runner.invoke(main, ['--no-ledger', 'train', '--config', str(tiny_conf), '--set', 'train.steps=1',
                                  '--set', 'sample.n=4', '--set', 'sample.cfg_scale=1.5',
                                  '--out', str(tmp_path / 'run'), '--metrics', str(tmp_path / 'm.ndjson')])
    assert result.exit_code == 0, result.output
    checkpoint = str(tmp_path / 'run' / 'checkpoint')
    report = report_of(runner.invoke(main, ['--no-ledger', 'sample', '--checkpoint', checkpoint, '--seed', '0']))
    assert report['n'] == 8 and report['cfg_scale'] == 1.5
    report = report_of(runner.invoke(main, ['--no-ledger', 'sample', '--checkpoint', checkpoint, '--seed', '0',
                                            '--n', '1', '--cfg-scale', '1.0']))
    assert report['n'] == 2 and report['cfg_scale'] == 1.0
