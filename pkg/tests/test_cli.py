import json

import pandas as pd
import pytest

from fedpmt import __version__
from fedpmt.cli import main, parse_arguments
from fedpmt.extra import sec_to_time

SMALL_RUN = ['--set', 'training.rounds=2', '--set', 'training.batch_size=10',
             '--set', 'devices.num_devices=20']


def test_sec_to_time():
    assert sec_to_time(3661) == '01:01:01'
    assert sec_to_time(59.6) == '00:01:00'


def test_version(capsys):
    with pytest.raises(SystemExit):
        parse_arguments(['--version'])
    out, err = capsys.readouterr()
    assert __version__ in out + err


def test_command_is_required():
    with pytest.raises(SystemExit):
        parse_arguments([])


def test_cost_table(capsys, tmpdir):
    assert main(['cost', '-a', 'fcnn_mnist', '--no-feddrop', '-o', str(tmpdir)]) == 0
    out, _ = capsys.readouterr()
    assert '6473760' in out and '15301360' in out
    table = pd.read_csv(str(tmpdir.join('cost_fcnn_mnist.csv')))
    assert list(table['flops'])[-1] == 15301360
    assert len(table) == 5


def test_run_writes_metrics_and_summary(tmpdir):
    out = str(tmpdir.join('results'))
    assert main(['run', '-o', out, '-s', '3', '-p'] + SMALL_RUN) == 0
    metrics = pd.read_csv(tmpdir.join('results', 'metrics.csv').strpath)
    assert list(metrics['round']) == [1, 2]
    with open(tmpdir.join('results', 'summary.json').strpath) as f:
        summary = json.load(f)
    assert summary['seed'] == 3
    assert summary['config']['devices']['num_devices'] == 20
    assert tmpdir.join('results', 'curves_round.png').check()
    assert tmpdir.join('results', 'curves_cumulative_seconds.png').check()


def test_config_errors_exit_with_two(tmpdir, capsys):
    assert main(['run', '-o', str(tmpdir), '--set', 'training.epochz=1']) == 2
    _, err = capsys.readouterr()
    assert 'training.epochz' in err
    assert not tmpdir.join('metrics.csv').check()


def test_convex_lab(tmpdir):
    out = str(tmpdir)
    assert main(['convex-lab', '--rounds', '300', '--seeds', '2', '-p', '-o', out]) == 0
    gaps = pd.read_csv(tmpdir.join('convex_gaps.csv').strpath)
    assert list(gaps.columns) == ['round', 'gap', 'bound']
    assert len(gaps) == 301
    with open(tmpdir.join('convex_fit.json').strpath) as f:
        fit = json.load(f)
    assert fit['assignment'] == [3, 2, 1]
    assert fit['seeds'] == [0, 1]
    assert tmpdir.join('convex_gap.png').check()


def test_convex_lab_full_width(tmpdir):
    argv = ['convex-lab', '--rounds', '150', '--seeds', '1', '--widths', '1',
            '--assignment', '1,1,1', '-o', str(tmpdir)]
    assert main(argv) == 0
    with open(tmpdir.join('convex_fit.json').strpath) as f:
        assert json.load(f)['assignment'] == [1, 1, 1]
