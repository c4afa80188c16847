import argparse
import csv
import json
from os import listdir
from os.path import join

import pytest

from usr.cli.main import main, build_parser
from usr.dataset import save_dataset, load_dataset
from usr.degrade import synth_dataset, preset, procedural_texture
from usr.imageio import write_ppm
from usr.rng import StreamKey


def run(*args) -> int:
    return main(['usr', *args])


def tree(directory: str) -> dict:
    files = {}
    for sub in ('', 'hr', 'lr', 'records'):
        path = join(directory, sub)
        for name in listdir(path):
            full = join(path, name)
            if name not in ('hr', 'lr', 'records'):
                with open(full, 'rb') as fp:
                    files[join(sub, name)] = fp.read()
    return files


def subparsers(parser: argparse.ArgumentParser) -> dict:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


@pytest.fixture
def trained(tmp_path, tiny_run_config):
    ckpt = str(tmp_path / 'model' / 'tiny.usrc')
    assert run('train', '--config', tiny_run_config, '--ckpt-out', ckpt) == 0
    return ckpt


@pytest.fixture
def dataset(tmp_path, tiny_run_config):
    out = str(tmp_path / 'data')
    assert run('synth', '--config', tiny_run_config, '--out', out, '--threads', '1') == 0
    return out


class TestUsage:

    def test_no_command(self, capsys):
        assert run() == 1

    def test_unknown_flag(self, capsys):
        assert run('synth', '--out', 'x', '--bogus') == 1
        assert 'usage:' in capsys.readouterr().err

    def test_bad_choice(self):
        assert run('gradcheck', '--module', 'optim') == 1

    def test_stage_needs_checkpoint(self, tiny_run_config, tmp_path):
        assert run('train', '--config', tiny_run_config, '--stage', '2',
                   '--ckpt-out', str(tmp_path / 'x.usrc')) == 1

    def test_help_lists_every_option(self, capsys):
        for name, sub in subparsers(build_parser()).items():
            with pytest.raises(SystemExit) as info:
                run(name, '--help')
            assert info.value.code == 0
            text = capsys.readouterr().out
            for action in sub._actions:
                for option in action.option_strings:
                    assert option in text, f'{name}: {option}'

    def test_missing_config(self, tmp_path, capsys):
        assert run('config', '--config', str(tmp_path / 'absent.yaml')) == 2
        assert capsys.readouterr().err.strip().splitlines()[-1].startswith('usr: ')

    def test_threads_default_from_environment(self, monkeypatch):
        monkeypatch.setenv('USR_THREADS', ' 3 ')
        assert build_parser().parse_args(['synth', '--out', 'x']).threads == 3
        monkeypatch.setenv('USR_THREADS', '')
        assert build_parser().parse_args(['synth', '--out', 'x']).threads is None
        assert build_parser().parse_args(['synth', '--out', 'x', '--threads', '2']).threads == 2

    @pytest.mark.parametrize('value', ['many', '0'])
    def test_malformed_threads_environment(self, monkeypatch, capsys, value):
        monkeypatch.setenv('USR_THREADS', value)
        assert run('synth', '--out', 'x') == 1
        assert '$USR_THREADS' in capsys.readouterr().err


class TestConfig:

    def test_json_with_seed(self, capsys, tiny_run_config):
        assert run('config', '--config', tiny_run_config, '--json', '--seed', '9') == 0
        conf = json.loads(capsys.readouterr().out)
        assert conf['seed'] == 9
        assert conf['sr']['channels'] == 4
        assert conf['train']['lr'] == [2e-4, 1e-4, 5e-5]

    def test_save(self, tmp_path, capsys):
        path = tmp_path / 'run.yaml'
        assert run('config', '--save', str(path)) == 0
        assert 'seed: 0' in path.read_text()
        path.write_text('seed: 3\n')
        assert run('config', '--save', str(path)) == 0
        assert path.read_text() == 'seed: 3\n'


class TestData:

    def test_synth_is_reproducible(self, tmp_path, tiny_run_config):
        a, b = str(tmp_path / 'a'), str(tmp_path / 'b')
        assert run('synth', '--config', tiny_run_config, '--out', a, '--threads', '1') == 0
        assert run('synth', '--config', tiny_run_config, '--out', b, '--threads', '2') == 0
        assert tree(a) == tree(b)
        assert len(listdir(join(a, 'lr'))) == 2
        assert json.loads(tree(a)['run.json'])['seed'] == 5

    def test_synth_flags_override(self, tmp_path, tiny_run_config):
        out = str(tmp_path / 'd')
        assert run('synth', '--config', tiny_run_config, '--out', out, '--count', '3', '--mode', 'bn',
                   '--seed', '8') == 0
        samples = load_dataset(out)
        assert len(samples) == 3
        assert {s.record.mode for s in samples} == {'bn'}
        assert samples[0].lr.shape == (3, 16, 16)

    def test_degrade_directory(self, tmp_path, tiny_run_config):
        hr_dir = tmp_path / 'hr'
        hr_dir.mkdir()
        for i in range(2):
            write_ppm(procedural_texture(32, StreamKey(1, i, 'hr')), str(hr_dir / f'photo{i}.ppm'))
        out = str(tmp_path / 'd')
        assert run('degrade', '--config', tiny_run_config, '--in', str(hr_dir), '--out', out, '--mode', 'bj') == 0
        samples = load_dataset(out)
        assert [s.name for s in samples] == ['photo0', 'photo1']
        assert all(s.record.count('jpeg') == 1 and s.record.count('noise') == 0 for s in samples)

    def test_degrade_empty_directory(self, tmp_path):
        (tmp_path / 'empty').mkdir()
        assert run('degrade', '--in', str(tmp_path / 'empty'), '--out', str(tmp_path / 'd')) == 2


class TestModelCommands:

    def test_train_outputs(self, trained, tmp_path):
        folder = tmp_path / 'model'
        assert sorted(listdir(folder)) == ['run.json', 'tiny.metrics.csv', 'tiny.usrc']
        with open(folder / 'tiny.metrics.csv') as fp:
            rows = list(csv.DictReader(fp))
        assert [r['stage'] for r in rows] == ['1', '2', '3']

    def test_train_is_reproducible(self, trained, tmp_path, tiny_run_config):
        again = str(tmp_path / 'again.usrc')
        assert run('train', '--config', tiny_run_config, '--ckpt-out', again) == 0
        with open(trained, 'rb') as a, open(again, 'rb') as b:
            assert a.read() == b.read()

    def test_train_single_stages(self, tmp_path, tiny_run_config):
        first, second = str(tmp_path / 's1.usrc'), str(tmp_path / 's2.usrc')
        assert run('train', '--config', tiny_run_config, '--stage', '1', '--ckpt-out', first) == 0
        assert run('train', '--config', tiny_run_config, '--stage', '2', '--ckpt-in', first,
                   '--ckpt-out', second) == 0

    def test_sr(self, trained, dataset, tmp_path, tiny_run_config):
        out = str(tmp_path / 'sr.ppm')
        assert run('sr', '--config', tiny_run_config, '--ckpt', trained, '--in', join(dataset, 'lr', '00000.ppm'),
                   '--out', out) == 0
        with open(out, 'rb') as fp:
            assert fp.read().startswith(b'P6\n32 32\n255\n')

    def test_sr_missing_checkpoint(self, dataset, tmp_path, capsys):
        code = run('sr', '--ckpt', str(tmp_path / 'absent.usrc'), '--in', join(dataset, 'lr', '00000.ppm'),
                   '--out', str(tmp_path / 'sr.ppm'))
        assert code == 2
        last = capsys.readouterr().err.strip().splitlines()[-1]
        assert last.startswith('usr: checkpoint not found')

    def test_wrong_architecture(self, trained, dataset, tmp_path):
        # default configuration builds a wider network than the tiny checkpoint
        assert run('sr', '--ckpt', trained, '--in', join(dataset, 'lr', '00000.ppm'),
                   '--out', str(tmp_path / 'sr.ppm')) == 2

    def test_eval(self, trained, dataset, tmp_path, tiny_run_config, capsys):
        report = str(tmp_path / 'quality.csv')
        assert run('eval', '--config', tiny_run_config, '--ckpt', trained, '--dataset', dataset,
                   '--report', report, '--threads', '2') == 0
        out = capsys.readouterr().out
        assert 'bicubic' in out and 'bnj' in out
        with open(report) as fp:
            assert [r['image'] for r in csv.DictReader(fp)] == ['00000', '00001']

    def test_stability(self, trained, dataset, tmp_path, tiny_run_config, capsys):
        report = str(tmp_path / 'stability.csv')
        assert run('stability', '--config', tiny_run_config, '--ckpt', trained,
                   '--image', join(dataset, 'lr', '00000.ppm'), join(dataset, 'lr', '00001.ppm'),
                   '--patches', '3', '--patch-size', '16', '--report', report) == 0
        assert 'instability score' in capsys.readouterr().out
        with open(report) as fp:
            assert [r['dims'] for r in csv.DictReader(fp)] == ['36', '36']

    def test_cluster(self, trained, tmp_path, tiny_run_config, capsys):
        mixed = []
        for mode in ('bn', 'bj'):
            for s in synth_dataset(2, 32, preset(mode, 2), seed=5, threads=1):
                s.name = f'{mode}-{s.name}'
                mixed.append(s)
        folder = str(tmp_path / 'mixed')
        save_dataset(mixed, folder)
        report, svg = str(tmp_path / 'clusters.csv'), str(tmp_path / 'clusters.svg')
        assert run('cluster', '--config', tiny_run_config, '--ckpt', trained, '--dataset', folder,
                   '--report', report, '--svg', svg, '--compare', trained) == 0
        assert 'silhouette' in capsys.readouterr().out
        with open(svg) as fp:
            assert fp.read().count('<circle ') == 4
        with open(report) as fp:
            assert sorted(r['label'] for r in csv.DictReader(fp)) == ['bj', 'bj', 'bn', 'bn']

    def test_cluster_single_mode(self, trained, dataset, tiny_run_config):
        assert run('cluster', '--config', tiny_run_config, '--ckpt', trained, '--dataset', dataset) == 2

    def test_ablation(self, tmp_path, tiny_run_config, capsys):
        report = str(tmp_path / 'ablation.csv')
        assert run('ablation', '--config', tiny_run_config, '--variants', 'full', 'neither',
                   '--heldout-count', '1', '--report', report) == 0
        with open(report) as fp:
            assert [r['variant'] for r in csv.DictReader(fp)] == ['full', 'neither']


class TestGradCheck:

    def test_nn_suite(self, capsys):
        assert run('gradcheck', '--module', 'nn') == 0
        out = capsys.readouterr().out
        assert 'conv2d' in out and 'FAIL' not in out
