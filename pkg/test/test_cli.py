import json
import os
import sys
import time

import numpy as np
import pandas as pd
import pytest
from mock import patch

modules_path = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(modules_path, 'src'))

from ruepi import cli
from ruepi.dataio import WindowedDataset
from ruepi.neural import RueModel, compute_errors

TEST_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'config', 'run_config.json')
METHODS = ('split_cp', 'normalized_cp', 'copula', 'knn')


def run(*args):
    return cli.main(list(args) + ['--config', TEST_CONFIG])


def read_bytes(path):
    with open(path, 'rb') as f:
        return f.read()


class TestCli(object):
    def test_full_pipeline(self, tmp_path):
        out = str(tmp_path)
        assert run('run', '--out', out) == cli.EXIT_OK
        for seed in (0, 1):
            seed_dir = os.path.join(out, 'seed_{}'.format(seed))
            assert os.path.isfile(os.path.join(seed_dir, 'dataset', 'meta.json'))
            assert os.path.isfile(os.path.join(seed_dir, 'model.json'))
            assert os.path.isfile(os.path.join(seed_dir, 'copula.json'))
            assert os.path.isfile(os.path.join(seed_dir, 'knn.json'))
            assert os.path.isfile(os.path.join(seed_dir, 'report.csv'))
            for method in METHODS:
                frame = pd.read_csv(os.path.join(seed_dir, 'intervals_{}.csv'.format(method)))
                assert list(frame.columns) == cli.INTERVAL_COLUMNS
                assert (frame['lower'] <= frame['upper']).all()
        summary = pd.read_csv(os.path.join(out, 'report.csv'))
        assert set(summary['method']) == set(METHODS)
        assert (summary['n_seeds'] == 2).all()
        report = json.loads(read_bytes(os.path.join(out, 'report.json')))
        assert [u['seed'] for u in report['uncertainty']] == [0, 1]

    def test_model_records_both_losses(self, tmp_path):
        out = str(tmp_path)
        assert run('preprocess', '--seed', '0', '--out', out) == cli.EXIT_OK
        assert run('train', '--seed', '0', '--out', out) == cli.EXIT_OK
        metadata = json.loads(read_bytes(os.path.join(out, 'seed_0', 'model.json')))['metadata']
        assert metadata['seed'] == 0
        assert np.isfinite(metadata['forecaster_validation_loss'])
        assert np.isfinite(metadata['decoder_validation_loss'])
        assert len(metadata['encoder_checksum']) == 64

    def test_same_seed_same_files(self, tmp_path):
        first, second = str(tmp_path / 'a'), str(tmp_path / 'b')
        assert run('run', '--seed', '0', '--methods', 'split_cp,knn', '--out', first) == cli.EXIT_OK
        assert run('run', '--seed', '0', '--methods', 'split_cp,knn', '--out', second) == cli.EXIT_OK
        for name in ('model.json', 'intervals_split_cp.csv', 'intervals_knn.csv', 'dataset/inputs.csv'):
            assert read_bytes(os.path.join(first, 'seed_0', name)) == read_bytes(os.path.join(second, 'seed_0', name))

    def test_single_method(self, tmp_path):
        out = str(tmp_path)
        assert run('run', '--seed', '0', '--methods', 'split_cp', '--out', out) == cli.EXIT_OK
        files = sorted(f for f in os.listdir(os.path.join(out, 'seed_0')) if f.startswith('intervals_'))
        assert files == ['intervals_split_cp.csv']

    def test_k_override_recorded(self, tmp_path):
        out = str(tmp_path)
        assert run('run', '--seed', '0', '--methods', 'knn', '--k', '5', '--out', out) == cli.EXIT_OK
        assert json.loads(read_bytes(os.path.join(out, 'seed_0', 'knn.json')))['k'] == 5

    def test_intervals_ignore_test_targets(self, tmp_path):
        out = str(tmp_path)
        seed_dir = os.path.join(out, 'seed_0')
        for stage in ('preprocess', 'train', 'intervals'):
            assert run(stage, '--seed', '0', '--out', out) == cli.EXIT_OK
        before = {m: read_bytes(os.path.join(seed_dir, 'intervals_{}.csv'.format(m))) for m in METHODS}

        targets_path = os.path.join(seed_dir, 'dataset', 'targets.csv')
        targets = pd.read_csv(targets_path)
        split = pd.read_csv(os.path.join(seed_dir, 'dataset', 'split.csv'))
        targets.loc[(split['split'] == 'test').to_numpy()] += 1000.0
        targets.to_csv(targets_path, index=False, float_format='%.17g')

        assert run('intervals', '--seed', '0', '--out', out) == cli.EXIT_OK
        for method in METHODS:
            assert read_bytes(os.path.join(seed_dir, 'intervals_{}.csv'.format(method))) == before[method]

    def test_sweep_k(self, tmp_path):
        out = str(tmp_path)
        for stage in ('preprocess', 'train'):
            assert run(stage, '--seed', '0', '--out', out) == cli.EXIT_OK
        assert run('sweep-k', '--seed', '0', '--out', out) == cli.EXIT_OK
        frame = pd.read_csv(os.path.join(out, 'seed_0', 'sweep_k.csv'))
        assert sorted(set(frame['k'])) == [3, 5]
        assert run('sweep-k', '--seed', '0', '--out', out, '--k-values', '4') == cli.EXIT_OK
        assert set(pd.read_csv(os.path.join(out, 'seed_0', 'sweep_k.csv'))['k']) == {4}

    def test_report(self, tmp_path, capsys):
        out = str(tmp_path)
        assert run('run', '--seed', '0', '--methods', 'split_cp', '--out', out) == cli.EXIT_OK
        capsys.readouterr()
        assert run('report', '--seed', '0', '--out', out) == cli.EXIT_OK
        assert 'split_cp' in capsys.readouterr().out

    def test_unknown_target_is_config_error(self, tmp_path):
        config = tmp_path / 'ruepi.json'
        config.write_text(json.dumps({'window': {'target_channels': ['ch7']}}))
        out = str(tmp_path / 'out')
        assert cli.main(['preprocess', '--config', str(config), '--out', out]) == cli.EXIT_CONFIG
        assert not os.path.exists(out)

    def test_evaluate_without_intervals_is_data_error(self, tmp_path):
        out = str(tmp_path)
        assert run('preprocess', '--seed', '0', '--out', out) == cli.EXIT_OK
        assert run('evaluate', '--seed', '0', '--out', out) == cli.EXIT_DATA

    def test_train_without_dataset_is_data_error(self, tmp_path):
        assert run('train', '--seed', '0', '--out', str(tmp_path)) == cli.EXIT_DATA

    def test_intervals_without_model_is_data_error(self, tmp_path):
        out = str(tmp_path)
        assert run('preprocess', '--seed', '0', '--out', out) == cli.EXIT_OK
        assert run('intervals', '--seed', '0', '--out', out) == cli.EXIT_DATA
        assert run('sweep-k', '--seed', '0', '--out', out) == cli.EXIT_DATA

    @patch('sys.argv', ['ruepi'])
    def test_missing_command_exits(self):
        with pytest.raises(SystemExit) as e:
            cli.main()
        assert e.value.code == 2

    @patch('sys.argv', ['ruepi', 'run', '--alpha', 'abc'])
    def test_bad_flag_exits(self):
        with pytest.raises(SystemExit) as e:
            cli.main()
        assert e.value.code == 2


def write_config(tmp_path, synthetic=None, train=None, seeds=None):
    config = json.loads(read_bytes(TEST_CONFIG))
    config['data']['synthetic'].update(synthetic or {})
    config['train'].update(train or {})
    if seeds is not None:
        config['seeds'] = seeds
    path = str(tmp_path / 'ruepi.json')
    with open(path, 'w') as f:
        json.dump(config, f)
    return path


def pooled_covp(seed_dir, method):
    frame = pd.read_csv(os.path.join(seed_dir, 'report.csv'), dtype={'horizon': str, 'output': str})
    row = frame[(frame['method'] == method) & (frame['output'] == 'all') & (frame['horizon'] == 'all') &
                (frame['metric'] == 'covp')]
    return float(row['value'].iloc[0])


def test_shift_raises_rue_and_conditioned_methods_keep_coverage(tmp_path):
    seeds = [0, 1, 2, 3, 4]
    path = write_config(tmp_path, synthetic={'n_subjects': 20, 'steps_per_subject': 120, 'shift_magnitude': 3.0},
                        train={'max_epochs': 20}, seeds=seeds)
    out = str(tmp_path / 'out')
    assert cli.main(['run', '--config', path, '--methods', 'split_cp,copula,knn', '--out', out]) == cli.EXIT_OK

    covp = {method: [] for method in ('split_cp', 'copula', 'knn')}
    for seed in seeds:
        seed_dir = os.path.join(out, 'seed_{}'.format(seed))
        dataset = WindowedDataset.load(os.path.join(seed_dir, 'dataset'))
        model = RueModel.load(os.path.join(seed_dir, 'model.json'))
        x_val, y_val = dataset.subset('validation')
        validation_rue = compute_errors(model, x_val, y_val).rho_scalar.mean()
        test_rue = pd.read_csv(os.path.join(seed_dir, 'rue_test.csv'))['rue'].mean()
        assert test_rue > validation_rue
        for method in covp:
            covp[method].append(pooled_covp(seed_dir, method))
    baseline = np.median(covp['split_cp'])
    assert np.median(covp['copula']) <= baseline + 0.0005
    assert np.median(covp['knn']) <= baseline + 0.0005


def test_pipeline_on_two_thousand_training_rows_is_reproducible(tmp_path):
    path = write_config(tmp_path, synthetic={'n_subjects': 20, 'steps_per_subject': 150, 'shift_magnitude': 0.0},
                        train={'max_epochs': 20}, seeds=[0])
    outputs = []
    for name in ('a', 'b'):
        out = str(tmp_path / name)
        started = time.perf_counter()
        assert cli.main(['run', '--config', path, '--out', out]) == cli.EXIT_OK
        assert time.perf_counter() - started < 300.0
        outputs.append(out)

    dataset = WindowedDataset.load(os.path.join(outputs[0], 'seed_0', 'dataset'))
    assert dataset.counts()['train'] >= 2000
    first = os.path.join(outputs[0], 'seed_0')
    names = sorted(os.path.relpath(os.path.join(root, f), first) for root, _, files in os.walk(first) for f in files)
    assert 'intervals_copula.csv' in names and 'intervals_knn.csv' in names
    for name in names:
        assert read_bytes(os.path.join(first, name)) == read_bytes(os.path.join(outputs[1], 'seed_0', name))
