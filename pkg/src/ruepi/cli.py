"""
Command-line pipeline: preprocess -> train -> intervals -> evaluate, one directory per seed.

Each stage reads only what earlier stages persisted. Calibration uses the validation
split; test targets are first read by evaluate.
"""
import argparse
import logging
import os
import sys

import numpy as np
import pandas as pd

from . import logger
from .conformal import (NORMALIZED_CP, SPLIT_CP, IntervalBatch, normalized_cp_calibrate, normalized_cp_intervals,
                        save_calibration, split_cp_calibrate, split_cp_intervals)
from .copula_pi import COPULA, copula_calibrate, copula_intervals, save_copula
from .dataio import WindowedDataset, generate_synthetic, load_csv, prepare_dataset, synthetic_assignment
from .evalmetrics import POOLED, aggregate_reports, build_report, output_ranges, uncertainty_metrics
from .exceptions import ConfigError, DataError, NumericError, RuePiError
from .knn_pi import KNN, knn_calibrate, knn_intervals, save_knn
from .neural import RueModel, compute_errors, feature_errors, predict, train_decoder, train_forecaster
from .runconfig import RunConfig
from .util import PACKAGE_LOGGING_CONFIG, read_json, setup_logging, write_frame, write_json

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DATASET_DIR = 'dataset'
MODEL_FILE = 'model.json'
RUE_FILE = 'rue_test.csv'
INTERVAL_COLUMNS = ['row', 'output', 'horizon', 'prediction', 'lower', 'upper']


def seed_dir(config, seed):
    return os.path.join(config.output_dir, 'seed_{}'.format(seed))


def interval_file(directory, method):
    return os.path.join(directory, 'intervals_{}.csv'.format(method))


def cmd_preprocess(config, seed):
    """
    Build the windowed dataset for one seed and persist it.
    """
    if config.source == 'csv':
        series = load_csv(config.csv_path, config.schema)
        assignment = None
    else:
        spec = config.get_synthetic_spec(seed)
        series = generate_synthetic(spec)
        assignment = synthetic_assignment(spec)
    dataset = prepare_dataset(series, config.get_preprocess_config(), config.window, config.horizon,
                              config.target_channels, fractions=config.fractions, seed=seed, assignment=assignment)
    directory = os.path.join(seed_dir(config, seed), DATASET_DIR)
    dataset.save(directory)
    counts = dataset.counts()
    print("seed {}: train={} validation={} test={} I={} O={} -> {}".format(
        seed, counts['train'], counts['validation'], counts['test'], dataset.inputs.shape[1],
        dataset.targets.shape[1], directory))
    return dataset


def cmd_train(config, seed):
    """
    Two-step training: forecaster first, then the decoder on the frozen encoder.
    """
    directory = seed_dir(config, seed)
    dataset = WindowedDataset.load(os.path.join(directory, DATASET_DIR), hide_targets=('test',))
    train_cfg = config.get_train_config(seed)
    shape = config.get_model_shape()
    encoder, head, forecast_loss = train_forecaster(dataset, train_cfg, shape)
    checksum = encoder.checksum()
    decoder, recon_loss = train_decoder(encoder, dataset, train_cfg, shape)
    model = RueModel(encoder=encoder, head=head, decoder=decoder, metadata={
        'seed': seed,
        'forecaster_validation_loss': forecast_loss,
        'decoder_validation_loss': recon_loss,
        'encoder_checksum': checksum,
    })
    model.save(os.path.join(directory, MODEL_FILE))
    print("seed {}: forecaster val MSE={:.6g} decoder val MSE={:.6g}".format(seed, forecast_loss, recon_loss))
    return model


def _write_intervals(path, batch, output_index):
    n, n_out = batch.shape
    rows = np.repeat(np.arange(n), n_out)
    outputs = [output_index[j][0] for j in range(n_out)] * n
    horizons = [output_index[j][1] for j in range(n_out)] * n
    frame = pd.DataFrame({'row': rows, 'output': outputs, 'horizon': horizons,
                          'prediction': batch.prediction.ravel(), 'lower': batch.lower.ravel(),
                          'upper': batch.upper.ravel()}, columns=INTERVAL_COLUMNS)
    write_frame(path, frame)


def read_intervals(path, output_index, alpha, method):
    frame = pd.read_csv(path)
    col_of = {(str(o), int(h)): j for j, (o, h) in enumerate(output_index)}
    n = int(frame['row'].max()) + 1 if len(frame) else 0
    shape = (n, len(output_index))
    arrays = {name: np.full(shape, np.nan) for name in ('prediction', 'lower', 'upper')}
    cols = np.array([col_of[(str(o), int(h))] for o, h in zip(frame['output'], frame['horizon'])], dtype=np.int64)
    rows = frame['row'].to_numpy(dtype=np.int64)
    for name in arrays:
        arrays[name][rows, cols] = frame[name].to_numpy(dtype=np.float64)
    return IntervalBatch(lower=arrays['lower'], upper=arrays['upper'], alpha=alpha, method=method,
                         prediction=arrays['prediction'])


def _calibrate_and_apply(method, config, dataset, cal_errors, predictions, rho_test, directory):
    section = config.section('intervals')
    if method == SPLIT_CP:
        cal = split_cp_calibrate(cal_errors.err, config.alpha)
        save_calibration(os.path.join(directory, 'calibration_{}.json'.format(method)), cal)
        return split_cp_intervals(cal, predictions)
    if method == NORMALIZED_CP:
        cal = normalized_cp_calibrate(cal_errors.err, cal_errors.rho_scalar, config.alpha)
        save_calibration(os.path.join(directory, 'calibration_{}.json'.format(method)), cal)
        return normalized_cp_intervals(cal, predictions, rho_test.sum(axis=1))
    if method == COPULA:
        pool = len(dataset.channels) if section.get('copula_pool_channels') else None
        cal = copula_calibrate(cal_errors, config.alpha, ridge=float(section['ridge']), pool_channels=pool)
        save_copula(os.path.join(directory, 'copula.json'), cal)
        return copula_intervals(cal, predictions, rho_test)
    if method == KNN:
        cal = knn_calibrate(cal_errors, config.alpha, k_override=section.get('k'),
                            standardize=bool(section.get('knn_standardize')))
        save_knn(os.path.join(directory, 'knn.json'), cal)
        return knn_intervals(cal, predictions, rho_test)
    raise ConfigError("Unknown interval method '{}'".format(method))


def _calibration_inputs(directory):
    dataset = WindowedDataset.load(os.path.join(directory, DATASET_DIR), hide_targets=('test',))
    model = RueModel.load(os.path.join(directory, MODEL_FILE))
    x_val, y_val = dataset.subset('validation')
    if x_val.shape[0] == 0:
        raise DataError("The validation split is empty; nothing to calibrate on")
    x_test, _ = dataset.subset('test')
    cal_errors = compute_errors(model, x_val, y_val)
    return dataset, model, cal_errors, predict(model, x_test), feature_errors(model, x_test)


def cmd_intervals(config, seed):
    """
    Calibrate every configured method on validation errors and write test-split intervals.

    :return: method -> IntervalBatch for the methods that succeeded.
    """
    directory = seed_dir(config, seed)
    dataset, model, cal_errors, predictions, rho_test = _calibration_inputs(directory)
    write_frame(os.path.join(directory, RUE_FILE),
                pd.DataFrame({'row': np.arange(rho_test.shape[0]), 'rue': rho_test.sum(axis=1)}))

    results = {}
    for method in config.methods:
        try:
            batch = _calibrate_and_apply(method, config, dataset, cal_errors, predictions, rho_test, directory)
        except RuePiError as e:
            logger.warning("Method '{}' failed for seed {}: {}".format(method, seed, e))
            continue
        _write_intervals(interval_file(directory, method), batch, dataset.output_index())
        results[method] = batch
        logger.info("Wrote {} intervals for seed {}".format(method, seed))
    if not results:
        raise NumericError("No interval method succeeded for seed {}".format(seed))
    return results


def _ranges(config, dataset, y_test):
    split = config.section('evaluate').get('range_split', 'test')
    if split == 'test':
        y = y_test
    else:
        _, y = dataset.subset(split)
    r = output_ranges(y)
    return np.where(r > 0, r, 1.0)


def cmd_evaluate(config, seed):
    """
    Score persisted interval files against test targets.
    """
    directory = seed_dir(config, seed)
    evaluate = config.section('evaluate')
    dataset = WindowedDataset.load(os.path.join(directory, DATASET_DIR))
    _, y_test = dataset.subset('test')
    output_index = dataset.output_index()

    batches, missing = {}, []
    for method in config.methods:
        path = interval_file(directory, method)
        if not os.path.isfile(path):
            missing.append(method)
            continue
        batches[method] = read_intervals(path, output_index, config.alpha, method)
    if missing:
        logger.warning("Seed {}: no interval file for {}".format(seed, missing))
    if not batches:
        raise DataError("Seed {}: no interval files to evaluate in '{}'".format(seed, directory))

    report = build_report(batches, y_test, _ranges(config, dataset, y_test), config.alpha, output_index=output_index,
                          delta=evaluate.get('delta'), rho_w=float(evaluate['rho_w']), beta=float(evaluate['beta']))

    rue_path = os.path.join(directory, RUE_FILE)
    if os.path.isfile(rue_path):
        rue = pd.read_csv(rue_path)['rue'].to_numpy(dtype=np.float64)
        prediction = next(iter(batches.values())).prediction
        losses = np.abs(y_test - prediction).mean(axis=1)
        report.uncertainty = uncertainty_metrics(losses, rue, tuple(evaluate['sigma_levels']),
                                                 evaluate.get('correlation', 'pearson')).to_dict()
    frame = report.save(directory)
    return frame, report


def aggregate(config, frames):
    summary = aggregate_reports(frames)
    write_frame(os.path.join(config.output_dir, 'report.csv'), summary)
    uncertainty = []
    for seed in config.seeds:
        path = os.path.join(seed_dir(config, seed), 'report.json')
        if os.path.isfile(path):
            uncertainty.append(dict(read_json(path).get('uncertainty') or {}, seed=seed))
    write_json(os.path.join(config.output_dir, 'report.json'), {
        'alpha': config.alpha,
        'seeds': config.seeds,
        'rows': summary.to_dict(orient='records'),
        'uncertainty': uncertainty,
    })
    return summary


def cmd_report(config):
    """
    Print the pooled mean +- std table across seeds.
    """
    path = os.path.join(config.output_dir, 'report.csv')
    if not os.path.isfile(path):
        frames = [pd.read_csv(os.path.join(seed_dir(config, s), 'report.csv'), dtype={'horizon': str})
                  for s in config.seeds if os.path.isfile(os.path.join(seed_dir(config, s), 'report.csv'))]
        if not frames:
            raise DataError("No reports under '{}'; run evaluate first".format(config.output_dir))
        summary = aggregate(config, frames)
    else:
        summary = pd.read_csv(path, dtype={'horizon': str})
    pooled = summary[summary['output'] == POOLED]
    for (method, horizon), group in pooled.groupby(['method', 'horizon'], sort=True):
        cells = ['{}={:.4g}+-{:.2g}'.format(r.metric, r.mean, r.std) for r in group.itertuples()]
        print("{:<14} h={:<4} {}".format(method, horizon, ' '.join(cells)))
    return summary


def cmd_sweep_k(config, seed, k_values=None):
    """
    KNN ablation over k; writes sweep_k.csv with pooled metrics per k.
    """
    directory = seed_dir(config, seed)
    dataset, _, cal_errors, predictions, rho_test = _calibration_inputs(directory)
    batches = {}
    for k in k_values or config.section('evaluate')['sweep_k']:
        if k > cal_errors.n:
            logger.warning("Skipping k={} above the {} calibration rows".format(k, cal_errors.n))
            continue
        cal = knn_calibrate(cal_errors, config.alpha, k_override=k,
                            standardize=bool(config.section('intervals').get('knn_standardize')))
        batches['knn_k{}'.format(k)] = knn_intervals(cal, predictions, rho_test)
    if not batches:
        raise ConfigError("No k value fits the calibration set")

    full = WindowedDataset.load(os.path.join(directory, DATASET_DIR))
    _, y_test = full.subset('test')
    evaluate = config.section('evaluate')
    report = build_report(batches, y_test, _ranges(config, full, y_test), config.alpha,
                          output_index=full.output_index(), delta=evaluate.get('delta'),
                          rho_w=float(evaluate['rho_w']), beta=float(evaluate['beta']))
    frame = report.to_frame()
    frame = frame[frame['output'] == POOLED].copy()
    frame.insert(0, 'k', frame['method'].str.replace('knn_k', '', regex=False).astype(int))
    write_frame(os.path.join(directory, 'sweep_k.csv'), frame)
    return frame


def _for_seeds(config, fn):
    return [fn(config, seed) for seed in config.seeds]


def run_command(command, config, k_values=None):
    if command == 'preprocess':
        return _for_seeds(config, cmd_preprocess)
    if command == 'train':
        return _for_seeds(config, cmd_train)
    if command == 'intervals':
        return _for_seeds(config, cmd_intervals)
    if command == 'evaluate':
        frames = [frame for frame, _ in _for_seeds(config, cmd_evaluate)]
        return aggregate(config, frames)
    if command == 'report':
        return cmd_report(config)
    if command == 'sweep-k':
        return [cmd_sweep_k(config, seed, k_values) for seed in config.seeds]
    if command == 'run':
        for stage in ('preprocess', 'train', 'intervals', 'evaluate'):
            result = run_command(stage, config)
        return result
    raise ConfigError("Unknown command '{}'".format(command))


COMMANDS = {
    'preprocess': 'build the windowed dataset',
    'train': 'train forecaster then decoder',
    'intervals': 'calibrate methods on validation errors and write test intervals',
    'evaluate': 'score interval files and aggregate over seeds',
    'report': 'print the aggregated report',
    'sweep-k': 'evaluate KNN intervals over several k',
    'run': 'preprocess, train, intervals and evaluate in order',
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', help='run configuration JSON (packaged defaults when omitted)')
    common.add_argument('--seed', type=int, help='run a single seed instead of the configured list')
    common.add_argument('--alpha', type=float, help='miscoverage level (default 0.05)')
    common.add_argument('--methods', help='comma separated subset of split_cp,normalized_cp,copula,knn')
    common.add_argument('--k', type=int, help='KNN neighbourhood size override')
    common.add_argument('--out', help='output directory')
    common.add_argument('--log-config', default=PACKAGE_LOGGING_CONFIG, help='logging dictConfig JSON')
    common.add_argument('-d', '--debug', type=int, default=logging.INFO, help='logging level')

    parser = argparse.ArgumentParser(prog='ruepi', description='Reconstruction-error conditioned prediction intervals.')
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True
    for name, text in COMMANDS.items():
        cmd = sub.add_parser(name, parents=[common], help=text)
        if name == 'sweep-k':
            cmd.add_argument('--k-values', help='comma separated k values (default from config)')
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_config, args.debug)
    try:
        config = RunConfig.load(args.config)
        methods = [m.strip() for m in args.methods.split(',') if m.strip()] if args.methods else None
        config = config.with_overrides(seed=args.seed, alpha=args.alpha, methods=methods, k=args.k, out=args.out)
        k_values = None
        if getattr(args, 'k_values', None):
            k_values = [int(k) for k in args.k_values.split(',')]
        run_command(args.command, config, k_values)
    except ConfigError as e:
        logger.error("Configuration error: {}".format(e))
        return EXIT_CONFIG
    except DataError as e:
        logger.error("Data error: {}".format(e))
        return EXIT_DATA
    except NumericError as e:
        logger.error("Numeric failure: {}".format(e))
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
