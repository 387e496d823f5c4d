"""
CSV ingestion, preprocessing recipes, per-subject splits, sliding windows and synthetic data.

Input CSV layout: ``subject,timestamp,<channel...>``, timestamps as ISO-8601 or integer
epoch seconds.
"""
import os
import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from . import logger
from .exceptions import ConfigError, CsvParseError, DataError, SchemaError
from .util import read_json, write_frame, write_json

SUBJECT_COLUMN = 'subject'
TIMESTAMP_COLUMN = 'timestamp'
SPLITS = ('train', 'validation', 'test')
MISSING_TOKENS = ('', 'NaN', 'nan', 'NA')
RESAMPLE_STATS = ('mean', 'std')
NORMALIZATIONS = ('zscore', 'minmax')
NOISE_PROFILES = ('constant', 'level', 'periodic')
# pandas tokenizer errors name the offending line only in their message
PARSER_LINE = re.compile(r"\bline (\d+)")


@dataclass(eq=False)
class RawSeries:
    """
    One subject's signals: a frame indexed by timestamp, one column per channel.
    """
    subject_id: str
    frame: pd.DataFrame

    def __post_init__(self):
        index = self.frame.index
        if len(index) > 1 and not index.is_monotonic_increasing:
            raise DataError("Timestamps of subject '{}' are not ordered".format(self.subject_id))

    @property
    def channel_names(self):
        return list(self.frame.columns)

    def __len__(self):
        return len(self.frame)


def _parse_timestamps(raw, path):
    text = raw.astype(str).str.strip()
    numeric = pd.to_numeric(text, errors='coerce')
    if numeric.notna().all():
        return pd.to_datetime(numeric.astype(np.int64), unit='s')
    parsed = pd.to_datetime(text, errors='coerce', utc=True)
    bad = parsed.isna()
    if bad.any():
        line = int(bad.to_numpy().argmax()) + 2
        raise CsvParseError("{}:{}: unparseable timestamp '{}'".format(path, line, text[bad].iloc[0]),
                            path=path, line=line)
    return parsed.dt.tz_convert(None)


def load_csv(path, schema):
    """
    :param schema: channel names that must appear in the header.
    :return: one RawSeries per subject, subjects in lexicographic order, rows sorted by timestamp (stable).
    """
    if not os.path.isfile(path):
        raise DataError("CSV file '{}' not found".format(path))
    try:
        table = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except pd.errors.ParserError as e:
        match = PARSER_LINE.search(str(e))
        raise CsvParseError("{}: {}".format(path, e), path=path, line=int(match.group(1)) if match else None)
    except pd.errors.EmptyDataError:
        raise SchemaError("{}: missing header".format(path))

    missing = [c for c in [SUBJECT_COLUMN, TIMESTAMP_COLUMN] + list(schema) if c not in table.columns]
    if missing:
        raise SchemaError("{}: header lacks columns {}".format(path, missing), channels=missing)
    if table.empty:
        return []

    values = {}
    for channel in schema:
        text = table[channel].str.strip()
        missing = text.isin(MISSING_TOKENS)
        numeric = pd.to_numeric(text.where(~missing), errors='coerce')
        bad = numeric.isna() & ~missing
        if bad.any():
            line = int(bad.to_numpy().argmax()) + 2
            raise CsvParseError("{}:{}: non-numeric value '{}' in channel '{}'".format(
                path, line, text[bad].iloc[0], channel), path=path, line=line)
        values[channel] = numeric.astype(np.float64)

    frame = pd.DataFrame(values)
    frame[TIMESTAMP_COLUMN] = _parse_timestamps(table[TIMESTAMP_COLUMN], path)
    frame[SUBJECT_COLUMN] = table[SUBJECT_COLUMN].str.strip()

    series = []
    for subject_id, group in frame.groupby(SUBJECT_COLUMN, sort=True):
        group = group.sort_values(TIMESTAMP_COLUMN, kind='mergesort')
        group = group.set_index(TIMESTAMP_COLUMN)[list(schema)]
        series.append(RawSeries(subject_id=str(subject_id), frame=group))
    logger.info("Loaded {} subjects from '{}'".format(len(series), path))
    return series


@dataclass(frozen=True)
class PreprocessConfig:
    value_floor: float = 0.0
    floor_inclusive: bool = True
    floor_channels: tuple = None
    value_ceilings: dict = field(default_factory=dict)
    resample_period: float = 60.0
    resample_stats: tuple = ('mean',)
    normalization: str = 'zscore'
    drop_missing: bool = True

    def validate(self):
        if self.resample_period is not None and not self.resample_period > 0:
            raise ConfigError("resample_period must be positive, got {}".format(self.resample_period))
        if not set(self.resample_stats) or not set(self.resample_stats) <= set(RESAMPLE_STATS):
            raise ConfigError("resample_stats must be a nonempty subset of {}".format(RESAMPLE_STATS))
        if self.normalization is not None and self.normalization not in NORMALIZATIONS:
            raise ConfigError("normalization must be one of {}".format(NORMALIZATIONS))
        for channel, ceiling in self.value_ceilings.items():
            if not np.isfinite(ceiling):
                raise ConfigError("Ceiling for '{}' must be finite".format(channel))
        return self


def mimic_like(pressure_channels=(), ceiling=250.0):
    """ Minute-level recipe: floor 0, pressure ceiling, per-minute mean and std, z-score. """
    return PreprocessConfig(value_floor=0.0, floor_inclusive=True,
                            value_ceilings={c: ceiling for c in pressure_channels},
                            resample_period=60.0, resample_stats=('mean', 'std'),
                            normalization='zscore', drop_missing=True)


def physionet_like(pressure_channels=(), volume_channels=(), volume_ceiling=1000.0):
    """ Hour-level recipe: pressures must be strictly positive, volume ceiling, hourly mean, min-max. """
    return PreprocessConfig(value_floor=0.0, floor_inclusive=False, floor_channels=tuple(pressure_channels),
                            value_ceilings={c: volume_ceiling for c in volume_channels},
                            resample_period=3600.0, resample_stats=('mean',),
                            normalization='minmax', drop_missing=True)


def derived_name(channel, stat):
    return channel if stat == 'mean' else '{}_{}'.format(channel, stat)


def resampled_channels(channels, cfg):
    """ Column order produced by resampling: every channel per statistic, statistics in config order. """
    return [derived_name(c, stat) for stat in cfg.resample_stats for c in channels]


def _filter_rows(frame, cfg):
    keep = pd.Series(True, index=frame.index)
    if cfg.value_floor is not None:
        cols = cfg.floor_channels if cfg.floor_channels is not None else frame.columns
        block = frame[list(cols)]
        below = block < cfg.value_floor if cfg.floor_inclusive else block <= cfg.value_floor
        keep &= ~below.any(axis=1)
    for channel, ceiling in cfg.value_ceilings.items():
        if channel in frame.columns:
            keep &= ~(frame[channel] > ceiling)
    return frame[keep.to_numpy()]


def _resample(frame, cfg):
    rule = pd.Timedelta(seconds=cfg.resample_period)
    grouped = frame.resample(rule, origin='epoch')
    counts = grouped.size()
    pieces = []
    for stat in cfg.resample_stats:
        block = grouped.mean() if stat == 'mean' else grouped.std(ddof=0)
        pieces.append(block.rename(columns=lambda c: derived_name(c, stat)))
    out = pd.concat(pieces, axis=1)
    # empty periods emit no row
    return out[counts.reindex(out.index).fillna(0).to_numpy() > 0]


def preprocess(series, cfg, normalizer=None):
    """
    Filter out-of-range rows, resample, drop missing rows and optionally normalize.

    :param normalizer: a Normalizer fitted on training subjects; applied last when given.
    """
    cfg.validate()
    frame = _filter_rows(series.frame, cfg)
    if cfg.resample_period is not None:
        if len(frame):
            frame = _resample(frame, cfg)
        else:
            # an emptied subject still carries the derived channel layout
            frame = pd.DataFrame(columns=resampled_channels(series.channel_names, cfg), dtype=np.float64,
                                 index=frame.index)
    if cfg.drop_missing:
        frame = frame.dropna(how='any')
    if not len(frame):
        logger.warning("All rows of subject '{}' were filtered out".format(series.subject_id))
    out = RawSeries(subject_id=series.subject_id, frame=frame)
    return normalizer.transform(out) if normalizer is not None else out


@dataclass(eq=False)
class Normalizer:
    method: str
    center: dict
    scale: dict

    @classmethod
    def fit(cls, series, method):
        """ Statistics pooled over the given (training) subjects. """
        if method not in NORMALIZATIONS:
            raise ConfigError("normalization must be one of {}".format(NORMALIZATIONS))
        frames = [s.frame for s in series if len(s)]
        if not frames:
            raise DataError("No training rows to fit normalization statistics")
        stacked = pd.concat(frames, axis=0)
        center, scale = {}, {}
        for channel in stacked.columns:
            col = stacked[channel].to_numpy(dtype=np.float64)
            if method == 'zscore':
                c, s = float(np.mean(col)), float(np.std(col))
            else:
                c, s = float(np.min(col)), float(np.max(col) - np.min(col))
            if s == 0.0:
                logger.warning("Channel '{}' is constant on training subjects; scale set to 1".format(channel))
                s = 1.0
            center[channel], scale[channel] = c, s
        return cls(method=method, center=center, scale=scale)

    def _apply(self, series, fn):
        frame = series.frame.copy()
        for channel in frame.columns:
            frame[channel] = fn(frame[channel].to_numpy(dtype=np.float64), self.center[channel], self.scale[channel])
        return RawSeries(subject_id=series.subject_id, frame=frame)

    def transform(self, series):
        return self._apply(series, lambda x, c, s: (x - c) / s)

    def inverse_transform(self, series):
        return self._apply(series, lambda x, c, s: x * s + c)

    def to_dict(self):
        return {'method': self.method, 'center': self.center, 'scale': self.scale}

    @classmethod
    def from_dict(cls, payload):
        if payload is None:
            return None
        return cls(method=payload['method'], center=dict(payload['center']), scale=dict(payload['scale']))


@dataclass(frozen=True, eq=False)
class WindowedDataset:
    inputs: np.ndarray
    targets: np.ndarray
    split: np.ndarray
    feature_names: list
    target_names: list
    window: int
    horizon: int
    channels: list
    target_channels: list
    subjects: np.ndarray = None
    normalizer: Normalizer = None

    INPUTS_FILE = 'inputs.csv'
    TARGETS_FILE = 'targets.csv'
    SPLIT_FILE = 'split.csv'
    META_FILE = 'meta.json'

    @property
    def n(self):
        return self.inputs.shape[0]

    def subset(self, label):
        mask = self.split == label
        return self.inputs[mask], self.targets[mask]

    def counts(self):
        return {label: int(np.sum(self.split == label)) for label in SPLITS}

    def output_index(self):
        """ (target channel, horizon step) of every target column. """
        return [(ch, h + 1) for ch in self.target_channels for h in range(self.horizon)]

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        write_frame(os.path.join(directory, self.INPUTS_FILE), pd.DataFrame(self.inputs, columns=self.feature_names))
        write_frame(os.path.join(directory, self.TARGETS_FILE), pd.DataFrame(self.targets, columns=self.target_names))
        split = pd.DataFrame({'split': self.split})
        if self.subjects is not None:
            split.insert(0, 'subject', self.subjects)
        write_frame(os.path.join(directory, self.SPLIT_FILE), split)
        write_json(os.path.join(directory, self.META_FILE), {
            'window': self.window,
            'horizon': self.horizon,
            'channels': self.channels,
            'target_channels': self.target_channels,
            'feature_names': self.feature_names,
            'target_names': self.target_names,
            'normalizer': self.normalizer.to_dict() if self.normalizer is not None else None,
        })

    @classmethod
    def load(cls, directory, hide_targets=()):
        """
        :param hide_targets: splits whose targets are replaced by NaN; callers that must not
            see test labels load with hide_targets=('test',).
        """
        meta_path = os.path.join(directory, cls.META_FILE)
        if not os.path.isfile(meta_path):
            raise DataError("No dataset found in '{}'".format(directory))
        meta = read_json(meta_path)
        inputs = pd.read_csv(os.path.join(directory, cls.INPUTS_FILE), dtype=np.float64).to_numpy()
        targets = pd.read_csv(os.path.join(directory, cls.TARGETS_FILE), dtype=np.float64).to_numpy()
        split_frame = pd.read_csv(os.path.join(directory, cls.SPLIT_FILE), dtype=str, keep_default_na=False)
        split = split_frame['split'].to_numpy()
        subjects = split_frame['subject'].to_numpy() if 'subject' in split_frame else None
        if hide_targets:
            targets = targets.copy()
            targets[np.isin(split, list(hide_targets))] = np.nan
        return cls(inputs=inputs.reshape(-1, len(meta['feature_names'])),
                   targets=targets.reshape(-1, len(meta['target_names'])), split=split,
                   feature_names=meta['feature_names'], target_names=meta['target_names'],
                   window=int(meta['window']), horizon=int(meta['horizon']), channels=meta['channels'],
                   target_channels=meta['target_channels'], subjects=subjects,
                   normalizer=Normalizer.from_dict(meta.get('normalizer')))


def windowize(series, window, horizon, target_channels, assignment=None, normalizer=None):
    """
    Sliding windows per subject: the input holds steps t-W+1..t of every channel flattened
    channel-major, the target holds target_channels at t+1..t+H (also channel-major).

    :param assignment: subject id -> split label; every subject is 'train' when None.
    """
    if window < 1 or horizon < 1:
        raise ConfigError("window and horizon must be at least 1, got W={} H={}".format(window, horizon))
    series = list(series)
    long_enough = [s for s in series if len(s) >= window + horizon]
    reference = long_enough[0] if long_enough else (series[0] if series else None)
    channels = reference.channel_names if reference is not None else []
    missing = [c for c in target_channels if c not in channels]
    if missing:
        raise SchemaError("Target channels {} are not among {}".format(missing, channels), channels=missing)

    inputs, targets, labels, subjects = [], [], [], []
    for s in series:
        if len(s) < window + horizon:
            logger.warning("Subject '{}' has {} steps, fewer than W+H={}; skipped".format(
                s.subject_id, len(s), window + horizon))
            continue
        if s.channel_names != channels:
            raise SchemaError("Subject '{}' has channels {}, expected {}".format(
                s.subject_id, s.channel_names, channels), channels=s.channel_names)
        values = s.frame.to_numpy(dtype=np.float64)
        target_values = s.frame[list(target_channels)].to_numpy(dtype=np.float64)
        n_anchor = len(s) - window - horizon + 1
        # (n_windows, C, W) -> channel-major rows
        x = sliding_window_view(values, window, axis=0)[:n_anchor]
        y = sliding_window_view(target_values[window:], horizon, axis=0)[:n_anchor]
        inputs.append(x.reshape(n_anchor, -1))
        targets.append(y.reshape(n_anchor, -1))
        label = assignment.get(s.subject_id, 'train') if assignment is not None else 'train'
        labels.extend([label] * n_anchor)
        subjects.extend([s.subject_id] * n_anchor)

    if not inputs:
        raise DataError("No subject is long enough for W={} H={}".format(window, horizon))
    x_all = np.vstack(inputs)
    y_all = np.vstack(targets)
    if np.isnan(x_all).any() or np.isnan(y_all).any():
        raise DataError("Windows contain missing values; preprocess with drop_missing first")
    feature_names = ['{}@t-{}'.format(c, window - 1 - s) for c in channels for s in range(window)]
    target_names = ['{}@t+{}'.format(c, h + 1) for c in target_channels for h in range(horizon)]
    return WindowedDataset(inputs=x_all, targets=y_all, split=np.array(labels, dtype=object),
                           feature_names=feature_names, target_names=target_names, window=int(window),
                           horizon=int(horizon), channels=list(channels), target_channels=list(target_channels),
                           subjects=np.array(subjects, dtype=object), normalizer=normalizer)


def _split_sizes(n, fractions):
    raw = np.asarray(fractions, dtype=np.float64) * n
    sizes = np.floor(raw + 1e-9).astype(int)
    remainder = n - sizes.sum()
    # largest fractional parts first, earlier splits on ties
    for i in sorted(range(len(raw)), key=lambda j: (-(raw[j] - sizes[j]), j))[:remainder]:
        sizes[i] += 1
    for i in range(len(sizes)):
        if fractions[i] > 0 and sizes[i] == 0:
            donor = int(np.argmax(sizes))
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes


def split_by_subject(subject_ids, fractions=(0.7, 0.1, 0.2), seed=0):
    """
    Seeded shuffle of lexicographically sorted subject ids, cut by the given fractions.

    :return: dict subject id -> 'train' | 'validation' | 'test'
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("Split fractions must be 3 nonnegative values summing to 1, got {}".format(fractions))
    ids = sorted(set(s.subject_id if isinstance(s, RawSeries) else str(s) for s in subject_ids))
    needed = sum(1 for f in fractions if f > 0)
    if len(ids) < needed:
        raise DataError("{} subjects cannot fill {} nonempty splits".format(len(ids), needed))
    order = np.random.default_rng(seed).permutation(len(ids))
    sizes = _split_sizes(len(ids), fractions)
    assignment, start = {}, 0
    for label, size in zip(SPLITS, sizes):
        for i in order[start:start + size]:
            assignment[ids[i]] = label
        start += size
    return assignment


def prepare_dataset(series, cfg, window, horizon, target_channels, fractions=(0.7, 0.1, 0.2), seed=0,
                    assignment=None):
    """
    The full recipe: clean and resample every subject, split by subject, fit normalization
    on training subjects, normalize, then windowize with split labels.
    """
    cfg.validate()
    cleaned = [preprocess(s, cfg) for s in series]
    if assignment is None:
        assignment = split_by_subject(cleaned, fractions, seed)
    normalizer = None
    if cfg.normalization is not None:
        train = [s for s in cleaned if assignment.get(s.subject_id) == 'train']
        normalizer = Normalizer.fit(train, cfg.normalization)
        cleaned = [normalizer.transform(s) for s in cleaned]
    return windowize(cleaned, window, horizon, target_channels, assignment=assignment, normalizer=normalizer)


@dataclass(frozen=True)
class SyntheticSpec:
    n_subjects: int = 20
    steps_per_subject: int = 200
    n_channels: int = 3
    noise_scale_fn: str = 'level'
    shift_magnitude: float = 0.0
    seed: int = 0
    fractions: tuple = (0.7, 0.1, 0.2)
    period_seconds: int = 60

    def validate(self):
        if self.n_subjects < 1 or self.steps_per_subject < 1 or self.n_channels < 1:
            raise ConfigError("Synthetic counts must be positive")
        if self.shift_magnitude < 0:
            raise ConfigError("shift_magnitude must be nonnegative, got {}".format(self.shift_magnitude))
        if self.noise_scale_fn not in NOISE_PROFILES:
            raise ConfigError("noise_scale_fn must be one of {}".format(NOISE_PROFILES))
        if self.n_subjects < sum(1 for f in self.fractions if f > 0):
            raise ConfigError("{} subjects cannot fill the splits {}".format(self.n_subjects, self.fractions))
        return self


def _noise_scale(profile, latent, steps):
    if profile == 'constant':
        return np.full_like(latent, 0.1)
    if profile == 'level':
        return 0.05 + 0.25 * np.abs(latent)
    phase = (1.0 + np.sin(2.0 * np.pi * steps / 50.0)) / 2.0
    return (0.05 + 0.3 * phase)[:, np.newaxis] * np.ones_like(latent)


def synthetic_assignment(spec):
    """ Split of the synthetic subjects; the same seed drives the split and the signals. """
    ids = ['s{:04d}'.format(i) for i in range(spec.n_subjects)]
    return split_by_subject(ids, spec.fractions, spec.seed)


def generate_synthetic(spec):
    """
    Smooth latent oscillations per channel plus heteroscedastic noise; subjects assigned
    to the test split carry an additive shift of shift_magnitude on every channel.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    assignment = synthetic_assignment(spec)
    ids = sorted(assignment)
    steps = np.arange(spec.steps_per_subject, dtype=np.float64)
    names = ['ch{}'.format(c) for c in range(spec.n_channels)]
    out = []
    for subject_id in ids:
        periods = rng.uniform(20.0, 60.0, size=spec.n_channels)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.n_channels)
        amplitude = rng.uniform(0.5, 1.5, size=spec.n_channels)
        latent = amplitude * np.sin(2.0 * np.pi * steps[:, np.newaxis] / periods + phases)
        noise = rng.standard_normal(latent.shape) * _noise_scale(spec.noise_scale_fn, latent, steps)
        values = latent + noise
        if assignment[subject_id] == 'test':
            values = values + spec.shift_magnitude
        index = pd.to_datetime((steps * spec.period_seconds).astype(np.int64), unit='s')
        out.append(RawSeries(subject_id=subject_id, frame=pd.DataFrame(values, index=index, columns=names)))
    return out


def write_csv(path, series):
    """ Inverse of load_csv: long table with integer epoch-second timestamps. """
    frames = []
    for s in series:
        frame = s.frame.copy()
        frame.insert(0, TIMESTAMP_COLUMN, s.frame.index.asi8 // 10 ** 9)
        frame.insert(0, SUBJECT_COLUMN, s.subject_id)
        frames.append(frame)
    table = pd.concat(frames, axis=0) if frames else pd.DataFrame(columns=[SUBJECT_COLUMN, TIMESTAMP_COLUMN])
    write_frame(path, table)
