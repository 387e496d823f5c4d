"""
Run configuration: one JSON file describing data, preprocessing, model, intervals and evaluation.
"""
import copy
import json
import os

from . import logger
from .conformal import NORMALIZED_CP, SPLIT_CP, check_alpha
from .copula_pi import COPULA
from .dataio import PreprocessConfig, SyntheticSpec, mimic_like, physionet_like
from .exceptions import ConfigError
from .knn_pi import KNN
from .neural import ModelShape, TrainConfig

METHODS = (SPLIT_CP, NORMALIZED_CP, COPULA, KNN)
SOURCES = ('csv', 'synthetic')
RECIPES = ('mimic', 'physionet')


class RunConfig(object):
    RUN_CONFIG_FILE = "ruepi.json"
    DEFAULT_CONFIG_FILE = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'config', 'run_config.json')

    """A run configuration is the packaged default overlaid with the sections of the user's
       file. Keys absent from the user's file keep their default value, so a file may hold only
       the settings that differ. Command-line flags are applied last through with_overrides().
    """
    def __init__(self, config):
        self._config = config

    @staticmethod
    def load(config_file_path=RUN_CONFIG_FILE):
        """
        Parse the run config file, falling back to the packaged defaults if it is missing.
        """
        with open(RunConfig.DEFAULT_CONFIG_FILE, "r") as read_file:
            config = json.load(read_file)

        if config_file_path is None or not os.path.isfile(config_file_path):
            msg = "'{}' is not found, using the packaged default run configuration".format(config_file_path)
            logger.warning(msg)
        else:
            try:
                with open(config_file_path, "r") as read_file:
                    user = json.load(read_file)
            except ValueError as e:
                msg = "Could not parse run config file '{}': {}".format(config_file_path, e)
                logger.exception(msg)
                raise ConfigError(msg)
            config = RunConfig._merge(config, user)
        return RunConfig(config).validate()

    @staticmethod
    def _merge(base, override):
        merged = copy.deepcopy(base)
        for key, value in override.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict) and key != 'value_ceilings':
                merged[key] = RunConfig._merge(merged[key], value)
            else:
                merged[key] = value
        return merged

    @staticmethod
    def from_dict(config):
        with open(RunConfig.DEFAULT_CONFIG_FILE, "r") as read_file:
            base = json.load(read_file)
        return RunConfig(RunConfig._merge(base, config)).validate()

    def to_dict(self):
        return copy.deepcopy(self._config)

    def with_overrides(self, seed=None, alpha=None, methods=None, k=None, out=None):
        config = self.to_dict()
        if seed is not None:
            config['seeds'] = [int(seed)]
        if alpha is not None:
            config['intervals']['alpha'] = float(alpha)
        if methods is not None:
            config['intervals']['methods'] = list(methods)
        if k is not None:
            config['intervals']['k'] = int(k)
        if out is not None:
            config['output_dir'] = out
        return RunConfig(config).validate()

    def validate(self):
        cfg = self._config
        check_alpha(cfg['intervals']['alpha'])
        methods = cfg['intervals']['methods']
        if not methods:
            raise ConfigError("At least one interval method must be configured")
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            raise ConfigError("Unknown interval methods {}; expected a subset of {}".format(unknown, METHODS))
        if cfg['window']['W'] < 1 or cfg['window']['H'] < 1:
            raise ConfigError("Window W and horizon H must be at least 1")
        if not cfg['window']['target_channels']:
            raise ConfigError("At least one target channel is required")
        if not cfg['seeds']:
            raise ConfigError("At least one seed is required")
        k = cfg['intervals'].get('k')
        if k is not None and k < 1:
            raise ConfigError("k override must be at least 1, got {}".format(k))

        data = cfg['data']
        if data['source'] not in SOURCES:
            raise ConfigError("data.source must be one of {}".format(SOURCES))
        if data['source'] == 'csv':
            if not data.get('csv_path'):
                raise ConfigError("data.csv_path is required for a csv source")
            channels = list(data.get('schema') or [])
        else:
            channels = ['ch{}'.format(c) for c in range(data['synthetic']['n_channels'])]
        missing = [c for c in cfg['window']['target_channels'] if c not in channels]
        if missing:
            raise ConfigError("Target channels {} are not in the schema {}".format(missing, channels))
        if cfg['preprocess'].get('recipe') not in (None,) + RECIPES:
            raise ConfigError("preprocess.recipe must be one of {} or null".format(RECIPES))

        self.get_preprocess_config().validate()
        self.get_train_config(self.seeds[0]).validate()
        self.get_model_shape().validate()
        if data['source'] == 'synthetic':
            self.get_synthetic_spec(self.seeds[0]).validate()
        return self

    @property
    def seeds(self):
        return [int(s) for s in self._config['seeds']]

    @property
    def output_dir(self):
        return self._config['output_dir']

    @property
    def alpha(self):
        return float(self._config['intervals']['alpha'])

    @property
    def methods(self):
        return list(self._config['intervals']['methods'])

    @property
    def source(self):
        return self._config['data']['source']

    @property
    def csv_path(self):
        return self._config['data']['csv_path']

    @property
    def schema(self):
        return list(self._config['data']['schema'])

    @property
    def window(self):
        return int(self._config['window']['W'])

    @property
    def horizon(self):
        return int(self._config['window']['H'])

    @property
    def target_channels(self):
        return list(self._config['window']['target_channels'])

    @property
    def fractions(self):
        return tuple(float(f) for f in self._config['split']['fractions'])

    def section(self, name):
        return copy.deepcopy(self._config[name])

    def get_preprocess_config(self):
        p = self._config['preprocess']
        recipe = p.get('recipe')
        if recipe == 'mimic':
            return mimic_like(pressure_channels=p.get('floor_channels') or ())
        if recipe == 'physionet':
            return physionet_like(pressure_channels=p.get('floor_channels') or (),
                                  volume_channels=list(p.get('value_ceilings') or {}))
        floor_channels = p.get('floor_channels')
        return PreprocessConfig(value_floor=p.get('value_floor'), floor_inclusive=bool(p.get('floor_inclusive', True)),
                                floor_channels=tuple(floor_channels) if floor_channels is not None else None,
                                value_ceilings={k: float(v) for k, v in (p.get('value_ceilings') or {}).items()},
                                resample_period=p.get('resample_period'),
                                resample_stats=tuple(p.get('resample_stats') or ('mean',)),
                                normalization=p.get('normalization'), drop_missing=bool(p.get('drop_missing', True)))

    def get_train_config(self, seed):
        t = self._config['train']
        return TrainConfig(learning_rate=float(t['learning_rate']), max_epochs=int(t['max_epochs']),
                           batch_size=int(t['batch_size']), patience=int(t['patience']),
                           weight_decay=float(t['weight_decay']), seed=int(seed))

    def get_model_shape(self):
        m = self._config['model']
        return ModelShape(encoder_hidden=tuple(m['encoder_hidden']), latent_width=int(m['latent_width']),
                          head_hidden=tuple(m['head_hidden']), decoder_hidden=tuple(m['decoder_hidden']),
                          activation=m['activation'])

    def get_synthetic_spec(self, seed):
        s = self._config['data']['synthetic']
        return SyntheticSpec(n_subjects=int(s['n_subjects']), steps_per_subject=int(s['steps_per_subject']),
                             n_channels=int(s['n_channels']), noise_scale_fn=s['noise_scale_fn'],
                             shift_magnitude=float(s['shift_magnitude']), seed=int(seed), fractions=self.fractions,
                             period_seconds=int(s.get('period_seconds', 60)))
