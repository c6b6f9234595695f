"""Experiment configuration: YAML documents merged over documented defaults."""
import copy

import yaml

from fedpmt.exceptions import ConfigError
from fedpmt.model import __implemented_models__
from fedpmt.strategies import __implemented_strategies__

DEFAULTS = {
    'dataset': {
        'kind': 'synthetic',          # synthetic | idx
        'num_classes': 10,
        'dim': 20,
        'samples_per_class': 600,
        'class_separation': 3.0,
        'clusters_per_class': 1,      # Gaussian means per class
        'feature_shape': None,        # e.g. [3, 32, 32] for the CIFAR-style CNN
        'test_fraction': 0.2,         # held-out share of synthetic data
        'train_images': None,
        'train_labels': None,
        'test_images': None,
        'test_labels': None,
    },
    'partition': {
        'kind': 'iid',                # iid | noniid2
        'per_device': 40,
    },
    'model': {
        'name': 'fcnn',
        'layer_sizes': [20, 32, 32, 16, 10],
    },
    'strategy': {
        'name': 'fedpmt',             # fedpmt | fedavg | feddrop
        'option': 1,                  # 1 = server-assigned, 2 = device-chosen
        'num_widths': 4,
        'layer_counts': None,
        'keep_rates': None,           # feddrop: per width, FLOP-matched when None
    },
    'devices': {
        'num_devices': 100,
        'per_round': 8,
        'kappa_tiers': [0.2, 0.25, 0.5, 1.0],
        'even_tiers': True,
    },
    'training': {
        'rounds': 50,
        'local_steps': None,          # tau; E * ceil(|D_k| / batch) when None
        'epochs': 1,
        'batch_size': 12,
        'step_size': 0.01,
        'step_decay': 0.0,            # eta_t = step_size / (1 + step_decay * (t - 1))
        'eval_every': 1,
    },
    'timing': {
        'base_full_time': 10.0,
        'deadline': None,
        'complexity_ratios': None,    # per width; from the cost model when None
        'time_budget': None,
        'conv_scaling': 'per_sample',
    },
    'aggregation': {
        'weight_by_size': False,
    },
    'seed': 0,
    'n_jobs': 1,
    'targets': [0.5, 0.8],
}


def _merge(defaults, overrides, path=''):
    merged = copy.deepcopy(defaults)
    for key, value in (overrides or {}).items():
        dotted = path + str(key)
        if key not in defaults:
            raise ConfigError('unknown configuration key: {}'.format(dotted))
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError('{} must be a mapping'.format(dotted))
            merged[key] = _merge(defaults[key], value, dotted + '.')
        else:
            merged[key] = value
    return merged


class ExperimentConfig(object):
    """Validated experiment configuration.

    Every section of ``DEFAULTS`` is exposed as a dict attribute
    (``config.training['rounds']``); ``seed``, ``n_jobs`` and ``targets`` as
    plain attributes.
    """

    def __init__(self, values):
        self._values = values
        for key, value in values.items():
            setattr(self, key, value)
        self.validate()

    @classmethod
    def from_dict(cls, overrides):
        return cls(_merge(DEFAULTS, overrides))

    @classmethod
    def from_yaml(cls, path):
        with open(path, 'r') as f:
            document = yaml.safe_load(f)
        if document is not None and not isinstance(document, dict):
            raise ConfigError('{} does not hold a mapping'.format(path))
        return cls.from_dict(document)

    def replace(self, overrides):
        """Copy with ``overrides`` (same nesting as the YAML file) applied."""
        return ExperimentConfig(_merge(self._values, overrides))

    def to_dict(self):
        return copy.deepcopy(self._values)

    def validate(self):
        d, p, m = self.dataset, self.partition, self.model
        s, dev, tr, tm = self.strategy, self.devices, self.training, self.timing
        if d['kind'] not in ('synthetic', 'idx'):
            raise ConfigError('dataset.kind must be synthetic or idx')
        if d['kind'] == 'idx' and not (d['train_images'] and d['train_labels']
                                       and d['test_images'] and d['test_labels']):
            raise ConfigError('dataset.kind idx needs train/test images and labels')
        if d['clusters_per_class'] < 1:
            raise ConfigError('dataset.clusters_per_class must be positive')
        if p['kind'] not in ('iid', 'noniid2'):
            raise ConfigError('partition.kind must be iid or noniid2')
        if m['name'] not in __implemented_models__:
            raise ConfigError('model.name must be in {}'.format(__implemented_models__))
        if s['name'] not in __implemented_strategies__:
            raise ConfigError('strategy.name must be in {}'.format(__implemented_strategies__))
        if s['option'] not in (1, 2):
            raise ConfigError('strategy.option must be 1 or 2')
        if not 1 <= dev['per_round'] <= dev['num_devices']:
            raise ConfigError('devices.per_round must be in [1, num_devices]')
        if not dev['kappa_tiers'] or min(dev['kappa_tiers']) <= 0:
            raise ConfigError('devices.kappa_tiers must be positive')
        if tr['rounds'] < 1:
            raise ConfigError('training.rounds must be positive')
        if tr['eval_every'] < 1:
            raise ConfigError('training.eval_every must be positive')
        if tr['local_steps'] is not None and tr['local_steps'] < 1:
            raise ConfigError('training.local_steps must be positive')
        if tm['base_full_time'] <= 0:
            raise ConfigError('timing.base_full_time must be positive')
        if tm['deadline'] is not None and tm['deadline'] <= 0:
            raise ConfigError('timing.deadline must be positive')
        ratios = tm['complexity_ratios']
        if ratios is not None and len(ratios) != s['num_widths']:
            raise ConfigError('timing.complexity_ratios needs one ratio per width')
        if s['keep_rates'] is not None and len(s['keep_rates']) != s['num_widths']:
            raise ConfigError('strategy.keep_rates needs one rate per width')
        if m['name'] == 'fcnn':
            n_layers = len(m['layer_sizes']) - 1
        else:
            n_layers = {'fcnn_mnist': 5, 'cnn_mnist': 4, 'cnn_cifar10': 5}[m['name']]
        if not 1 <= s['num_widths'] <= n_layers:
            raise ConfigError('strategy.num_widths must be in [1, {}]'.format(n_layers))

    def __repr__(self):
        return 'ExperimentConfig({})'.format(self._values)


def load_config(path=None, overrides=None):
    """Load ``path`` (defaults only when None) and apply ``overrides``."""
    config = ExperimentConfig.from_dict({}) if path is None else ExperimentConfig.from_yaml(path)
    return config.replace(overrides) if overrides else config


def parse_override(text):
    """Turn ``section.key=value`` into a nested dict (value parsed as YAML)."""
    if '=' not in text:
        raise ConfigError('overrides look like section.key=value. Found: {}.'.format(text))
    dotted, raw = text.split('=', 1)
    keys = dotted.strip().split('.')
    value = yaml.safe_load(raw)
    for key in reversed(keys):
        value = {key: value}
    return value
