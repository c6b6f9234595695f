"""Round loop: sampling, width assignment, local training, deadline, aggregation."""
from __future__ import division

import json
import logging
from collections import Counter, namedtuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from fedpmt.cost_model import (DeviceProfile, apply_deadline, complexity_ratios,
                               model_cost, round_time)
from fedpmt.data import (generate_synthetic, load_idx, partition_iid,
                         partition_noniid_2class, train_test_split)
from fedpmt.exceptions import ConfigError, IndivisibleSelectionError
from fedpmt.masking import build_width_menu, local_steps
from fedpmt.model import build_model, evaluate, init_params
from fedpmt.strategies import (DeviceCapability, feddrop_match_rate, feddrop_round,
                               fedavg_round, fedpmt_assign_option1,
                               fedpmt_assign_option2, fedpmt_round, submodel_flops)

logger = logging.getLogger(__name__)

RoundRecord = namedtuple('RoundRecord',
                         ['round', 'selected', 'widths', 'device_seconds',
                          'round_seconds', 'cumulative_seconds', 'included',
                          'accuracy', 'loss', 'flagged'])

METRICS_COLUMNS = ['round', 'cumulative_seconds', 'round_seconds', 'num_selected',
                   'num_included', 'accuracy', 'loss']


def device_seed(seed, round_index, device_id):
    """Seed of a device's local work in a given round."""
    return [int(seed), int(round_index), int(device_id)]


def assign_tiers(num_devices, kappa_tiers):
    """Spread the compute tiers evenly: device k gets ``kappa_tiers[k % m]``."""
    return dict((k, float(kappa_tiers[k % len(kappa_tiers)])) for k in range(num_devices))


def sample_devices(num_devices, per_round, round_index, seed, device_tiers=None):
    """Sorted ids of the devices selected in a round.

    Uniform without replacement, deterministic in (seed, round). With
    ``device_tiers`` (device id -> kappa) selection is stratified so that
    every tier contributes per_round / num_tiers devices.
    """
    if not 1 <= per_round <= num_devices:
        raise ValueError('per_round must be in [1, {}]. Found: {}.'.format(
            num_devices, per_round))
    rng = np.random.RandomState([int(seed), int(round_index)])
    if device_tiers is None:
        return sorted(int(k) for k in rng.choice(num_devices, per_round, replace=False))
    levels = sorted(set(device_tiers.values()))
    if per_round % len(levels):
        raise IndivisibleSelectionError(per_round, len(levels))
    share = per_round // len(levels)
    selected = []
    for level in levels:
        members = sorted(k for k, v in device_tiers.items() if v == level)
        if share > len(members):
            raise ValueError('tier {} has {} devices, {} requested'.format(
                level, len(members), share))
        selected.extend(int(members[i]) for i in rng.choice(len(members), share,
                                                            replace=False))
    return sorted(selected)


def tier_balance(selected, device_tiers, even=False):
    """Selected devices per tier, ordered by tier level.

    In even mode the selection must split evenly over the tiers.
    """
    levels = sorted(set(device_tiers.values()))
    if even and len(selected) % len(levels):
        raise IndivisibleSelectionError(len(selected), len(levels))
    counts = Counter(device_tiers[k] for k in selected)
    return dict((level, counts.get(level, 0)) for level in levels)


def time_to_accuracy(records, target):
    """Cumulative seconds at the first evaluation reaching ``target`` (None if never)."""
    for r in records:
        if r.accuracy is not None and r.accuracy >= target:
            return r.cumulative_seconds
    return None


def _load_datasets(config, spec):
    d, seed = config.dataset, config.seed
    if d['kind'] == 'synthetic':
        full = generate_synthetic(d['num_classes'], d['dim'], d['samples_per_class'],
                                  d['class_separation'], seed, d['feature_shape'],
                                  d['clusters_per_class'])
        train, test = train_test_split(full, d['test_fraction'], random_state=seed)
    else:
        train = load_idx(d['train_images'], d['train_labels'])
        test = load_idx(d['test_images'], d['test_labels'])
    size = int(np.prod(spec.input_shape))
    if int(np.prod(train.feature_shape)) != size:
        raise ConfigError('dataset samples have shape {}, model expects {}'.format(
            train.feature_shape, spec.input_shape))
    return train.reshape(spec.input_shape), test.reshape(spec.input_shape)


class Experiment(object):
    """Everything a run needs, built once from an ExperimentConfig."""

    def __init__(self, config):
        self.config = config
        m, s, dev, tr, tm = (config.model, config.strategy, config.devices,
                             config.training, config.timing)
        self.spec = build_model(m['name'], layer_sizes=m['layer_sizes'])
        self.train, self.test = _load_datasets(config, self.spec)
        partition = config.partition
        split = partition_iid if partition['kind'] == 'iid' else partition_noniid_2class
        self.partition = split(self.train, dev['num_devices'], partition['per_device'],
                               config.seed)
        self.data = self.partition.device_datasets(self.train)
        self.menu = build_width_menu(self.spec.trainable_count, s['num_widths'],
                                     s['layer_counts'])
        self.batch_size = tr['batch_size']
        self.cost_kwargs = {'conv_scaling': tm['conv_scaling']}
        if tm['complexity_ratios'] is not None:
            self.ratios = [float(r) for r in tm['complexity_ratios']]
        else:
            self.ratios = complexity_ratios(self.spec, self.menu, self.batch_size,
                                            **self.cost_kwargs)
        self.tiers = assign_tiers(dev['num_devices'], dev['kappa_tiers'])
        self.profiles = dict((k, DeviceProfile(k, self.tiers[k], len(self.data[k]),
                                               tr['epochs']))
                             for k in range(dev['num_devices']))
        if tr['local_steps'] is not None:
            self.num_steps = int(tr['local_steps'])
        else:
            self.num_steps = local_steps(partition['per_device'], self.batch_size,
                                         tr['epochs'])
        if s['name'] == 'feddrop':
            self.keep_rates, self.drop_ratios = self._feddrop_rates()

    def _feddrop_rates(self):
        cost = model_cost(self.spec, self.batch_size, **self.cost_kwargs)
        rates = self.config.strategy['keep_rates']
        if rates is None:
            rates = [feddrop_match_rate(cost.total(mask), self.spec, self.batch_size,
                                        **self.cost_kwargs)
                     for mask in self.menu.masks]
        ratios = [submodel_flops(self.spec, r, self.batch_size, **self.cost_kwargs)
                  / cost.full_total for r in rates]
        logger.info('FedDrop keep rates per width: %s', rates)
        return [float(r) for r in rates], ratios

    def step_size(self, t):
        """eta_t for round t >= 1; round 1 uses the configured step size."""
        tr = self.config.training
        return tr['step_size'] / (1. + tr['step_decay'] * (t - 1))

    def assign(self, selected):
        s, tm = self.config.strategy, self.config.timing
        levels = self.config.devices['kappa_tiers']
        if s['name'] == 'fedavg':
            return dict((k, self.menu.num_widths) for k in selected)
        if s['option'] == 1:
            assignment = fedpmt_assign_option1(
                [self.profiles[k] for k in selected], self.menu, self.ratios,
                tiers=levels, time_budget=tm['time_budget'],
                base_full_time=tm['base_full_time'])
        else:
            caps = {}
            for k in selected:
                kappa = self.profiles[k].kappa
                cap = None
                if tm['time_budget'] is not None:
                    cap = tm['time_budget'] * kappa / tm['base_full_time']
                caps[k] = DeviceCapability(kappa, cap)
            assignment = fedpmt_assign_option2(caps, self.menu, self.ratios, levels)
        return assignment.widths

    def train_round(self, params, t, included, widths):
        cfg = self.config
        name = cfg.strategy['name']
        seeds = dict((k, device_seed(cfg.seed, t, k)) for k in included)
        eta = self.step_size(t)
        if name == 'fedavg':
            params, _ = fedavg_round(self.spec, params, self.data, included, eta,
                                     self.num_steps, self.batch_size, seeds, cfg.n_jobs,
                                     cfg.aggregation['weight_by_size'])
        elif name == 'fedpmt':
            masks = dict((k, self.menu.mask(widths[k])) for k in included)
            params, _ = fedpmt_round(self.spec, params, self.data, masks, eta,
                                     self.num_steps, self.batch_size, seeds, cfg.n_jobs,
                                     cfg.aggregation['weight_by_size'])
        else:
            rates = dict((k, self.keep_rates[widths[k] - 1]) for k in included)
            params, _ = feddrop_round(self.spec, params, self.data, rates, eta,
                                      self.num_steps, self.batch_size, seeds, cfg.n_jobs)
        return params


def run_experiment(config, progress=False):
    """Run every round of ``config``.

    Returns:
    --------------
    records: list of RoundRecord
        One per round.

    params: LayerParams
        Final global model.
    """
    exp = Experiment(config)
    dev, tr, tm = config.devices, config.training, config.timing
    stratify = exp.tiers if dev['even_tiers'] else None
    ratios = exp.drop_ratios if config.strategy['name'] == 'feddrop' else exp.ratios
    params = init_params(exp.spec, config.seed)
    logger.info('%s on %s: %d rounds, %d/%d devices per round, tau=%d',
                config.strategy['name'], config.model['name'], tr['rounds'],
                dev['per_round'], dev['num_devices'], exp.num_steps)

    records, cumulative = [], 0.
    for t in tqdm(range(1, tr['rounds'] + 1), leave=False, disable=not progress):
        selected = sample_devices(dev['num_devices'], dev['per_round'], t, config.seed,
                                  stratify)
        widths = exp.assign(selected)
        times, _ = round_time(widths, ratios, exp.profiles, tm['base_full_time'])
        cut = apply_deadline(times, tm['deadline'])
        if cut.flagged:
            logger.debug('round %d: every device missed the deadline', t)
        else:
            if len(cut.included) < len(selected):
                logger.debug('round %d: %d of %d devices within the deadline', t,
                             len(cut.included), len(selected))
            params = exp.train_round(params, t, cut.included, widths)
        cumulative += cut.duration

        accuracy = loss = None
        if t % tr['eval_every'] == 0 or t == tr['rounds']:
            accuracy, loss = evaluate(exp.spec, params, exp.test)
        records.append(RoundRecord(t, selected, widths, times, cut.duration,
                                   cumulative, cut.included, accuracy, loss,
                                   cut.flagged))
    logger.info('finished after %.1f simulated seconds, accuracy %s', cumulative,
                records[-1].accuracy)
    return records, params


def records_to_frame(records):
    """Metrics table, one row per round."""
    rows = [{'round': r.round,
             'cumulative_seconds': float(r.cumulative_seconds),
             'round_seconds': float(r.round_seconds),
             'num_selected': len(r.selected),
             'num_included': len(r.included),
             'accuracy': np.nan if r.accuracy is None else float(r.accuracy),
             'loss': np.nan if r.loss is None else float(r.loss)}
            for r in records]
    return pd.DataFrame(rows, columns=METRICS_COLUMNS)


def write_metrics(records, path):
    records_to_frame(records).to_csv(path, index=False, float_format='%.6f', na_rep='')


def summarize(records, config):
    evaluated = [r for r in records if r.accuracy is not None]
    last = evaluated[-1] if evaluated else None
    return {'seed': config.seed,
            'strategy': config.strategy['name'],
            'final_accuracy': last.accuracy if last else None,
            'final_loss': last.loss if last else None,
            'total_seconds': records[-1].cumulative_seconds if records else 0.,
            'flagged_rounds': sum(r.flagged for r in records),
            'time_to_accuracy': dict(('{:g}'.format(target),
                                      time_to_accuracy(records, target))
                                     for target in config.targets),
            'config': config.to_dict()}


def write_summary(records, config, path):
    with open(path, 'w') as f:
        json.dump(summarize(records, config), f, indent=2, sort_keys=True)
