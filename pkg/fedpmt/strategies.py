"""FedPMT width assignment (Options I and II), FedAvg and FedDrop rounds."""
from __future__ import division

import logging
import warnings
from collections import namedtuple

import numpy as np
from joblib import Parallel, delayed

from fedpmt.aggregation import aggregate, compute_weights, weighted_block_sum
from fedpmt.cost_model import device_time, model_cost
from fedpmt.exceptions import (InvalidKeepRateError, PlanMismatchError,
                               TargetOutOfRangeError)
from fedpmt.layers import Conv2d, Dense
from fedpmt.masking import BpMask, local_update
from fedpmt.model import LayerParams, ModelSpec

logger = logging.getLogger(__name__)

__implemented_strategies__ = ['fedpmt', 'fedavg', 'feddrop']

SERVER_ASSIGNED = 'server-assigned'
DEVICE_CHOSEN = 'device-chosen'

# Device side view of Option II: its own tier and an optional cap on the
# complexity ratio it can afford per round.
DeviceCapability = namedtuple('DeviceCapability', ['kappa', 'max_ratio'])
DeviceCapability.__new__.__defaults__ = (None,)


class WidthAssignment(object):
    """Width (1-based) of every selected device and who chose it."""

    def __init__(self, widths, provenance, flagged=()):
        self.widths = dict(widths)
        self.provenance = provenance
        self.flagged = frozenset(flagged)

    def masks(self, menu):
        """device id -> BpMask, ascending device ids."""
        return dict((k, menu.mask(w)) for k, w in sorted(self.widths.items()))

    def __eq__(self, other):
        return (isinstance(other, WidthAssignment) and self.widths == other.widths
                and self.flagged == other.flagged)

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        return 'WidthAssignment({}, {}, flagged={})'.format(
            self.widths, self.provenance, sorted(self.flagged))


def choose_width(kappa, tiers, ratios, max_ratio=None):
    """Width taken by a device of compute level ``kappa``.

    Tiers are ranked by kappa: the fastest tier trains the full model and
    every slower tier one width less, never below width 1. A ``max_ratio``
    cap then demotes the device to the widest affordable width.

    Returns:
    --------------
    width: int
        1-based width.

    flagged: bool
        True when even width 1 exceeds ``max_ratio``.
    """
    levels = sorted(set(float(t) for t in tiers))
    if float(kappa) not in levels:
        raise ValueError('kappa {} is not one of the tiers {}'.format(kappa, levels))
    num_widths = len(ratios)
    behind = len(levels) - 1 - levels.index(float(kappa))
    width = max(1, num_widths - behind)
    if max_ratio is None:
        return width, False
    while width > 1 and ratios[width - 1] > max_ratio:
        width -= 1
    return width, ratios[width - 1] > max_ratio


def _check_ratios(menu, ratios):
    if len(ratios) != menu.num_widths:
        raise ValueError('{} complexity ratios given for {} widths'.format(
            len(ratios), menu.num_widths))


def fedpmt_assign_option1(profiles, menu, ratios, tiers=None, time_budget=None,
                          base_full_time=1.):
    """Server-initiated model splitting.

    Parameters:
    --------------
    profiles: list of DeviceProfile
        The selected devices, whose kappa the server knows.

    menu: WidthMenu
        The width menu.

    ratios: list of float
        Complexity ratio of each width.

    tiers: list of float or None
        All compute levels in the federation; defaults to the levels of
        ``profiles``.

    time_budget: float or None
        Optional per-round compute budget in seconds; devices whose tier
        width would exceed it are demoted.

    base_full_time: float
        Seconds a kappa=1 device needs for the full model.

    Returns:
    --------------
    assignment: WidthAssignment
    """
    _check_ratios(menu, ratios)
    if tiers is None:
        tiers = [p.kappa for p in profiles]
    widths, flagged = {}, []
    for p in profiles:
        max_ratio = None
        if time_budget is not None:
            max_ratio = time_budget * p.kappa / base_full_time
        widths[p.device_id], flag = choose_width(p.kappa, tiers, ratios, max_ratio)
        if flag:
            flagged.append(p.device_id)
    if flagged:
        warnings.warn('devices {} cannot meet the time budget even at width 1'
                      .format(sorted(flagged)))
    return WidthAssignment(widths, SERVER_ASSIGNED, flagged)


def fedpmt_assign_option2(device_caps, menu, ratios, tiers):
    """Device-initiated model splitting.

    Every device receives the menu, the ratios and the tier levels and picks
    its width with the same rule the server uses in Option I; the chosen mask
    travels back with its update.

    Parameters:
    --------------
    device_caps: dict
        device id -> DeviceCapability.
    """
    _check_ratios(menu, ratios)
    widths, flagged = {}, []
    for k, cap in sorted(device_caps.items()):
        widths[k], flag = choose_width(cap.kappa, tiers, ratios, cap.max_ratio)
        if flag:
            flagged.append(k)
    if flagged:
        warnings.warn('devices {} cannot afford width 1'.format(sorted(flagged)))
    return WidthAssignment(widths, DEVICE_CHOSEN, flagged)


def _run_local_updates(spec, params_of, data, masks, step_size, num_steps,
                       batch_size, seeds, n_jobs):
    ids = sorted(masks)
    jobs = (delayed(local_update)(spec[k] if isinstance(spec, dict) else spec,
                                  params_of(k), data[k], masks[k], step_size,
                                  num_steps[k], batch_size, seeds[k])
            for k in ids)
    results = Parallel(n_jobs=n_jobs, prefer='threads')(jobs)
    return ids, [update for update, _ in results]


def _per_device(value, ids):
    if isinstance(value, dict):
        return value
    return dict((k, value) for k in ids)


def fedpmt_round(spec, global_params, data, masks, step_size, num_steps,
                 batch_size, seeds, n_jobs=1, weight_by_size=False):
    """One FedPMT round over the devices in ``masks``.

    Parameters:
    --------------
    spec: ModelSpec
        Shared architecture.

    global_params: LayerParams
        Current global model.

    data: dict
        device id -> Dataset.

    masks: dict
        device id -> BpMask of the participating devices.

    step_size: float
        eta_t.

    num_steps: int or dict
        tau, common or per device.

    batch_size: int
        Local mini-batch size.

    seeds: dict
        device id -> local shuffling seed.

    n_jobs: int
        Devices trained concurrently.

    weight_by_size: bool
        Weight each layer's aggregation by |D_k| as well.

    Returns:
    --------------
    new_params: LayerParams
        Aggregated global model.

    updates: dict
        device id -> LayerGrads delta.
    """
    if not masks:
        return global_params.copy(), {}
    num_steps = _per_device(num_steps, masks)
    ids, updates = _run_local_updates(spec, lambda k: global_params, data, masks,
                                      step_size, num_steps, batch_size, seeds,
                                      n_jobs)
    sizes = [len(data[k]) for k in ids] if weight_by_size else None
    weights = compute_weights([masks[k] for k in ids], sizes)
    new_params = aggregate(global_params, updates, weights=weights)
    return new_params, dict(zip(ids, updates))


def fedavg_round(spec, global_params, data, device_ids, step_size, num_steps,
                 batch_size, seeds, n_jobs=1, weight_by_size=False):
    """FedAvg: every device trains and back-propagates the full model."""
    full = BpMask.full(spec.trainable_count)
    masks = dict((k, full) for k in device_ids)
    return fedpmt_round(spec, global_params, data, masks, step_size, num_steps,
                        batch_size, seeds, n_jobs, weight_by_size)


class DropoutPlan(namedtuple('DropoutPlan',
                             ['keep_rate', 'kept_outputs', 'kept_inputs', 'rescale'])):
    """Kept unit indices of a FedDrop sub-model.

    ``kept_outputs[p]``/``kept_inputs[p]`` index the output units (dense
    units or conv channels) and input features of trainable layer p in the
    global model. Inputs of every layer after the first are scaled by
    ``rescale`` = 1 / keep_rate, folded into that layer's weights.
    """

    def sub_shapes(self, spec):
        shapes = []
        for p, layer in enumerate(spec.trainable_layers):
            n_out, n_in = len(self.kept_outputs[p]), len(self.kept_inputs[p])
            if isinstance(layer, Conv2d):
                shapes.append(((n_out, n_in, layer.kernel, layer.kernel), (n_out,)))
            else:
                shapes.append(((n_in, n_out), (n_out,)))
        return shapes


def kept_count(units, keep_rate):
    """ceil(keep_rate * units), at least one unit."""
    return max(1, int(np.ceil(np.round(keep_rate * units, 9))))


def _check_keep_rate(keep_rate):
    if not 0 < keep_rate <= 1:
        raise InvalidKeepRateError(keep_rate)


def _units(layer):
    return layer.out_features if isinstance(layer, Dense) else layer.out_channels


def _kept_counts(spec, keep_rate):
    layers = spec.trainable_layers
    return [kept_count(_units(l), keep_rate) if p < len(layers) - 1 else _units(l)
            for p, l in enumerate(layers)]


def _input_spread(spec):
    """Input features per unit of the previous trainable layer (flatten area)."""
    layers = spec.trainable_layers
    spread = [1]
    for p in range(1, len(layers)):
        layer, prev = layers[p], layers[p - 1]
        if isinstance(layer, Dense) and isinstance(prev, Conv2d):
            spread.append(layer.in_features // prev.out_channels)
        else:
            spread.append(1)
    return spread


def feddrop_submodel_spec(spec, keep_rate):
    """ModelSpec of the sub-model keeping ceil(keep_rate * n) hidden units."""
    _check_keep_rate(keep_rate)
    counts = _kept_counts(spec, keep_rate)
    spread = _input_spread(spec)
    position = dict((j, p) for p, j in enumerate(spec.trainable_indices))
    layers = []
    for j, layer in enumerate(spec.layers):
        if j not in position:
            layers.append(layer)
            continue
        p = position[j]
        if isinstance(layer, Conv2d):
            n_in = layer.in_channels if p == 0 else counts[p - 1]
            layers.append(Conv2d(n_in, counts[p], layer.kernel, layer.stride,
                                 layer.padding))
        else:
            n_in = layer.in_features if p == 0 else counts[p - 1] * spread[p]
            layers.append(Dense(n_in, counts[p]))
    return ModelSpec(layers, spec.input_shape)


def _sub_index(plan, p, layer):
    if isinstance(layer, Conv2d):
        return np.ix_(plan.kept_outputs[p], plan.kept_inputs[p])
    return np.ix_(plan.kept_inputs[p], plan.kept_outputs[p])


def feddrop_generate(global_params, spec, keep_rate, rng_seed):
    """Extract a random FedDrop sub-model.

    Every trainable layer but the last keeps a uniformly random subset of
    ceil(keep_rate * n_l) units (dense units or conv channels).

    Returns:
    --------------
    sub_params: LayerParams
        Weights of the kept units, with the 1/keep_rate rescale folded into
        the layers fed by dropped units.

    sub_spec: ModelSpec
        Architecture of the sub-model.

    plan: DropoutPlan
        Indices needed to re-insert the sub-model update.
    """
    _check_keep_rate(keep_rate)
    rng = np.random.RandomState(rng_seed)
    layers = spec.trainable_layers
    counts = _kept_counts(spec, keep_rate)
    spread = _input_spread(spec)

    kept_outputs, kept_inputs = [], []
    for p, layer in enumerate(layers):
        units = _units(layer)
        if p < len(layers) - 1:
            kept_outputs.append(np.sort(rng.choice(units, counts[p], replace=False)))
        else:
            kept_outputs.append(np.arange(units))
        if p == 0:
            n_in = layer.in_channels if isinstance(layer, Conv2d) else layer.in_features
            kept_inputs.append(np.arange(n_in))
        else:
            prev = kept_outputs[p - 1]
            kept_inputs.append((prev[:, np.newaxis] * spread[p]
                                + np.arange(spread[p])).ravel())
    plan = DropoutPlan(float(keep_rate), kept_outputs, kept_inputs, 1. / keep_rate)

    blocks = []
    for p, (layer, (weight, bias)) in enumerate(zip(layers, global_params)):
        sub_w = weight[_sub_index(plan, p, layer)]
        if p > 0:
            sub_w = sub_w * plan.rescale
        blocks.append((sub_w, bias[plan.kept_outputs[p]]))
    return LayerParams(blocks), feddrop_submodel_spec(spec, keep_rate), plan


def feddrop_expand(sub_delta, plan, spec):
    """Map a sub-model delta back to global coordinates.

    Returns:
    --------------
    delta: list of tuple
        Global-shaped delta blocks, zero outside the sub-model.

    members: list of tuple
        Boolean blocks marking the parameters the sub-model contains.
    """
    expected = [tuple(s) for s in plan.sub_shapes(spec)]
    if sub_delta.shapes() != expected:
        raise PlanMismatchError('sub-model delta has layout {}, plan expects {}'
                                .format(sub_delta.shapes(), expected))
    delta, members = [], []
    for p, layer in enumerate(spec.trainable_layers):
        w_shape, b_shape = layer.param_shapes()
        index = _sub_index(plan, p, layer)
        d_w, d_b = np.zeros(w_shape), np.zeros(b_shape)
        m_w, m_b = np.zeros(w_shape, dtype=bool), np.zeros(b_shape, dtype=bool)
        sub_w, sub_b = sub_delta[p]
        d_w[index] = sub_w / plan.rescale if p > 0 else sub_w
        d_b[plan.kept_outputs[p]] = sub_b
        m_w[index] = True
        m_b[plan.kept_outputs[p]] = True
        delta.append((d_w, d_b))
        members.append((m_w, m_b))
    return delta, members


def feddrop_aggregate(global_params, spec, sub_updates):
    """Average each parameter over the devices whose sub-model contained it.

    Parameters:
    --------------
    global_params: LayerParams
        Model the sub-models were extracted from.

    spec: ModelSpec
        Global architecture.

    sub_updates: list of (LayerGrads, DropoutPlan)
        Sub-model deltas in ascending device-id order.

    Returns:
    --------------
    new_params: LayerParams
        Parameters contained in no sub-model are unchanged.
    """
    if not sub_updates:
        return global_params.copy()
    expanded = [feddrop_expand(d, plan, spec) for d, plan in sub_updates]
    blocks = []
    for l, old in enumerate(global_params):
        new = []
        for i, array in enumerate(old):
            count = sum(m[l][i].astype(np.float64) for _, m in expanded)
            owned = count > 0
            weights = [np.where(owned, m[l][i] / np.where(owned, count, 1.), 0.)
                       for _, m in expanded]
            step = weighted_block_sum(
                (w, d[l][i]) for w, (d, _) in zip(weights, expanded))
            new.append(np.where(owned, array - step, array))
        blocks.append(tuple(new))
    return LayerParams(blocks)


def submodel_flops(spec, keep_rate, batch, **cost_kwargs):
    """Full FP+BP cost of one step of the keep_rate sub-model."""
    return model_cost(feddrop_submodel_spec(spec, keep_rate), batch,
                      **cost_kwargs).full_total


def feddrop_match_rate(target_flops, spec, batch, **cost_kwargs):
    """Smallest keep rate whose sub-model costs at least ``target_flops``.

    The rate is found by bisection on the kept-unit counts and reported as
    the largest per-layer kept fraction of the matched sub-model, so a
    full-cost target returns exactly 1.
    """
    def cost(rate):
        return submodel_flops(spec, rate, batch, **cost_kwargs)

    low, high = cost(1e-12), cost(1.)
    if not low <= target_flops <= high:
        raise TargetOutOfRangeError(target_flops, low, high)
    lo, hi = 0., 1.
    for _ in range(60):
        mid = (lo + hi) / 2.
        if cost(mid) >= target_flops:
            hi = mid
        else:
            lo = mid
    counts = _kept_counts(spec, hi)
    units = [_units(l) for l in spec.trainable_layers[:-1]]
    if not units:
        return 1.
    return max(c / n for c, n in zip(counts, units))


def feddrop_round(spec, global_params, data, keep_rates, step_size, num_steps,
                  batch_size, seeds, n_jobs=1):
    """One FedDrop round: fresh sub-models, full local training, merge.

    ``keep_rates`` maps device id -> keep rate; ``seeds`` seeds both the
    sub-model draw and the local shuffling.

    Returns:
    --------------
    new_params: LayerParams

    plans: dict
        device id -> DropoutPlan.
    """
    if not keep_rates:
        return global_params.copy(), {}
    ids = sorted(keep_rates)
    num_steps = _per_device(num_steps, ids)
    subs = dict((k, feddrop_generate(global_params, spec, keep_rates[k], seeds[k]))
                for k in ids)
    sub_specs = dict((k, subs[k][1]) for k in ids)
    masks = dict((k, BpMask.full(spec.trainable_count)) for k in ids)
    _, updates = _run_local_updates(sub_specs, lambda k: subs[k][0], data, masks,
                                    step_size, num_steps, batch_size, seeds, n_jobs)
    plans = dict((k, subs[k][2]) for k in ids)
    new_params = feddrop_aggregate(global_params, spec,
                                   [(u, plans[k]) for k, u in zip(ids, updates)])
    return new_params, plans


def feddrop_time(spec, keep_rate, kappa, base_full_time, batch, **cost_kwargs):
    """Compute time of a FedDrop sub-model, from its cost ratio to the full model."""
    ratio = (submodel_flops(spec, keep_rate, batch, **cost_kwargs)
             / model_cost(spec, batch, **cost_kwargs).full_total)
    return device_time(ratio, kappa, base_full_time)
