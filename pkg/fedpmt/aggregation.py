"""Layer-wise weighted aggregation of heterogeneous-width updates."""
from __future__ import division

import logging

import numpy as np

from fedpmt.exceptions import LayoutMismatchError, MaskLengthError
from fedpmt.model import LayerParams

logger = logging.getLogger(__name__)


class AggregationWeights(object):
    """Per-device, per-layer aggregation scalars A_k[l].

    Attributes:
    --------------
    weights: numpy.ndarray
        Shape (num_devices, num_layers); row k is A_k.

    zero_updater_layers: tuple
        Layers no device updates; their weights are all zero.
    """

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.zero_updater_layers = tuple(
            int(l) for l in np.flatnonzero(self.weights.sum(axis=0) == 0))

    @property
    def num_devices(self):
        return self.weights.shape[0]

    def __getitem__(self, k):
        return self.weights[k]

    def __repr__(self):
        return 'AggregationWeights({})'.format(self.weights.tolist())


def compute_weights(masks, sizes=None):
    """Weights A_k[l] = f_k[l] / sum_k' f_k'[l].

    Parameters:
    --------------
    masks: list of BpMask
        Masks of the participating devices, in ascending device-id order.

    sizes: list of int or None
        Local dataset sizes |D_k|. When given, each layer's weights are
        proportional to ``f_k[l] * |D_k|`` instead.

    Returns:
    --------------
    weights: AggregationWeights
    """
    if not masks:
        raise ValueError('at least one device mask is required')
    lengths = set(len(m) for m in masks)
    if len(lengths) != 1:
        raise MaskLengthError(len(masks[0]), sorted(lengths))
    f = np.array([list(m) for m in masks], dtype=np.float64)
    if sizes is not None:
        if len(sizes) != len(masks):
            raise LayoutMismatchError('{} sizes given for {} devices'.format(
                len(sizes), len(masks)))
        f = f * np.asarray(sizes, dtype=np.float64)[:, np.newaxis]
    totals = f.sum(axis=0)
    weights = np.zeros_like(f)
    updated = totals > 0
    weights[:, updated] = f[:, updated] / totals[updated]
    out = AggregationWeights(weights)
    if out.zero_updater_layers:
        logger.debug('no updater for layers %s', list(out.zero_updater_layers))
    return out


def weighted_block_sum(terms):
    """Sum ``weight * array`` pairs in the given order, starting from zeros."""
    total = None
    for weight, array in terms:
        contribution = weight * array
        total = contribution if total is None else total + contribution
    return total


def _check_layout(global_params, updates):
    shapes = global_params.shapes()
    for k, update in enumerate(updates):
        if update.shapes() != shapes:
            raise LayoutMismatchError(
                'update {} has layout {}, global model has {}'.format(
                    k, update.shapes(), shapes))


def aggregate(global_params, updates, masks=None, weights=None):
    """Apply the layer-wise weighted aggregation of device deltas.

    New block l = old block l - sum_k A_k[l] * delta_k[l], summing devices in
    the given (ascending id) order. Layers without updaters are returned
    unchanged.

    Parameters:
    --------------
    global_params: LayerParams
        Model the deltas were computed against.

    updates: list of LayerGrads
        Per-device accumulated deltas (they already include the step size).

    masks: list of BpMask
        Per-device masks; ignored when ``weights`` is given.

    weights: AggregationWeights or None
        Precomputed weights (e.g. dataset-size weighted).

    Returns:
    --------------
    new_params: LayerParams
    """
    if weights is None:
        if masks is None:
            masks = [u.updated_flags for u in updates]
        weights = compute_weights(masks)
    if weights.num_devices != len(updates):
        raise LayoutMismatchError('{} weight rows for {} updates'.format(
            weights.num_devices, len(updates)))
    _check_layout(global_params, updates)

    blocks = []
    for l, old in enumerate(global_params):
        terms = [(weights[k][l], update[l]) for k, update in enumerate(updates)
                 if weights[k][l] != 0]
        if not terms:
            blocks.append(tuple(a.copy() for a in old))
            continue
        new = []
        for i, array in enumerate(old):
            step = weighted_block_sum((w, block[i]) for w, block in terms)
            new.append(array - step)
        blocks.append(tuple(new))
    return LayerParams(blocks)
