"""Back-propagation masks, width menus and the masked local update."""
import numpy as np

from fedpmt.exceptions import EmptyDatasetError, MaskLengthError, WidthMenuError
from fedpmt.model import LayerGrads, LayerParams, backward, forward


class BpMask(object):
    """Per-trainable-layer 0/1 indicator of back-propagation, shallow to deep."""

    def __init__(self, bits):
        self.bits = tuple(int(b) for b in bits)
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError('mask bits must be 0 or 1. Found: {}.'.format(bits))

    @classmethod
    def full(cls, num_layers):
        return cls([1] * num_layers)

    @classmethod
    def suffix(cls, num_layers, num_updated):
        """Mask updating the ``num_updated`` deepest layers."""
        return cls([0] * (num_layers - num_updated) + [1] * num_updated)

    @property
    def num_updated(self):
        return sum(self.bits)

    def is_suffix(self):
        k = self.num_updated
        return self.bits == BpMask.suffix(len(self.bits), k).bits

    def __and__(self, other):
        return BpMask([a & b for a, b in zip(self.bits, other.bits)])

    def __len__(self):
        return len(self.bits)

    def __iter__(self):
        return iter(self.bits)

    def __getitem__(self, l):
        return self.bits[l]

    def __eq__(self, other):
        return isinstance(other, BpMask) and self.bits == other.bits

    def __ne__(self, other):
        return not self == other

    def __hash__(self):
        return hash(self.bits)

    def __repr__(self):
        return 'BpMask({})'.format(list(self.bits))


class WidthMenu(object):
    """The |I| masks a device can train with; width ``i`` is 1-based."""

    def __init__(self, masks):
        self.masks = tuple(masks)
        if not self.masks:
            raise WidthMenuError('a width menu needs at least one mask')
        lengths = set(len(m) for m in self.masks)
        if len(lengths) != 1:
            raise WidthMenuError('masks have different lengths: {}'.format(sorted(lengths)))
        if self.masks[-1] != BpMask.full(len(self.masks[-1])):
            raise WidthMenuError('the widest mask must be all ones')
        counts = [m.num_updated for m in self.masks]
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise WidthMenuError('widths must strictly increase: {}'.format(counts))
        if any(m[-1] != 1 for m in self.masks):
            raise WidthMenuError('every mask must update the last layer')

    @property
    def num_widths(self):
        return len(self.masks)

    @property
    def num_layers(self):
        return len(self.masks[0])

    def mask(self, width):
        if not 1 <= width <= self.num_widths:
            raise WidthMenuError('width must be in [1, {}]. Found: {}.'.format(
                self.num_widths, width))
        return self.masks[width - 1]

    def layer_counts(self):
        return [m.num_updated for m in self.masks]

    def __repr__(self):
        return 'WidthMenu({})'.format([list(m.bits) for m in self.masks])


def build_width_menu(num_trainable_layers, num_widths, layer_counts=None):
    """Build the nested suffix masks of a width menu.

    Parameters:
    --------------
    num_trainable_layers: int
        |L|, the number of Dense/Conv2d layers.

    num_widths: int
        |I|, the number of widths (1 <= |I| <= |L|).

    layer_counts: list of int or None
        How many deepest layers width i back-propagates through. Defaults to
        ``|L| - |I| + i``.

    Returns:
    --------------
    menu: WidthMenu
    """
    n_layers, n_widths = int(num_trainable_layers), int(num_widths)
    if not 1 <= n_widths <= n_layers:
        raise WidthMenuError('number of widths must be in [1, {}]. '
                             'Found: {}.'.format(n_layers, n_widths))
    if layer_counts is None:
        layer_counts = [n_layers - n_widths + i for i in range(1, n_widths + 1)]
    layer_counts = [int(c) for c in layer_counts]
    if len(layer_counts) != n_widths:
        raise WidthMenuError('{} layer counts given for {} widths'.format(
            len(layer_counts), n_widths))
    if any(b <= a for a, b in zip(layer_counts, layer_counts[1:])):
        raise WidthMenuError('layer counts must strictly increase: {}'.format(layer_counts))
    if layer_counts[0] < 1 or layer_counts[-1] != n_layers:
        raise WidthMenuError('layer counts must lie in [1, {}] and end at {}. '
                             'Found: {}.'.format(n_layers, n_layers, layer_counts))
    return WidthMenu([BpMask.suffix(n_layers, c) for c in layer_counts])


def layerwise_mul(a, blocks):
    """Scale block ``l`` of ``blocks`` by the scalar ``a[l]``.

    ``blocks`` is a LayerParams or any sequence of per-layer blocks (a block
    being one array or a tuple of arrays); the result has the same layout.
    """
    blocks = list(blocks)
    a = list(a)
    if len(a) != len(blocks):
        raise MaskLengthError(len(blocks), len(a))
    out = []
    for scale, block in zip(a, blocks):
        if isinstance(block, tuple):
            out.append(tuple(scale * np.asarray(x, dtype=np.float64) for x in block))
        else:
            out.append(scale * np.asarray(block, dtype=np.float64))
    return out


def minibatches(num_samples, batch_size, rng):
    """Endless stream of sorted index batches, reshuffled every epoch."""
    while True:
        order = rng.permutation(num_samples)
        for start in range(0, num_samples, batch_size):
            yield np.sort(order[start:start + batch_size])


def local_steps(dataset_size, batch_size, epochs):
    """tau = E * ceil(|D_k| / batch)."""
    return int(epochs) * int(np.ceil(dataset_size / float(batch_size)))


def local_update(spec, global_params, device_data, mask, step_size, num_steps,
                 batch_size, rng_seed):
    """Masked mini-batch SGD on one device.

    Parameters:
    --------------
    spec: ModelSpec
        The shared architecture.

    global_params: LayerParams
        Starting point of local training.

    device_data: Dataset
        The device's local samples.

    mask: BpMask
        Which layers back-propagate.

    step_size: float
        eta_t, constant within the round.

    num_steps: int
        tau, the number of SGD steps.

    batch_size: int
        Mini-batch size (at most |D_k|).

    rng_seed: int or sequence of int
        Seed of the mini-batch shuffling.

    Returns:
    --------------
    update: LayerGrads
        Cumulative delta (global - final) per layer; masked-off blocks are
        exactly zero and their flags False.

    final_params: LayerParams
        Local parameters after ``num_steps`` steps.
    """
    n = len(device_data)
    if n == 0:
        raise EmptyDatasetError('device dataset is empty')
    if num_steps < 1:
        raise ValueError('num_steps must be >= 1. Found: {}.'.format(num_steps))
    if not 1 <= batch_size <= n:
        raise ValueError('batch_size must be in [1, {}]. Found: {}.'.format(n, batch_size))
    bits = tuple(mask)
    if len(bits) != spec.trainable_count:
        raise MaskLengthError(spec.trainable_count, len(bits))

    rng = np.random.RandomState(rng_seed)
    params = global_params.copy()
    batches = minibatches(n, batch_size, rng)
    for _ in range(num_steps):
        idx = next(batches)
        _, cache = forward(spec, params, device_data.features[idx],
                           device_data.labels[idx])
        grads = backward(spec, params, cache, bits)
        blocks = list(params.blocks)
        for l, on in enumerate(bits):
            if not on:
                continue
            blocks[l] = tuple(p - step_size * g for p, g in zip(blocks[l], grads[l]))
        params = LayerParams(blocks)
    delta = [tuple(g - f for g, f in zip(start, final)) if on
             else tuple(np.zeros_like(a) for a in start)
             for start, final, on in zip(global_params, params, bits)]
    return LayerGrads(delta, bits), params
