"""Model specification, parameter containers and mask-aware training passes."""
from __future__ import division

from collections import namedtuple

import numpy as np

from fedpmt.exceptions import EmptyDatasetError, MaskLengthError, ShapeMismatchError
from fedpmt.layers import Conv2d, Dense, Flatten, MaxPool2d, Relu, SoftmaxXent

__implemented_models__ = ['fcnn', 'fcnn_mnist', 'cnn_mnist', 'cnn_cifar10']

ForwardCache = namedtuple('ForwardCache',
                          ['layer_caches', 'loss', 'logits', 'probs', 'labels'])


class ModelSpec(object):
    """Architecture description.

    Attributes:
    --------------
    layers: tuple
        Layer descriptors, ending with exactly one ``SoftmaxXent``.

    input_shape: tuple
        Per-sample input shape (no batch dimension).

    trainable_indices: tuple
        Positions in ``layers`` of the Dense/Conv2d layers, shallow to deep.

    output_shapes: tuple
        Per-sample output shape of every layer.
    """

    def __init__(self, layers, input_shape):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(s) for s in input_shape)

        if not self.layers or not isinstance(self.layers[-1], SoftmaxXent):
            raise ValueError('the last layer must be SoftmaxXent')
        if sum(isinstance(l, SoftmaxXent) for l in self.layers) != 1:
            raise ValueError('exactly one SoftmaxXent layer is allowed')

        shapes = []
        shape = self.input_shape
        for j, layer in enumerate(self.layers):
            out = layer.compute_output_shape(shape)
            if out is None:
                raise ShapeMismatchError(j, layer.expected_input_shape(), shape)
            shapes.append(out)
            shape = out
        self.output_shapes = tuple(shapes)
        self.trainable_indices = tuple(j for j, l in enumerate(self.layers)
                                       if l.trainable)
        if not self.trainable_indices:
            raise ValueError('the model has no trainable layer')

    @property
    def trainable_count(self):
        return len(self.trainable_indices)

    @property
    def classes(self):
        return self.layers[-1].classes

    @property
    def trainable_layers(self):
        return [self.layers[j] for j in self.trainable_indices]

    def input_shape_of(self, j):
        """Per-sample input shape of layer ``j``."""
        return self.input_shape if j == 0 else self.output_shapes[j - 1]

    def block_shapes(self):
        return [l.param_shapes() for l in self.trainable_layers]

    def __eq__(self, other):
        return (isinstance(other, ModelSpec) and self.layers == other.layers
                and self.input_shape == other.input_shape)

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        return 'ModelSpec(input_shape={}, layers={})'.format(
            self.input_shape, list(self.layers))


class LayerParams(object):
    """Per-layer parameter blocks, shallow to deep.

    Each block is a tuple of float64 arrays; for Dense and Conv2d layers it is
    ``(weight, bias)``. The containers are treated as immutable values: every
    operation returns fresh arrays.
    """

    def __init__(self, blocks):
        self.blocks = [tuple(np.asarray(a, dtype=np.float64) for a in block)
                       for block in blocks]

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def __getitem__(self, l):
        return self.blocks[l]

    def copy(self):
        return type(self)([tuple(a.copy() for a in block) for block in self.blocks])

    def shapes(self):
        return [tuple(a.shape for a in block) for block in self.blocks]

    @classmethod
    def zeros_like(cls, other):
        return cls([tuple(np.zeros_like(a) for a in block) for block in other])

    def __repr__(self):
        return '{}({})'.format(type(self).__name__, self.shapes())


class LayerGrads(LayerParams):
    """Gradient (or accumulated delta) blocks plus per-block update flags."""

    def __init__(self, blocks, updated_flags):
        super(LayerGrads, self).__init__(blocks)
        self.updated_flags = tuple(bool(f) for f in updated_flags)
        if len(self.updated_flags) != len(self.blocks):
            raise MaskLengthError(len(self.blocks), len(self.updated_flags))

    def copy(self):
        return LayerGrads([tuple(a.copy() for a in block) for block in self.blocks],
                          self.updated_flags)


def init_params(spec, seed):
    """Glorot-uniform weights and zero biases, seeded."""
    rng = np.random.RandomState(seed)
    blocks = []
    for layer in spec.trainable_layers:
        w_shape, b_shape = layer.param_shapes()
        fan_in, fan_out = layer.fan_in_out()
        limit = np.sqrt(6. / (fan_in + fan_out))
        blocks.append((rng.uniform(-limit, limit, size=w_shape), np.zeros(b_shape)))
    return LayerParams(blocks)


def _check_params(spec, params):
    if params.shapes() != [tuple(s) for s in spec.block_shapes()]:
        raise ShapeMismatchError(-1, spec.block_shapes(), params.shapes())


def _block_iter(spec, params):
    """Map every layer index to its parameter block (None if untrainable)."""
    blocks = [None] * len(spec.layers)
    for p, j in enumerate(spec.trainable_indices):
        blocks[j] = params[p]
    return blocks


def _forward_logits(spec, params, batch_x):
    batch_x = np.asarray(batch_x, dtype=np.float64)
    if batch_x.shape[1:] != spec.input_shape:
        raise ShapeMismatchError(0, spec.input_shape, batch_x.shape[1:])
    _check_params(spec, params)
    blocks = _block_iter(spec, params)
    caches = []
    x = batch_x
    for j, layer in enumerate(spec.layers[:-1]):
        x, cache = layer.call(x, blocks[j])
        caches.append(cache)
    return x, caches


def _check_labels(spec, batch_y, n):
    labels = np.asarray(batch_y, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError('expected {} labels, found shape {}'.format(n, labels.shape))
    if n and (labels.min() < 0 or labels.max() >= spec.classes):
        raise ValueError('labels must be in [0, {})'.format(spec.classes))
    return labels


def forward(spec, params, batch_x, batch_y):
    """Run the forward pass and the mean cross-entropy loss.

    Parameters:
    --------------
    spec: ModelSpec
        The architecture.

    params: LayerParams
        Parameters matching ``spec``.

    batch_x: numpy.ndarray
        Inputs of shape (n,) + spec.input_shape.

    batch_y: array-like
        Integer labels in [0, classes).

    Returns:
    --------------
    loss: float
        Mean cross-entropy over the batch.

    cache: ForwardCache
        Everything ``backward`` needs for any mask.
    """
    logits, caches = _forward_logits(spec, params, batch_x)
    labels = _check_labels(spec, batch_y, logits.shape[0])
    head = spec.layers[-1]
    probs, shifted = head.call(logits)
    loss = head.sample_losses(shifted, labels).mean()
    return loss, ForwardCache(caches, loss, logits, probs, labels)


def _mask_bits(mask, expected):
    bits = tuple(int(b) for b in mask)
    if len(bits) != expected:
        raise MaskLengthError(expected, len(bits))
    return bits


def backward(spec, params, cache, mask):
    """Mask-aware backward pass.

    Gradients are computed only for blocks whose mask bit is 1, and the
    error signal is not propagated below the shallowest mask-on layer.
    """
    bits = _mask_bits(mask, spec.trainable_count)
    grads = [tuple(np.zeros(s) for s in shapes) for shapes in spec.block_shapes()]
    if not any(bits):
        return LayerGrads(grads, bits)

    position = dict((j, p) for p, j in enumerate(spec.trainable_indices))
    stop = spec.trainable_indices[bits.index(1)]
    blocks = _block_iter(spec, params)

    dout, _ = spec.layers[-1].backward(cache.probs, cache.labels)
    for j in range(len(spec.layers) - 2, stop - 1, -1):
        layer = spec.layers[j]
        param_grad = layer.trainable and bits[position[j]] == 1
        dout, block_grads = layer.backward(dout, cache.layer_caches[j], blocks[j],
                                           input_grad=j > stop,
                                           param_grad=param_grad)
        if param_grad:
            grads[position[j]] = block_grads
    return LayerGrads(grads, bits)


def predict_proba(spec, params, x):
    logits, _ = _forward_logits(spec, params, x)
    probs, _ = spec.layers[-1].call(logits)
    return probs


def evaluate(spec, params, dataset, chunk_size=256):
    """Accuracy and mean loss of ``params`` on ``dataset``.

    Returns:
    --------------
    accuracy: float
        Fraction of argmax predictions (lowest index on ties) equal to labels.

    mean_loss: float
        Mean cross-entropy over all samples.
    """
    n = len(dataset)
    if n == 0:
        raise EmptyDatasetError('cannot evaluate on an empty dataset')
    head = spec.layers[-1]
    losses, correct = [], 0
    for start in range(0, n, chunk_size):
        x = dataset.features[start:start + chunk_size]
        y = _check_labels(spec, dataset.labels[start:start + chunk_size], len(x))
        logits, _ = _forward_logits(spec, params, x)
        _, shifted = head.call(logits)
        losses.append(head.sample_losses(shifted, y))
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct / n, float(np.concatenate(losses).mean())


def build_fcnn(layer_sizes):
    """Fully connected ReLU network ``n_0 - n_1 - ... - n_L``."""
    if len(layer_sizes) < 2:
        raise ValueError('at least input and output sizes are required')
    layers = []
    for j in range(1, len(layer_sizes)):
        layers.append(Dense(layer_sizes[j - 1], layer_sizes[j]))
        if j < len(layer_sizes) - 1:
            layers.append(Relu())
    layers.append(SoftmaxXent(layer_sizes[-1]))
    return ModelSpec(layers, (layer_sizes[0],))


def build_fcnn_mnist():
    return build_fcnn([784, 400, 300, 200, 100, 10])


def build_cnn(input_shape, conv_channels, dense_sizes, kernel=5, window=2):
    """Conv(kxk) + ReLU + MaxPool stages followed by a ReLU dense head."""
    layers = []
    in_channels = input_shape[0]
    for out_channels in conv_channels:
        layers += [Conv2d(in_channels, out_channels, kernel), Relu(), MaxPool2d(window)]
        in_channels = out_channels
    layers.append(Flatten())
    # dense input size is only known once the conv stack is composed
    shape = tuple(input_shape)
    for j, layer in enumerate(layers):
        out = layer.compute_output_shape(shape)
        if out is None:
            raise ShapeMismatchError(j, layer.expected_input_shape(), shape)
        shape = out
    sizes = [shape[0]] + list(dense_sizes)
    for j in range(1, len(sizes)):
        layers.append(Dense(sizes[j - 1], sizes[j]))
        if j < len(sizes) - 1:
            layers.append(Relu())
    layers.append(SoftmaxXent(sizes[-1]))
    return ModelSpec(layers, input_shape)


def build_cnn_mnist():
    return build_cnn((1, 28, 28), [8, 16], [128, 10])


def build_cnn_cifar10():
    return build_cnn((3, 32, 32), [16, 32], [500, 300, 10])


def build_model(name, **kwargs):
    """Build one of ``__implemented_models__``."""
    if name not in __implemented_models__:
        raise ValueError('model must be in {}. '
                         'Found: {}.'.format(__implemented_models__, name))
    if name == 'fcnn':
        return build_fcnn(kwargs['layer_sizes'])
    elif name == 'fcnn_mnist':
        return build_fcnn_mnist()
    elif name == 'cnn_mnist':
        return build_cnn_mnist()
    return build_cnn_cifar10()
