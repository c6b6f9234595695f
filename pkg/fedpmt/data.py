"""Dataset loading (IDX), synthetic generation and device partitioning."""
from __future__ import division

import logging
import os
import struct

import numpy as np
from sklearn.model_selection import StratifiedShuffleSplit

from fedpmt.exceptions import (ClassExhaustedError, IdxCountMismatchError,
                               IdxMagicError, IdxTruncatedError,
                               InsufficientSamplesError)

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class Dataset(object):
    """Features of shape (N,) + feature_shape with integer labels."""

    def __init__(self, features, labels, class_count=None):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError('{} feature rows but {} labels'.format(
                self.features.shape[0], self.labels.shape[0]))
        if class_count is None:
            class_count = int(self.labels.max()) + 1 if len(self.labels) else 0
        self.class_count = int(class_count)
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.class_count):
            raise ValueError('labels must be in [0, {})'.format(self.class_count))

    def __len__(self):
        return self.labels.shape[0]

    @property
    def feature_shape(self):
        return self.features.shape[1:]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.class_count)

    def reshape(self, feature_shape):
        """Same samples viewed with another per-sample shape (e.g. (1, 28, 28))."""
        return Dataset(self.features.reshape((len(self),) + tuple(feature_shape)),
                       self.labels, self.class_count)

    def class_histogram(self):
        return np.bincount(self.labels, minlength=self.class_count)

    def __repr__(self):
        return 'Dataset(n={}, feature_shape={}, classes={})'.format(
            len(self), self.feature_shape, self.class_count)


class Partition(dict):
    """device id -> sorted index array into a parent Dataset."""

    def sizes(self):
        return dict((k, len(v)) for k, v in self.items())

    def is_disjoint(self):
        all_idx = np.concatenate([v for v in self.values()]) if self else np.array([])
        return len(np.unique(all_idx)) == len(all_idx)

    def device_datasets(self, dataset):
        return dict((k, dataset.subset(v)) for k, v in sorted(self.items()))


def _read(path):
    with open(path, 'rb') as f:
        return f.read()


def _parse_idx(path, magic, header_dims):
    raw = _read(path)
    header_size = 4 * (2 + header_dims)
    if len(raw) < header_size:
        raise IdxTruncatedError(path, header_size, len(raw))
    found = struct.unpack('>i', raw[:4])[0]
    if found != magic:
        raise IdxMagicError(path, magic, found)
    dims = struct.unpack('>' + 'i' * (1 + header_dims), raw[4:header_size])
    expected = header_size + int(np.prod(dims))
    if len(raw) < expected:
        raise IdxTruncatedError(path, expected, len(raw))
    data = np.frombuffer(raw, dtype=np.uint8, count=expected - header_size,
                         offset=header_size)
    return data.reshape(dims)


def load_idx(images_path, labels_path):
    """Load an IDX image/label file pair.

    Parameters:
    --------------
    images_path: string
        Path of the images file (magic 0x00000803, dims N, rows, cols).

    labels_path: string
        Path of the labels file (magic 0x00000801, dim N).

    Returns:
    --------------
    dataset: Dataset
        Features (N, rows, cols) scaled to [0, 1].
    """
    for path in (images_path, labels_path):
        if not os.path.exists(path):
            raise IOError('{} not found'.format(path))
    images = _parse_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(images.shape[0], labels.shape[0])
    logger.info('loaded %d images of shape %s from %s', images.shape[0],
                images.shape[1:], images_path)
    return Dataset(images / 255., labels.astype(np.int64))


def generate_synthetic(num_classes, dim, samples_per_class, class_separation,
                       seed, feature_shape=None, clusters_per_class=1):
    """Gaussian class clusters.

    Every class owns ``clusters_per_class`` means drawn from
    N(0, class_separation^2 I) and its samples are dealt round-robin over
    them, each from N(mean, I); the result is shuffled. More than one
    cluster per class makes the class regions non-convex. ``feature_shape``
    reshapes every sample (its product must equal ``dim``).
    """
    if min(num_classes, dim, samples_per_class, clusters_per_class) < 1 \
            or class_separation < 0:
        raise ValueError('arguments must be positive')
    rng = np.random.RandomState(seed)
    m = int(clusters_per_class)
    means = rng.normal(0., class_separation, size=(num_classes * m, dim))
    cluster = np.arange(samples_per_class) % m
    features = np.concatenate([means[c * m + cluster]
                               + rng.normal(size=(samples_per_class, dim))
                               for c in range(num_classes)])
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    order = rng.permutation(len(labels))
    features, labels = features[order], labels[order]
    if feature_shape is not None:
        if int(np.prod(feature_shape)) != dim:
            raise ValueError('feature_shape {} does not hold {} features'.format(
                feature_shape, dim))
        features = features.reshape((len(labels),) + tuple(feature_shape))
    return Dataset(features, labels, num_classes)


def train_test_split(dataset, test_size, random_state=None):
    """Stratified train/test split of a Dataset."""
    sss = StratifiedShuffleSplit(n_splits=1, test_size=test_size,
                                 random_state=random_state)
    train_idx, test_idx = next(sss.split(np.zeros(len(dataset)), dataset.labels))
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(test_idx))


def partition_iid(dataset, num_devices, per_device, seed):
    """Seeded shuffle cut into ``num_devices`` contiguous slices of ``per_device``."""
    required = num_devices * per_device
    if required > len(dataset):
        raise InsufficientSamplesError(required, len(dataset))
    order = np.random.RandomState(seed).permutation(len(dataset))
    return Partition((k, np.sort(order[k * per_device:(k + 1) * per_device]))
                     for k in range(num_devices))


class _ClassDeck(object):
    """Draws class pairs without replacement, reshuffling when exhausted."""

    def __init__(self, classes, rng):
        self.classes = list(classes)
        self.rng = rng
        self.deck = []

    def _refill(self):
        self.deck.extend(int(c) for c in self.rng.permutation(self.classes))

    def draw_pair(self):
        if not self.deck:
            self._refill()
        first = self.deck.pop(0)
        if not any(c != first for c in self.deck):
            self._refill()
        second = next(c for c in self.deck if c != first)
        self.deck.remove(second)
        return first, second


def partition_noniid_2class(dataset, num_devices, per_device, seed):
    """Label-skewed partition: every device holds exactly two classes.

    Class pairs are drawn without replacement until every class has been
    used, then the classes are reshuffled; each device takes
    ``per_device - per_device // 2`` samples of its first class and the rest
    from the second.
    """
    if per_device < 2:
        raise ValueError('per_device must be >= 2. Found: {}.'.format(per_device))
    rng = np.random.RandomState(seed)
    classes = np.unique(dataset.labels)
    if len(classes) < 2:
        raise ValueError('at least two classes are required')
    if num_devices * per_device > len(dataset):
        raise InsufficientSamplesError(num_devices * per_device, len(dataset))
    pools = dict((int(c), rng.permutation(np.flatnonzero(dataset.labels == c)))
                 for c in classes)
    cursor = dict((c, 0) for c in pools)
    deck = _ClassDeck(sorted(pools), rng)

    def take(c, n):
        left = len(pools[c]) - cursor[c]
        if n > left:
            raise ClassExhaustedError(c, n, left)
        chosen = pools[c][cursor[c]:cursor[c] + n]
        cursor[c] += n
        return chosen

    partition = Partition()
    for k in range(num_devices):
        first, second = deck.draw_pair()
        n_first = per_device - per_device // 2
        idx = np.concatenate([take(first, n_first), take(second, per_device // 2)])
        partition[k] = np.sort(idx)
    return partition
