"""Structured errors raised by fedpmt.

Every error is also a ``ValueError`` so callers that only care about bad
input can keep catching that.
"""


class FedPMTError(ValueError):
    """Base class of all fedpmt errors."""


class ShapeMismatchError(FedPMTError):
    def __init__(self, layer_index, expected, got):
        self.layer_index = layer_index
        self.expected = tuple(expected)
        self.got = tuple(got)
        super(ShapeMismatchError, self).__init__(
            'layer {}: expected input shape {}, found {}'.format(
                layer_index, self.expected, self.got))


class MaskLengthError(FedPMTError):
    def __init__(self, expected, got):
        self.expected = expected
        self.got = got
        super(MaskLengthError, self).__init__(
            'mask length must be {}. Found: {}.'.format(expected, got))


class EmptyDatasetError(FedPMTError):
    pass


class WidthMenuError(FedPMTError):
    pass


class LayoutMismatchError(FedPMTError):
    pass


class IdxFormatError(FedPMTError):
    """Malformed IDX file."""

    def __init__(self, path, message):
        self.path = path
        super(IdxFormatError, self).__init__('{}: {}'.format(path, message))


class IdxMagicError(IdxFormatError):
    def __init__(self, path, expected, got):
        self.expected = expected
        self.got = got
        super(IdxMagicError, self).__init__(
            path, 'bad magic number 0x{:08x} (expected 0x{:08x})'.format(
                got, expected))


class IdxTruncatedError(IdxFormatError):
    def __init__(self, path, expected_bytes, got_bytes):
        self.expected_bytes = expected_bytes
        self.got_bytes = got_bytes
        super(IdxTruncatedError, self).__init__(
            path, 'truncated file: {} bytes expected, {} found'.format(
                expected_bytes, got_bytes))


class IdxCountMismatchError(FedPMTError):
    def __init__(self, n_images, n_labels):
        self.n_images = n_images
        self.n_labels = n_labels
        super(IdxCountMismatchError, self).__init__(
            'images file holds {} items but labels file holds {}'.format(
                n_images, n_labels))


class InsufficientSamplesError(FedPMTError):
    def __init__(self, required, available):
        self.required = required
        self.available = available
        super(InsufficientSamplesError, self).__init__(
            '{} samples required, only {} available'.format(
                required, available))


class ClassExhaustedError(FedPMTError):
    def __init__(self, class_id, required, available):
        self.class_id = class_id
        self.required = required
        self.available = available
        super(ClassExhaustedError, self).__init__(
            'class {} exhausted: {} samples required, {} left'.format(
                class_id, required, available))


class InvalidKeepRateError(FedPMTError):
    def __init__(self, keep_rate):
        self.keep_rate = keep_rate
        super(InvalidKeepRateError, self).__init__(
            'keep_rate must be in (0, 1]. Found: {}.'.format(keep_rate))


class TargetOutOfRangeError(FedPMTError):
    def __init__(self, target, low, high):
        self.target = target
        self.low = low
        self.high = high
        super(TargetOutOfRangeError, self).__init__(
            'target FLOPs {} outside the reachable range [{}, {}]'.format(
                target, low, high))


class PlanMismatchError(FedPMTError):
    pass


class DivergenceError(FedPMTError):
    def __init__(self, round_index, gap, initial_gap):
        self.round_index = round_index
        self.gap = gap
        self.initial_gap = initial_gap
        super(DivergenceError, self).__init__(
            'loss gap {:.3e} at round {} is more than 10x the initial gap '
            '{:.3e}; use a smaller step scale (larger lambda or epsilon)'
            .format(gap, round_index, initial_gap))


class ZeroTailError(FedPMTError):
    def __init__(self, width):
        self.width = width
        super(ZeroTailError, self).__init__(
            'proportions from width {} upwards sum to zero'.format(width))


class IndivisibleSelectionError(FedPMTError):
    def __init__(self, per_round, num_tiers):
        self.per_round = per_round
        self.num_tiers = num_tiers
        super(IndivisibleSelectionError, self).__init__(
            '{} selected devices cannot be split evenly over {} tiers'.format(
                per_round, num_tiers))


class ConfigError(FedPMTError):
    pass
