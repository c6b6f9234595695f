"""Layer descriptors and their numpy kernels.

Each layer knows its output shape (``compute_output_shape``), its forward
kernel (``call``) and its backward kernel (``backward``). Trainable layers
own exactly one parameter block ``(weight, bias)``; everything else is
parameter free. Shapes never include the batch dimension and images are
stored channels first (C, H, W).
"""
import numpy as np


class Layer(object):
    """Parameter-free identity layer, base class of the other layers."""

    trainable = False

    def compute_output_shape(self, input_shape):
        """Output shape for ``input_shape``, or None if incompatible."""
        return tuple(input_shape)

    def expected_input_shape(self):
        """Human readable input shape used in error messages."""
        return ()

    def param_shapes(self):
        return ()

    def call(self, x, block=None):
        """Return ``(output, cache)``."""
        return x, None

    def backward(self, dout, cache, block=None, input_grad=True,
                 param_grad=True):
        """Return ``(dx, grad_block)``; ``dx`` is None if not requested."""
        return (dout if input_grad else None), None

    def __eq__(self, other):
        return type(self) is type(other) and vars(self) == vars(other)

    def __ne__(self, other):
        return not self == other

    def __hash__(self):
        return hash((type(self).__name__,) + tuple(sorted(vars(self).items())))

    def __repr__(self):
        args = ', '.join('{}={}'.format(k, v) for k, v in sorted(vars(self).items()))
        return '{}({})'.format(type(self).__name__, args)


class Dense(Layer):
    """Fully connected layer, ``y = x W + b`` with W of shape (in, out)."""

    trainable = True

    def __init__(self, in_features, out_features):
        self.in_features = int(in_features)
        self.out_features = int(out_features)

    def compute_output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            return None
        return (self.out_features,)

    def expected_input_shape(self):
        return (self.in_features,)

    def param_shapes(self):
        return ((self.in_features, self.out_features), (self.out_features,))

    def fan_in_out(self):
        return self.in_features, self.out_features

    def call(self, x, block=None):
        weight, bias = block
        return x.dot(weight) + bias, x

    def backward(self, dout, cache, block=None, input_grad=True,
                 param_grad=True):
        weight, _ = block
        grads = None
        if param_grad:
            grads = (cache.T.dot(dout), dout.sum(axis=0))
        dx = dout.dot(weight.T) if input_grad else None
        return dx, grads


class Conv2d(Layer):
    """2D convolution on (N, C, H, W) inputs with square kernels."""

    trainable = True

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)

    def output_spatial(self, size):
        return (size - self.kernel + 2 * self.padding) // self.stride + 1

    def compute_output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            return None
        _, h, w = input_shape
        ho, wo = self.output_spatial(h), self.output_spatial(w)
        if ho < 1 or wo < 1:
            return None
        return (self.out_channels, ho, wo)

    def expected_input_shape(self):
        return (self.in_channels, '*', '*')

    def param_shapes(self):
        return ((self.out_channels, self.in_channels, self.kernel, self.kernel),
                (self.out_channels,))

    def fan_in_out(self):
        k2 = self.kernel * self.kernel
        return self.in_channels * k2, self.out_channels * k2

    def call(self, x, block=None):
        weight, bias = block
        n = x.shape[0]
        cols, out_hw = im2col(x, self.kernel, self.stride, self.padding)
        w_mat = weight.reshape(self.out_channels, -1)
        out = w_mat.dot(cols) + bias[:, np.newaxis]
        out = out.reshape(self.out_channels, n, out_hw[0], out_hw[1])
        return out.transpose(1, 0, 2, 3), (x.shape, cols)

    def backward(self, dout, cache, block=None, input_grad=True,
                 param_grad=True):
        weight, _ = block
        x_shape, cols = cache
        d_mat = dout.transpose(1, 0, 2, 3).reshape(self.out_channels, -1)
        grads = None
        if param_grad:
            grads = (d_mat.dot(cols.T).reshape(weight.shape), d_mat.sum(axis=1))
        dx = None
        if input_grad:
            w_mat = weight.reshape(self.out_channels, -1)
            dcols = w_mat.T.dot(d_mat)
            dx = col2im(dcols, x_shape, self.kernel, self.stride,
                        self.padding, dout.shape[2:])
        return dx, grads


class MaxPool2d(Layer):
    """Non-overlapping max pooling (stride = window); ties go to the lowest index."""

    def __init__(self, window):
        self.window = int(window)

    def compute_output_shape(self, input_shape):
        if len(input_shape) != 3:
            return None
        c, h, w = input_shape
        if h < self.window or w < self.window:
            return None
        return (c, h // self.window, w // self.window)

    def expected_input_shape(self):
        return ('*', '*', '*')

    def call(self, x, block=None):
        n, c, h, w = x.shape
        p = self.window
        ho, wo = h // p, w // p
        windows = x[:, :, :ho * p, :wo * p].reshape(n, c, ho, p, wo, p)
        windows = windows.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, p * p)
        argmax = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, argmax[..., np.newaxis], axis=-1)
        return out[..., 0], (x.shape, argmax)

    def backward(self, dout, cache, block=None, input_grad=True,
                 param_grad=True):
        if not input_grad:
            return None, None
        x_shape, argmax = cache
        n, c, h, w = x_shape
        p = self.window
        ho, wo = argmax.shape[2:]
        scattered = np.zeros((n, c, ho, wo, p * p))
        np.put_along_axis(scattered, argmax[..., np.newaxis],
                          dout[..., np.newaxis], axis=-1)
        scattered = scattered.reshape(n, c, ho, wo, p, p).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape)
        dx[:, :, :ho * p, :wo * p] = scattered.reshape(n, c, ho * p, wo * p)
        return dx, None


class Relu(Layer):

    def call(self, x, block=None):
        active = x > 0
        return x * active, active

    def backward(self, dout, cache, block=None, input_grad=True,
                 param_grad=True):
        return (dout * cache if input_grad else None), None


class Flatten(Layer):

    def compute_output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def call(self, x, block=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache, block=None, input_grad=True,
                 param_grad=True):
        return (dout.reshape(cache) if input_grad else None), None


class SoftmaxXent(Layer):
    """Softmax followed by the mean cross-entropy loss.

    ``call`` returns the class probabilities; the loss and its gradient with
    respect to the logits are computed by ``loss`` and ``backward``.
    """

    def __init__(self, classes):
        self.classes = int(classes)

    def compute_output_shape(self, input_shape):
        if tuple(input_shape) != (self.classes,):
            return None
        return (self.classes,)

    def expected_input_shape(self):
        return (self.classes,)

    def call(self, x, block=None):
        shifted = x - x.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
        return probs, shifted

    def sample_losses(self, shifted, labels):
        """Per-sample cross-entropy from max-shifted logits."""
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        return log_norm - shifted[np.arange(len(labels)), labels]

    def backward(self, probs, labels, block=None, input_grad=True,
                 param_grad=True):
        dlogits = probs.copy()
        dlogits[np.arange(len(labels)), labels] -= 1.
        return dlogits / len(labels), None


def _padded(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                  mode='constant')


def im2col(x, kernel, stride, padding):
    """Unfold (N, C, H, W) into a (C*k*k, N*Ho*Wo) column matrix."""
    n, c, h, w = x.shape
    ho = (h - kernel + 2 * padding) // stride + 1
    wo = (w - kernel + 2 * padding) // stride + 1
    xp = _padded(x, padding)
    cols = np.empty((n, c, kernel, kernel, ho, wo))
    for i in range(kernel):
        i_max = i + stride * ho
        for j in range(kernel):
            j_max = j + stride * wo
            cols[:, :, i, j] = xp[:, :, i:i_max:stride, j:j_max:stride]
    cols = cols.transpose(1, 2, 3, 0, 4, 5).reshape(c * kernel * kernel, -1)
    return cols, (ho, wo)


def col2im(cols, x_shape, kernel, stride, padding, out_hw):
    """Fold a column matrix back, summing overlapping contributions."""
    n, c, h, w = x_shape
    ho, wo = out_hw
    cols = cols.reshape(c, kernel, kernel, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kernel):
        i_max = i + stride * ho
        for j in range(kernel):
            j_max = j + stride * wo
            dxp[:, :, i:i_max:stride, j:j_max:stride] += cols[:, :, i, j]
    if padding == 0:
        return dxp
    return dxp[:, :, padding:-padding, padding:-padding]
