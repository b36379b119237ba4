"""
Network Layers

Each layer caches what its backward pass needs during forward, and
backward returns the gradient with respect to its input while writing
parameter gradients into views of the network's flat gradient buffer.
"""
from typing import List, Tuple

import numpy as np

from modules.errors import PipelineStateError


class Layer:
    """Base layer: forward(x) -> y, backward(dy) -> dx."""

    def __init__(self):
        self._cache = None

    def param_shapes(self) -> List[Tuple[int, ...]]:
        """Shapes of this layer's parameters, in binding order."""
        return []

    def bind(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        """Attach views into the network's flat parameter/gradient buffers."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise PipelineStateError(f"{type(self).__name__}.backward called before forward")
        return self._cache


class Conv2d(Layer):
    """
    Stride-1 convolution with zero "same" padding.

    Weights are (out, in, k, k); the forward pass gathers k x k windows
    into a column matrix and multiplies once.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.weight = None
        self.bias = None
        self.grad_weight = None
        self.grad_bias = None

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size * self.kernel_size

    def param_shapes(self):
        k = self.kernel_size
        return [(self.out_channels, self.in_channels, k, k), (self.out_channels,)]

    def bind(self, params, grads):
        self.weight, self.bias = params
        self.grad_weight, self.grad_bias = grads

    def _columns(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        k = self.kernel_size
        pad = k // 2
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
        # (n, c, h, w, k, k) -> (n, h, w, c, k, k) -> (n*h*w, c*k*k)
        return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)

    def forward(self, x):
        n, _, h, w = x.shape
        cols = self._columns(x)
        out = cols @ self.weight.reshape(self.out_channels, -1).T + self.bias
        self._cache = (cols, x.shape)
        return out.reshape(n, h, w, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad):
        cols, in_shape = self._cached()
        n, c, h, w = in_shape
        k = self.kernel_size
        pad = k // 2

        g = grad.transpose(0, 2, 3, 1).reshape(n * h * w, self.out_channels)
        self.grad_weight += (g.T @ cols).reshape(self.weight.shape)
        self.grad_bias += g.sum(axis=0)

        dcols = (g @ self.weight.reshape(self.out_channels, -1)).reshape(n, h, w, c, k, k)
        dpadded = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        for i in range(k):
            for j in range(k):
                dpadded[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dpadded[:, :, pad:pad + h, pad:pad + w]


class Tanh(Layer):

    def forward(self, x):
        y = np.tanh(x)
        self._cache = y
        return y

    def backward(self, grad):
        y = self._cached()
        return grad * (1.0 - y * y)


class ReLU(Layer):

    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, grad):
        return grad * self._cached()


class AvgPool2d(Layer):
    """2 x 2 average pooling with stride 2."""

    def forward(self, x):
        n, c, h, w = x.shape
        self._cache = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, grad):
        self._cached()
        return np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) * 0.25


class Upsample2d(Layer):
    """Nearest-neighbour 2x upsampling."""

    def forward(self, x):
        self._cache = x.shape
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

    def backward(self, grad):
        n, c, h, w = self._cached()
        return grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


ACTIVATIONS = {"tanh": Tanh, "relu": ReLU}


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    """Numerically stable softmax along the class axis."""
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)
