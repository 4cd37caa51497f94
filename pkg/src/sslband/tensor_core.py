"""Dense forward/backward kernels for the fixed layer set of the classifier.

Activations are plain ``numpy`` arrays in NCHW layout (row-major, last axis
fastest). Every op preserves the dtype of its input, so the same code runs in
64-bit for gradient checks and 32-bit for training. Each forward function
returns ``(output, cache)``; the matching ``*_backward`` consumes the cache.

The layer classes at the bottom wrap those pairs with parameter and gradient
storage so a network can be an ordered list of layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericalError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


@dataclass
class FilterBank4:
    """Convolution weights indexed (filter, channel, row, col) plus their gradient."""

    weights: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ConfigError(f"filter bank must be 4-D, got shape {self.weights.shape}")
        if self.weights.shape[2] != self.weights.shape[3]:
            raise ConfigError("filter bank kernels must be square")
        if self.grad is None:
            self.grad = np.zeros_like(self.weights)

    @property
    def num_filters(self) -> int:
        return self.weights.shape[0]

    @property
    def num_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]


# ----------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0 or span % stride:
        raise ConfigError(
            f"input extent {size} incompatible with kernel {kernel}, stride {stride}, pad {pad}"
        )
    return span // stride + 1


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, stride: int = 1, pad: int = 0):
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (L, C, P, Q), no kernel flip."""
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigError("conv2d expects 4-D input and 4-D filters")
    n, c, h, wd = x.shape
    l, cw, p, q = w.shape
    if c != cw:
        raise ConfigError(f"input has {c} channels but filters expect {cw}")
    ho = conv_output_size(h, p, stride, pad)
    wo = conv_output_size(wd, q, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (p, q), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.reshape(1, l, 1, 1)
    out = np.ascontiguousarray(out)
    cache = (win, w, xp.shape, stride, pad, (ho, wo))
    return check_finite(out, "conv2d output"), cache


def conv2d_backward(grad_out: np.ndarray, cache):
    """Return ``(grad_input, grad_filters, grad_bias)``."""
    win, w, xp_shape, stride, pad, (ho, wo) = cache
    _, _, p, q = w.shape
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    # (N, H', W', C, P, Q): contribution of every output pixel to every tap
    gcols = np.tensordot(grad_out, w, axes=([1], [0]))
    grad_xp = np.zeros(xp_shape, dtype=grad_out.dtype)
    for i in range(p):
        for j in range(q):
            grad_xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        grad_xp = grad_xp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(grad_xp), grad_w, grad_b


# ----------------------------------------------------------------------------
# pointwise and pooling


def relu(x: np.ndarray):
    return np.maximum(x, 0), x


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at exactly zero is taken as zero
    return grad_out * (x > 0)


def maxpool2(x: np.ndarray):
    """2x2 max pooling with stride 2; ties go to the first element in scan order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    idx, shape = cache
    n, c, h, w = shape
    blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(blocks, idx[..., None], grad_out[..., None], axis=-1)
    return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def global_avg_pool(x: np.ndarray):
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(grad_out: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), shape).copy()


def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Affine map ``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    if x.shape[1] != weight.shape[0]:
        raise ConfigError(f"fully_connected: input dim {x.shape[1]} != weight rows {weight.shape[0]}")
    return check_finite(x @ weight + bias, "fully_connected output"), (x, weight)


def fully_connected_backward(grad_out: np.ndarray, cache):
    x, weight = cache
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ----------------------------------------------------------------------------
# batch normalization


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM


def _bn_axes(x: np.ndarray):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ConfigError(f"batchnorm expects 2-D or 4-D input, got {x.ndim}-D")


def batchnorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, running: RunningStats, train: bool):
    """Per-channel normalization. Training mode also updates ``running`` in place."""
    axes, bshape = _bn_axes(x)
    if train:
        m = x.size // x.shape[1]
        if m < 2:
            raise ConfigError("batchnorm in training mode needs at least 2 values per channel")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        mom = running.momentum
        running.mean[...] = mom * running.mean + (1 - mom) * mean
        running.var[...] = mom * running.var + (1 - mom) * var
    else:
        mean, var = running.mean, running.var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    return check_finite(out, "batchnorm output"), (xhat, inv_std.astype(x.dtype), gamma, train)


def batchnorm_backward(grad_out: np.ndarray, cache):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma, train = cache
    axes, bshape = _bn_axes(grad_out)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    dxhat = grad_out * gamma.reshape(bshape)
    if not train:
        return dxhat * inv_std.reshape(bshape), grad_gamma, grad_beta
    m = grad_out.size // grad_out.shape[1]
    s1 = dxhat.sum(axis=axes).reshape(bshape)
    s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
    grad_x = inv_std.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)
    return grad_x, grad_gamma, grad_beta


# ----------------------------------------------------------------------------
# layers


class Layer:
    """Stateful wrapper: ``forward`` caches what ``backward`` needs."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable persistent state (saved in checkpoints)."""
        return {}

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.zero_grad()
        return self


class Conv2d(Layer):
    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None, stride: int = 1, pad: int | None = None):
        super().__init__()
        FilterBank4(weight)  # shape validation
        if pad is None:
            pad = (weight.shape[2] - 1) // 2
        self.stride, self.pad = stride, pad
        self.params = {"weight": weight, "bias": np.zeros(weight.shape[0], weight.dtype) if bias is None else bias}
        self.zero_grad()

    @property
    def bank(self) -> FilterBank4:
        """Live view on the weight and gradient arrays."""
        return FilterBank4(self.params["weight"], self.grads["weight"])

    def forward(self, x, train=False):
        out, self._cache = conv2d(x, self.params["weight"], self.params["bias"], self.stride, self.pad)
        return out

    def backward(self, grad_out):
        gx, gw, gb = conv2d_backward(grad_out, self._cache)
        self.grads["weight"] += gw
        self.grads["bias"] += gb
        return gx


class BatchNorm(Layer):
    def __init__(self, channels: int, dtype=np.float64):
        super().__init__()
        self.params = {"gamma": np.ones(channels, dtype), "beta": np.zeros(channels, dtype)}
        self.running = RunningStats(np.zeros(channels, dtype), np.ones(channels, dtype))
        self.zero_grad()

    def forward(self, x, train=False):
        out, self._cache = batchnorm(x, self.params["gamma"], self.params["beta"], self.running, train)
        return out

    def backward(self, grad_out):
        gx, gg, gb = batchnorm_backward(grad_out, self._cache)
        self.grads["gamma"] += gg
        self.grads["beta"] += gb
        return gx

    def buffers(self):
        return {"running_mean": self.running.mean, "running_var": self.running.var}

    def astype(self, dtype):
        super().astype(dtype)
        self.running.mean = self.running.mean.astype(dtype)
        self.running.var = self.running.var.astype(dtype)
        return self


class ReLU(Layer):
    def forward(self, x, train=False):
        out, self._cache = relu(x)
        return out

    def backward(self, grad_out):
        return relu_backward(grad_out, self._cache)


class MaxPool2(Layer):
    def forward(self, x, train=False):
        out, self._cache = maxpool2(x)
        return out

    def backward(self, grad_out):
        return maxpool2_backward(grad_out, self._cache)


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        out, self._cache = global_avg_pool(x)
        return out

    def backward(self, grad_out):
        return global_avg_pool_backward(grad_out, self._cache)


class Flatten(Layer):
    def forward(self, x, train=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._cache)


class Linear(Layer):
    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        super().__init__()
        self.params = {"weight": weight, "bias": np.zeros(weight.shape[1], weight.dtype) if bias is None else bias}
        self.zero_grad()

    def forward(self, x, train=False):
        out, self._cache = fully_connected(x, self.params["weight"], self.params["bias"])
        return out

    def backward(self, grad_out):
        gx, gw, gb = fully_connected_backward(grad_out, self._cache)
        self.grads["weight"] += gw
        self.grads["bias"] += gb
        return gx
