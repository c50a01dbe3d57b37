"""Layer implementations for the float64 feed-forward engine.

Every layer follows the same manual-backprop protocol: ``forward``
caches whatever the gradient needs, ``backward`` consumes the upstream
gradient with respect to the layer's output and returns the gradient
with respect to its input, filling ``self.grads`` for parameters along
the way.  All arithmetic is float64 and bitwise deterministic.

Conv2D and MaxPool are built on ``sliding_window_view`` so the heavy
lifting lands in one BLAS matmul (im2col) per direction.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeMismatch",
    "Dense",
    "Conv2D",
    "BatchNorm",
    "ReLU",
    "MaxPool",
    "ResidualAdd",
    "Flatten",
    "Softmax",
]


class ShapeMismatch(ValueError):
    """An array arrived with a shape the graph was not built for."""


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params = {
            "W": np.zeros((out_features, in_features)),
            "b": np.zeros(out_features),
        }

    def forward(self, x, training=False):
        self._x = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, dy):
        self.grads = {"W": dy.T @ self._x, "b": dy.sum(axis=0)}
        return dy @ self.params["W"]


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.params = {
            "W": np.zeros((out_channels, in_channels, kernel, kernel)),
            "b": np.zeros(out_channels),
        }

    def _pad(self, x):
        p = self.padding
        if p == 0:
            return x
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    def forward(self, x, training=False):
        k, s = self.kernel, self.stride
        xp = self._pad(x)
        n = x.shape[0]
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        oh, ow = win.shape[2], win.shape[3]
        # [n, oh, ow, c*k*k] im2col block, cached for the weight gradient
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh, ow, -1)
        self._cols = cols
        self._x_shape = x.shape
        wflat = self.params["W"].reshape(self.out_channels, -1)
        y = cols @ wflat.T + self.params["b"]
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2))

    def backward(self, dy):
        k, s, p = self.kernel, self.stride, self.padding
        n, _, oh, ow = dy.shape
        dyf = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, self.out_channels)
        cols2 = self._cols.reshape(-1, self._cols.shape[-1])
        self.grads = {
            "W": (dyf.T @ cols2).reshape(self.params["W"].shape),
            "b": dyf.sum(axis=0),
        }
        dcols = (dyf @ self.params["W"].reshape(self.out_channels, -1)).reshape(
            n, oh, ow, self.in_channels, k, k
        )
        nh, nw = self._x_shape[2] + 2 * p, self._x_shape[3] + 2 * p
        dxp = np.zeros((n, self.in_channels, nh, nw))
        # scatter the column gradient back; kernel offsets never overlap
        # within one (i, j) slice so strided adds are race-free
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            return dxp[:, :, p:-p, p:-p]
        return dxp


class BatchNorm(Layer):
    """Per-channel normalization over the batch (and spatial) axes.

    Training mode normalizes with biased batch statistics and folds them
    into the running estimates as (1 - momentum) * old + momentum * new;
    evaluation mode applies the running estimates.
    """

    kind = "batchnorm"

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(num_features), "beta": np.zeros(num_features)}
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def _axes_and_shape(self, x):
        if x.ndim == 2:
            return (0,), (1, -1)
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ShapeMismatch(f"batchnorm expects 2-D or 4-D input, got {x.ndim}-D")

    def forward(self, x, training=False):
        axes, bshape = self._axes_and_shape(x)
        g = self.params["gamma"].reshape(bshape)
        b = self.params["beta"].reshape(bshape)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean.reshape(bshape)) * inv.reshape(bshape)
            self._cache = (xhat, inv, axes, bshape, True, x.size // self.num_features)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.reshape(bshape)) * inv.reshape(bshape)
            self._cache = (xhat, inv, axes, bshape, False, x.size // self.num_features)
        return g * xhat + b

    def backward(self, dy):
        xhat, inv, axes, bshape, trained, count = self._cache
        g = self.params["gamma"].reshape(bshape)
        self.grads = {
            "gamma": (dy * xhat).sum(axis=axes),
            "beta": dy.sum(axis=axes),
        }
        if not trained:
            return dy * g * inv.reshape(bshape)
        sum_dy = dy.sum(axis=axes).reshape(bshape)
        sum_dy_xhat = (dy * xhat).sum(axis=axes).reshape(bshape)
        return (g * inv.reshape(bshape) / count) * (count * dy - sum_dy - xhat * sum_dy_xhat)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        self.grads = {}
        return np.where(self._mask, dy, 0.0)


class MaxPool(Layer):
    """Max pooling; ties resolve to the first maximal index in row-major
    window scan order (the argmax convention)."""

    kind = "maxpool"

    def __init__(self, pool: int = 2, stride: int | None = None):
        super().__init__()
        self.pool = pool
        self.stride = pool if stride is None else stride

    def forward(self, x, training=False):
        p, s = self.pool, self.stride
        win = sliding_window_view(x, (p, p), axis=(2, 3))[:, :, ::s, ::s]
        n, c, oh, ow = win.shape[:4]
        flat = win.reshape(n, c, oh, ow, p * p)
        self._idx = flat.argmax(axis=-1)
        self._x_shape = x.shape
        return np.take_along_axis(flat, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        self.grads = {}
        p, s = self.pool, self.stride
        n, c, oh, ow = dy.shape
        di, dj = np.divmod(self._idx, p)
        ni, ci, hi, wi = np.ogrid[:n, :c, :oh, :ow]
        habs = hi * s + di
        wabs = wi * s + dj
        dx = np.zeros(self._x_shape)
        np.add.at(dx, (np.broadcast_to(ni, dy.shape), np.broadcast_to(ci, dy.shape), habs, wabs), dy)
        return dx


class ResidualAdd(Layer):
    """Adds a stored skip activation to the incoming tensor."""

    kind = "residual_add"

    def __init__(self, skip_from: int):
        super().__init__()
        self.skip_from = skip_from

    def forward(self, x, skip=None, training=False):
        if skip is None or x.shape != skip.shape:
            got = None if skip is None else skip.shape
            raise ShapeMismatch(f"residual add needs equal shapes, got {x.shape} and {got}")
        return x + skip

    def backward(self, dy):
        # identity into both branches; the skip share is routed by the model
        self.grads = {}
        return dy


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        self.grads = {}
        return dy.reshape(self._shape)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training=False):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        self._out = e / e.sum(axis=1, keepdims=True)
        return self._out

    def backward(self, dy):
        # full Jacobian-vector product; the trainer normally bypasses
        # this through the fused softmax/log-likelihood identity
        self.grads = {}
        a = self._out
        return a * (dy - (dy * a).sum(axis=1, keepdims=True))
