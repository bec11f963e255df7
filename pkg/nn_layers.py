#!/usr/bin/env python3
"""
Neural Network Layers
A small numpy toolkit: parameter tensors, the layer set the reconstructor and
discriminator are built from (batch-first, NCHW images), spectral
normalization, gradient reversal and the Adam optimizer.

Backward passes are wired by hand: every layer caches what it needs in
`forward` and returns the input gradient from `backward`, accumulating
parameter gradients into `Tensor.grad`.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils import ValidationError

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-12
AUDIT_POWER_ITERATIONS = 20


class Tensor:
    """Dense array plus a same-shape gradient buffer."""

    def __init__(self, data: np.ndarray, name: str = '', requires_grad: bool = True):
        self.data = np.asarray(data)
        self.name = name
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.shape}, dtype={self.data.dtype})"


def _check_shape(layer: 'Module', x: np.ndarray, expected: Sequence[Optional[int]]):
    actual = x.shape
    ok = len(actual) == len(expected) and all(e is None or e == a for e, a in zip(expected, actual))
    if not ok:
        shown = tuple('N' if e is None else e for e in expected)
        raise ValidationError(f"Layer '{layer.name}' expected input shape {shown}, got {actual}")


class Module:
    """Base class: parameters, persistent buffers and children."""

    def __init__(self, name: str = ''):
        self.name = name or type(self).__name__.lower()
        self.training = True

    def children(self) -> List['Module']:
        return []

    def own_parameters(self) -> List[Tuple[str, Tensor]]:
        return []

    def own_buffers(self) -> List[Tuple[str, Tensor]]:
        return []

    def named_parameters(self, prefix: str = '') -> List[Tuple[str, Tensor]]:
        base = f"{prefix}{self.name}."
        named = [(base + n, t) for n, t in self.own_parameters()]
        for child in self.children():
            named.extend(child.named_parameters(base))
        return named

    def named_buffers(self, prefix: str = '') -> List[Tuple[str, Tensor]]:
        base = f"{prefix}{self.name}."
        named = [(base + n, t) for n, t in self.own_buffers()]
        for child in self.children():
            named.extend(child.named_buffers(base))
        return named

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_training(self, training: bool):
        self.training = training
        for child in self.children():
            child.set_training(training)

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)


class SpectralNorm:
    """
    Weight transform W -> W / sigma, sigma estimated by power iteration.

    The left singular vector estimate `u` persists across calls (it is
    checkpointed as a buffer). Training calls run `power_iterations` steps
    and update `u`; evaluation reuses the stored `u`.
    """

    def __init__(self, out_dim: int, rng: np.random.Generator, dtype=np.float64,
                 power_iterations: int = 1):
        if power_iterations < 1:
            raise ValidationError(f"Spectral norm needs at least one power iteration, got {power_iterations}")
        u = rng.normal(size=out_dim)
        self.u = Tensor((u / max(np.linalg.norm(u), SIGMA_FLOOR)).astype(dtype), 'sn_u', requires_grad=False)
        self.power_iterations = power_iterations
        self._cache = None

    def normalize(self, weight: np.ndarray, update: bool = True,
                  iterations: Optional[int] = None) -> Tuple[np.ndarray, float]:
        """(W / sigma, sigma) for a weight whose first axis is the output dimension."""
        w2 = weight.reshape(weight.shape[0], -1)
        u = self.u.data.astype(np.float64)
        w64 = w2.astype(np.float64)
        steps = (iterations or self.power_iterations) if update else 0
        v = w64.T @ u
        v /= max(np.linalg.norm(v), SIGMA_FLOOR)
        for _ in range(steps):
            u = w64 @ v
            u /= max(np.linalg.norm(u), SIGMA_FLOOR)
            v = w64.T @ u
            v /= max(np.linalg.norm(v), SIGMA_FLOOR)
        sigma = max(float(u @ w64 @ v), SIGMA_FLOOR)
        if update:
            self.u.data[...] = u.astype(self.u.data.dtype)
        self._cache = (u, v, sigma, w2)
        return (weight / sigma).astype(weight.dtype), sigma

    def backward(self, grad_normalized: np.ndarray) -> np.ndarray:
        """dL/dW given dL/d(W / sigma), with u and v held fixed."""
        u, v, sigma, w2 = self._cache
        g2 = grad_normalized.reshape(w2.shape).astype(np.float64)
        inner = float(np.sum(g2 * w2))
        dw = g2 / sigma - (inner / sigma ** 2) * np.outer(u, v)
        return dw.reshape(grad_normalized.shape).astype(grad_normalized.dtype)


def spectral_normalize(weight: np.ndarray, u: np.ndarray, iterations: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Functional spectral normalization.

    Args:
        weight: Raw weight, first axis = output dimension
        u: Current left singular vector estimate (updated copy is returned)
        iterations: Power iterations to run

    Returns:
        (normalized weight, updated u)
    """
    state = SpectralNorm(weight.shape[0], np.random.default_rng(0), np.float64, max(1, iterations))
    state.u.data[...] = np.asarray(u, dtype=np.float64)
    normalized, _ = state.normalize(np.asarray(weight, dtype=np.float64), update=True, iterations=iterations)
    return normalized, state.u.data.copy()


class WeightedLayer(Module):
    """A layer with a `weight` and optional `bias`; supports spectral normalization."""

    def __init__(self, name: str = ''):
        super().__init__(name)
        self.weight: Optional[Tensor] = None
        self.bias: Optional[Tensor] = None
        self.spectral: Optional[SpectralNorm] = None

    def own_parameters(self):
        params = [('weight', self.weight)]
        if self.bias is not None:
            params.append(('bias', self.bias))
        return params

    def own_buffers(self):
        return [('sn_u', self.spectral.u)] if self.spectral is not None else []

    def effective_weight(self) -> np.ndarray:
        if self.spectral is None:
            return self.weight.data
        normalized, _ = self.spectral.normalize(self.weight.data, update=self.training)
        return normalized

    def accumulate_weight_grad(self, grad: np.ndarray):
        if self.spectral is not None:
            grad = self.spectral.backward(grad)
        self.weight.grad += grad


def apply_spectral_norm(layer: WeightedLayer, rng: np.random.Generator,
                        power_iterations: int = 1) -> WeightedLayer:
    layer.spectral = SpectralNorm(layer.weight.shape[0], rng, layer.weight.data.dtype, power_iterations)
    return layer


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.normal(size=shape) * np.sqrt(2.0 / max(fan_in, 1))).astype(dtype)


class Linear(WeightedLayer):
    """y = x W^T + b for x of shape (N, in_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float64, bias: bool = True, name: str = 'linear'):
        super().__init__(name)
        if out_features < 1 or in_features < 1:
            raise ValidationError(f"Linear layer '{name}' needs positive sizes, got {in_features}->{out_features}")
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(_he_normal(rng, (out_features, in_features), in_features, dtype), 'weight')
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), 'bias') if bias else None
        self._x = None
        self._w = None

    def forward(self, x):
        _check_shape(self, x, (None, self.in_features))
        self._x = x
        self._w = self.effective_weight()
        y = x @ self._w.T
        if self.bias is not None:
            y = y + self.bias.data
        return y

    def backward(self, grad):
        self.accumulate_weight_grad(grad.T @ self._x)
        if self.bias is not None:
            self.bias.grad += grad.sum(axis=0)
        return grad @ self._w


def _im2col(xp: np.ndarray, kernel: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N * out_h * out_w, C * k * k) patch matrix."""
    windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    windows = windows[:, :, :out_h, :out_w]
    n, c = xp.shape[:2]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kernel * kernel)


def _col2im(cols: np.ndarray, shape: Tuple[int, int, int, int], kernel: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    """Adjoint of `_im2col`: scatter-add patch rows back into an (N, C, Hp, Wp) array."""
    n, c, hp, wp = shape
    patches = cols.reshape(n, out_h, out_w, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += patches[..., i, j]
    return out


class Conv2d(WeightedLayer):
    """conv(a, b, c): `a` feature maps, b x b kernel, stride c, 'same'-style padding (b - 1) // 2."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int,
                 rng: np.random.Generator, dtype=np.float64, padding: Optional[int] = None,
                 bias: bool = True, name: str = 'conv'):
        super().__init__(name)
        if kernel < 1 or stride < 1 or out_channels < 1:
            raise ValidationError(f"Conv layer '{name}': kernel, stride and channels must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(_he_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype), 'weight')
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), 'bias') if bias else None
        self._cache = None

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel) // self.stride + 1

    def forward(self, x):
        _check_shape(self, x, (None, self.in_channels, None, None))
        n, _, h, w = x.shape
        oh, ow = self.output_size(h), self.output_size(w)
        if oh < 1 or ow < 1:
            raise ValidationError(f"Layer '{self.name}': input {h}x{w} too small for kernel {self.kernel}")
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = _im2col(xp, self.kernel, self.stride, oh, ow)
        weight = self.effective_weight()
        wmat = weight.reshape(self.out_channels, -1)
        y = cols @ wmat.T
        if self.bias is not None:
            y = y + self.bias.data
        self._cache = (xp.shape, cols, wmat, oh, ow)
        return y.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad):
        xp_shape, cols, wmat, oh, ow = self._cache
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        self.accumulate_weight_grad((g2.T @ cols).reshape(self.weight.shape))
        if self.bias is not None:
            self.bias.grad += g2.sum(axis=0)
        dxp = _col2im(g2 @ wmat, xp_shape, self.kernel, self.stride, oh, ow)
        p = self.padding
        return dxp[:, :, p:xp_shape[2] - p, p:xp_shape[3] - p] if p else dxp


class Deconv2d(WeightedLayer):
    """
    deconv(a, b, c): transposed convolution with `a` feature maps, b x b kernel, stride c.

    Output size is (H - 1) * c - 2 * padding + b, padding (b - c + 1) // 2, so
    deconv(., 4, 2) doubles the input and deconv(., 3, 1) keeps it.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int,
                 rng: np.random.Generator, dtype=np.float64, padding: Optional[int] = None,
                 bias: bool = True, name: str = 'deconv'):
        super().__init__(name)
        if kernel < 1 or stride < 1 or out_channels < 1:
            raise ValidationError(f"Deconv layer '{name}': kernel, stride and channels must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = max(0, (kernel - stride + 1) // 2) if padding is None else padding
        fan_in = in_channels * kernel * kernel // (stride * stride)
        self.weight = Tensor(_he_normal(rng, (in_channels, out_channels, kernel, kernel), fan_in, dtype), 'weight')
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), 'bias') if bias else None
        self._cache = None

    def output_size(self, size: int) -> int:
        return (size - 1) * self.stride - 2 * self.padding + self.kernel

    def forward(self, x):
        _check_shape(self, x, (None, self.in_channels, None, None))
        n, _, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.padding
        full_h, full_w = (h - 1) * s + k, (w - 1) * s + k
        weight = self.effective_weight()
        wmat = weight.reshape(self.in_channels, -1)
        x2 = x.transpose(0, 2, 3, 1).reshape(-1, self.in_channels)
        full = _col2im(x2 @ wmat, (n, self.out_channels, full_h, full_w), k, s, h, w)
        y = full[:, :, p:full_h - p, p:full_w - p]
        if self.bias is not None:
            y = y + self.bias.data[None, :, None, None]
        self._cache = (x2, wmat, h, w, full_h, full_w)
        return y

    def backward(self, grad):
        x2, wmat, h, w, full_h, full_w = self._cache
        n = grad.shape[0]
        p = self.padding
        if self.bias is not None:
            self.bias.grad += grad.sum(axis=(0, 2, 3))
        g_full = np.pad(grad, ((0, 0), (0, 0), (p, p), (p, p))) if p else grad
        cols = _im2col(g_full, self.kernel, self.stride, h, w)
        self.accumulate_weight_grad((x2.T @ cols).reshape(self.weight.shape))
        dx = cols @ wmat.T
        return dx.reshape(n, h, w, self.in_channels).transpose(0, 3, 1, 2)


class Embedding(WeightedLayer):
    """Class-label lookup table (n_classes, dim)."""

    def __init__(self, n_classes: int, dim: int, rng: np.random.Generator, dtype=np.float64,
                 name: str = 'embed'):
        super().__init__(name)
        self.n_classes = n_classes
        self.weight = Tensor((rng.normal(size=(n_classes, dim)) / np.sqrt(dim)).astype(dtype), 'weight')
        self._labels = None
        self._w = None

    def forward(self, labels):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValidationError(f"Layer '{self.name}': class labels must be in [0, {self.n_classes})")
        self._labels = labels
        self._w = self.effective_weight()
        return self._w[labels]

    def backward(self, grad):
        dw = np.zeros_like(self.weight.data)
        np.add.at(dw, self._labels, grad)
        self.accumulate_weight_grad(dw)
        return None


class BatchNorm(Module):
    """Batch normalization over (N, C) or (N, C, H, W) inputs with running statistics."""

    def __init__(self, channels: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5,
                 name: str = 'batchnorm'):
        super().__init__(name)
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), 'gamma')
        self.beta = Tensor(np.zeros(channels, dtype=dtype), 'beta')
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype), 'running_mean', requires_grad=False)
        self.running_var = Tensor(np.ones(channels, dtype=dtype), 'running_var', requires_grad=False)
        self._cache = None

    def own_parameters(self):
        return [('gamma', self.gamma), ('beta', self.beta)]

    def own_buffers(self):
        return [('running_mean', self.running_mean), ('running_var', self.running_var)]

    def _view(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3), (1, -1) if x.ndim == 2 else (1, -1, 1, 1)

    def forward(self, x):
        if x.ndim not in (2, 4) or x.shape[1] != self.channels:
            raise ValidationError(f"Layer '{self.name}' expected (N, {self.channels}[, H, W]), got {x.shape}")
        axes, view = self._view(x)
        if self.training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean.data[...] = (1 - m) * self.running_mean.data + m * mean
            self.running_var.data[...] = (1 - m) * self.running_var.data + m * var
        else:
            mean, var = self.running_mean.data, self.running_var.data
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean.reshape(view)) * inv_std.reshape(view)
        self._cache = (x_hat, inv_std, axes, view)
        return self.gamma.data.reshape(view) * x_hat + self.beta.data.reshape(view)

    def backward(self, grad):
        x_hat, inv_std, axes, view = self._cache
        self.gamma.grad += np.sum(grad * x_hat, axis=axes)
        self.beta.grad += np.sum(grad, axis=axes)
        g_hat = grad * self.gamma.data.reshape(view)
        if not self.training:
            return g_hat * inv_std.reshape(view)
        mean_g = g_hat.mean(axis=axes).reshape(view)
        mean_gx = (g_hat * x_hat).mean(axis=axes).reshape(view)
        return (g_hat - mean_g - x_hat * mean_gx) * inv_std.reshape(view)


class ReLU(Module):
    def __init__(self, name: str = 'relu'):
        super().__init__(name)
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return np.where(self._mask, grad, 0).astype(grad.dtype)


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.2, name: str = 'leaky_relu'):
        super().__init__(name)
        self.slope = slope
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, self.slope * x).astype(x.dtype)

    def backward(self, grad):
        return np.where(self._mask, grad, self.slope * grad).astype(grad.dtype)


class Sigmoid(Module):
    def __init__(self, name: str = 'sigmoid'):
        super().__init__(name)
        self._y = None

    def forward(self, x):
        self._y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self._y

    def backward(self, grad):
        return grad * self._y * (1 - self._y)


class Tanh(Module):
    def __init__(self, name: str = 'tanh'):
        super().__init__(name)
        self._y = None

    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, grad):
        return grad * (1 - self._y ** 2)


class Reshape(Module):
    """reshape(a): (N, C*a*a) -> (N, C, a, a)."""

    def __init__(self, size: int, name: str = 'reshape'):
        super().__init__(name)
        self.size = size
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        n, d = x.shape[0], int(np.prod(x.shape[1:]))
        if d % (self.size * self.size):
            raise ValidationError(f"Layer '{self.name}': {d} features do not reshape to (C, {self.size}, {self.size})")
        return x.reshape(n, d // (self.size * self.size), self.size, self.size)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Flatten(Module):
    def __init__(self, name: str = 'flatten'):
        super().__init__(name)
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Tile(Module):
    """tile(a): (N, D) -> (N, D, a, a), the vector repeated at every position."""

    def __init__(self, size: int, name: str = 'tile'):
        super().__init__(name)
        self.size = size

    def forward(self, x):
        return np.broadcast_to(x[:, :, None, None], x.shape + (self.size, self.size)).copy()

    def backward(self, grad):
        return grad.sum(axis=(2, 3))


class Concat(Module):
    """
    Channel concatenation with a side input.

    Set `extra` before `forward`; after `backward` the side input's gradient
    is in `extra_grad`.
    """

    def __init__(self, extra_channels: int, name: str = 'concat'):
        super().__init__(name)
        self.extra_channels = extra_channels
        self.extra: Optional[np.ndarray] = None
        self.extra_grad: Optional[np.ndarray] = None
        self._split = None

    def forward(self, x):
        if self.extra is None:
            raise ValidationError(f"Layer '{self.name}' has no side input set")
        if self.extra.shape[1] != self.extra_channels or self.extra.shape[2:] != x.shape[2:]:
            raise ValidationError(f"Layer '{self.name}': side input {self.extra.shape} does not fit {x.shape}")
        self._split = x.shape[1]
        return np.concatenate([x, self.extra.astype(x.dtype)], axis=1)

    def backward(self, grad):
        self.extra_grad = grad[:, self._split:]
        return grad[:, :self._split]


class GlobalAvgPool(Module):
    """(N, C, H, W) -> (N, C)."""

    def __init__(self, name: str = 'avgpool'):
        super().__init__(name)
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._shape
        return np.broadcast_to(grad[:, :, None, None] / (h * w), self._shape).astype(grad.dtype)


class GradientReversal(Module):
    """Identity forward; backward multiplies the gradient by -lambda."""

    def __init__(self, scale: float, name: str = 'grad_reverse'):
        super().__init__(name)
        if scale < 0:
            raise ValidationError(f"Gradient reversal scale must be >= 0, got {scale}")
        self.scale = float(scale)

    def forward(self, x):
        return x

    def backward(self, grad):
        return -self.scale * grad


def gradient_reversal(scale: float) -> GradientReversal:
    return GradientReversal(scale)


class Sequential(Module):
    def __init__(self, layers: Iterable[Module], name: str = 'seq'):
        super().__init__(name)
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


LAYER_KINDS = ('linear', 'conv', 'deconv', 'batchnorm', 'relu', 'leaky_relu', 'reshape', 'tile',
               'concat', 'sigmoid', 'tanh', 'avgpool', 'flatten')


@dataclass(frozen=True)
class LayerSpec:
    """
    One entry of an architecture listing.

    `args` follow the layer legend: linear(a) a outputs; conv/deconv(a, b, c)
    a maps, b x b kernel, stride c; leaky_relu(slope); reshape(a) / tile(a)
    to a x a; concat(a) adds a side-input channels.
    """
    kind: str
    args: Tuple = ()
    spectral_norm: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"Unknown layer kind '{self.kind}'")
        if self.kind in ('conv', 'deconv'):
            if len(self.args) != 3 or self.args[0] < 1 or self.args[1] < 1 or self.args[2] < 1:
                raise ValidationError(f"{self.kind}{self.args}: needs (maps >= 1, kernel >= 1, stride >= 1)")
        if self.kind == 'linear' and (len(self.args) != 1 or self.args[0] < 1):
            raise ValidationError(f"linear{self.args}: needs one output size >= 1")

    def describe(self) -> str:
        args = ', '.join(str(a) for a in self.args)
        return f"{self.kind}({args})" if args else self.kind


def build_layers(specs: Sequence[LayerSpec], in_shape: Tuple[int, ...], rng: np.random.Generator,
                 dtype=np.float64, power_iterations: int = 1,
                 name: str = 'seq') -> Tuple[Sequential, Tuple[int, ...]]:
    """
    Instantiate a layer listing for per-sample input shape `in_shape`.

    Returns:
        (Sequential, per-sample output shape)
    """
    layers: List[Module] = []
    shape = tuple(in_shape)
    for i, spec in enumerate(specs):
        layer_name = f"{i}_{spec.kind}"
        if spec.kind == 'linear':
            layer = Linear(int(np.prod(shape)), spec.args[0], rng, dtype, name=layer_name)
            shape = (spec.args[0],)
        elif spec.kind == 'conv':
            layer = Conv2d(shape[0], spec.args[0], spec.args[1], spec.args[2], rng, dtype, name=layer_name)
            shape = (spec.args[0], layer.output_size(shape[1]), layer.output_size(shape[2]))
        elif spec.kind == 'deconv':
            layer = Deconv2d(shape[0], spec.args[0], spec.args[1], spec.args[2], rng, dtype, name=layer_name)
            shape = (spec.args[0], layer.output_size(shape[1]), layer.output_size(shape[2]))
        elif spec.kind == 'batchnorm':
            layer = BatchNorm(shape[0], dtype, name=layer_name)
        elif spec.kind == 'relu':
            layer = ReLU(layer_name)
        elif spec.kind == 'leaky_relu':
            layer = LeakyReLU(spec.args[0] if spec.args else 0.2, layer_name)
        elif spec.kind == 'sigmoid':
            layer = Sigmoid(layer_name)
        elif spec.kind == 'tanh':
            layer = Tanh(layer_name)
        elif spec.kind == 'reshape':
            a = spec.args[0]
            layer = Reshape(a, layer_name)
            shape = (int(np.prod(shape)) // (a * a), a, a)
        elif spec.kind == 'tile':
            a = spec.args[0]
            layer = Tile(a, layer_name)
            shape = (shape[0], a, a)
        elif spec.kind == 'concat':
            layer = Concat(spec.args[0], layer_name)
            shape = (shape[0] + spec.args[0],) + shape[1:]
        elif spec.kind == 'avgpool':
            layer = GlobalAvgPool(layer_name)
            shape = (shape[0],)
        else:
            layer = Flatten(layer_name)
            shape = (int(np.prod(shape)),)
        if spec.spectral_norm:
            if not isinstance(layer, WeightedLayer):
                raise ValidationError(f"Spectral norm requested on weightless layer {spec.describe()}")
            apply_spectral_norm(layer, rng, power_iterations)
        layers.append(layer)
    return Sequential(layers, name), shape


@dataclass
class AdamState:
    alpha: float = 4e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update applied to `params` in place."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ValidationError(f"Adam state tracks {len(state.m)} parameters, got {len(params)}/{len(grads)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValidationError(f"Adam: gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p -= (state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


class Adam:
    """Adam over a fixed list of parameter tensors, reading `Tensor.grad`."""

    def __init__(self, params: Sequence[Tensor], alpha: float = 4e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(alpha, beta1, beta2, eps, 0,
                               [np.zeros_like(p.data) for p in self.params],
                               [np.zeros_like(p.data) for p in self.params])

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def moment_tensors(self, prefix: str) -> List[Tuple[str, np.ndarray]]:
        """Moment buffers named for checkpointing."""
        named = []
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            named.append((f"{prefix}.m.{i}", m))
            named.append((f"{prefix}.v.{i}", v))
        return named


def gradient_norms(module: Module) -> Dict[str, float]:
    """Per-parameter gradient L2 norms, used by the dead-branch audit."""
    return {name: float(np.linalg.norm(t.grad)) for name, t in module.named_parameters()}
