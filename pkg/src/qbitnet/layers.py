"""Network layers with fake-quant forward passes and manual backward.

During training each quantized layer re-quantizes its real-valued master
weights on every forward (both value sets coexist in the graph) and
gradients reach the masters through the straight-through surrogates.
A separate "surrogate" pass mode replaces every quantizer by the smooth
function whose exact derivative the STE uses, which is what the
finite-difference gradient checks differentiate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quantize as qz
from .kernels import col2im, conv_out_size, im2col
from .quantize import QuantSpec


class Param:
    """A trainable array plus its gradient slot.

    decay marks parameters subject to L2 regularization (weights only,
    never batch-norm affine parameters or biases).
    """

    __slots__ = ("name", "value", "grad", "decay")

    def __init__(self, name: str, value: np.ndarray, decay: bool = False):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.decay = decay


@dataclass
class PassCtx:
    """Per-forward context: training toggles batch statistics, surrogate
    replaces quantizers by their smooth STE surrogates."""

    training: bool = True
    surrogate: bool = False


class Layer:
    kind = "base"

    def __init__(self, name: str):
        self.name = name

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, ctx: PassCtx):
        raise NotImplementedError

    def backward(self, cache, gy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError


def _init_weight(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Fan-in-scaled uniform init; small enough to keep tanh preprocessing
    in its linear regime at the start of training."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _QuantWeightMixin:
    """Shared weight-quantization plumbing for conv and dense layers."""

    def _effective_weight(self, surrogate: bool) -> np.ndarray:
        w = self.w.value
        k = self.wspec.k
        if k == qz.FULL_PRECISION:
            return w
        if surrogate:
            return np.clip(w, -1.0, 1.0) if k == 1 else np.tanh(w)
        return self.quantized_weights().reconstruct()

    def quantized_weights(self) -> qz.QuantizedTensor:
        """Fresh quantization of the masters (per-channel binarizer at
        1 bit, tanh pipeline otherwise)."""
        k = self.wspec.k
        if k == qz.FULL_PRECISION:
            raise ValueError(f"layer {self.name} is full precision")
        if k == 1:
            return qz.binarize_channels(self.w.value)
        return qz.quantize_weights(self.w.value, k)

    def _weight_ste(self, g_eff: np.ndarray) -> np.ndarray:
        """Route the effective-weight gradient back to the masters."""
        k = self.wspec.k
        if k == qz.FULL_PRECISION:
            return g_eff
        if k == 1:
            return qz.binarize_ste_grad(self.w.value, g_eff)
        return qz.quantize_weights_ste_grad(self.w.value, g_eff)


class Conv2D(Layer, _QuantWeightMixin):
    kind = "conv2d"

    def __init__(self, name, in_ch, out_ch, ksize, stride=1, pad=0,
                 wspec: QuantSpec | None = None, bias=False,
                 rng: np.random.Generator | None = None):
        super().__init__(name)
        self.in_ch, self.out_ch, self.ksize = in_ch, out_ch, ksize
        self.stride, self.pad = stride, pad
        self.wspec = wspec or QuantSpec(qz.FULL_PRECISION, "weight")
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * ksize * ksize
        self.w = Param(f"{name}.w", _init_weight(rng, (out_ch, in_ch, ksize, ksize), fan_in),
                       decay=True)
        self.b = Param(f"{name}.b", np.zeros(out_ch)) if bias else None

    def params(self):
        return [self.w] + ([self.b] if self.b else [])

    def forward(self, x, ctx):
        w_eff = self._effective_weight(ctx.surrogate)
        cols = im2col(x, self.ksize, self.ksize, self.stride, self.pad)
        wf = w_eff.reshape(self.out_ch, -1)
        out = wf @ cols
        n = x.shape[0]
        ho = conv_out_size(x.shape[2], self.ksize, self.stride, self.pad)
        wo = conv_out_size(x.shape[3], self.ksize, self.stride, self.pad)
        y = out.reshape(self.out_ch, n, ho, wo).transpose(1, 0, 2, 3)
        if self.b is not None:
            y = y + self.b.value.reshape(1, -1, 1, 1)
        return y, (x.shape, cols, wf)

    def backward(self, cache, gy):
        x_shape, cols, wf = cache
        gyf = gy.transpose(1, 0, 2, 3).reshape(self.out_ch, -1)
        g_eff = (gyf @ cols.T).reshape(self.w.value.shape)
        self.w.grad = self._weight_ste(g_eff)
        if self.b is not None:
            self.b.grad = gyf.sum(axis=1)
        gcols = wf.T @ gyf
        return col2im(gcols, x_shape, self.ksize, self.ksize, self.stride, self.pad)

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        if c != self.in_ch:
            raise ValueError(f"layer {self.name}: expects {self.in_ch} channels, got {c}")
        return (n, self.out_ch,
                conv_out_size(h, self.ksize, self.stride, self.pad),
                conv_out_size(w, self.ksize, self.stride, self.pad))


class Dense(Layer, _QuantWeightMixin):
    kind = "dense"

    def __init__(self, name, in_features, out_features,
                 wspec: QuantSpec | None = None, bias=False,
                 rng: np.random.Generator | None = None):
        super().__init__(name)
        self.in_features, self.out_features = in_features, out_features
        self.wspec = wspec or QuantSpec(qz.FULL_PRECISION, "weight")
        rng = rng or np.random.default_rng(0)
        self.w = Param(f"{name}.w", _init_weight(rng, (out_features, in_features), in_features),
                       decay=True)
        self.b = Param(f"{name}.b", np.zeros(out_features)) if bias else None

    def params(self):
        return [self.w] + ([self.b] if self.b else [])

    def forward(self, x, ctx):
        in_shape = x.shape
        xf = x.reshape(x.shape[0], -1)
        if xf.shape[1] != self.in_features:
            raise ValueError(f"layer {self.name}: expects {self.in_features} features, "
                             f"got {xf.shape[1]}")
        w_eff = self._effective_weight(ctx.surrogate)
        y = xf @ w_eff.T
        if self.b is not None:
            y = y + self.b.value
        return y, (in_shape, xf, w_eff)

    def backward(self, cache, gy):
        in_shape, xf, w_eff = cache
        self.w.grad = self._weight_ste(gy.T @ xf)
        if self.b is not None:
            self.b.grad = gy.sum(axis=0)
        return (gy @ w_eff).reshape(in_shape)

    def out_shape(self, in_shape):
        flat = int(np.prod(in_shape[1:]))
        if flat != self.in_features:
            raise ValueError(f"layer {self.name}: expects {self.in_features} features, "
                             f"got {flat} from shape {in_shape}")
        return (in_shape[0], self.out_features)


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name, channels, eps=1e-5, momentum=0.9):
        super().__init__(name)
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param(f"{name}.gamma", np.ones(channels))
        self.beta = Param(f"{name}.beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def params(self):
        return [self.gamma, self.beta]

    def _axes_and_shape(self, x):
        if x.ndim == 4:
            return (0, 2, 3), (1, self.channels, 1, 1)
        if x.ndim == 2:
            return (0,), (1, self.channels)
        raise ValueError(f"layer {self.name}: unsupported input rank {x.ndim}")

    def forward(self, x, ctx):
        axes, bshape = self._axes_and_shape(x)
        if ctx.training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mean
            self.running_var = m * self.running_var + (1 - m) * var
        else:
            mean, var = self.running_mean, self.running_var
        invstd = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bshape)) * invstd.reshape(bshape)
        y = self.gamma.value.reshape(bshape) * xhat + self.beta.value.reshape(bshape)
        nred = x.size // self.channels
        return y, (xhat, invstd, axes, bshape, nred, ctx.training)

    def backward(self, cache, gy):
        xhat, invstd, axes, bshape, nred, training = cache
        self.gamma.grad = (gy * xhat).sum(axis=axes)
        self.beta.grad = gy.sum(axis=axes)
        g = self.gamma.value.reshape(bshape)
        if not training:
            return gy * g * invstd.reshape(bshape)
        gxhat = gy * g
        sum_g = gxhat.sum(axis=axes).reshape(bshape)
        sum_gx = (gxhat * xhat).sum(axis=axes).reshape(bshape)
        return invstd.reshape(bshape) / nred * (nred * gxhat - sum_g - xhat * sum_gx)

    def out_shape(self, in_shape):
        return in_shape


class QuantAct(Layer):
    """Clamp to [0, 1], then quantize to k_a levels when configured.

    The clamp is the network's activation nonlinearity; the quantizer is
    bypassed in surrogate mode and when the spec is full precision.
    """

    kind = "act"

    def __init__(self, name, aspec: QuantSpec | None = None):
        super().__init__(name)
        self.aspec = aspec or QuantSpec(qz.FULL_PRECISION, "activation")

    def forward(self, x, ctx):
        if self.aspec.full_precision or ctx.surrogate:
            y = np.clip(x, 0.0, 1.0)
        else:
            y = qz.quantize_activations(x, self.aspec.k).reconstruct()
        return y, x

    def backward(self, cache, gy):
        return qz.clamp_ste_grad(cache, gy)

    def out_shape(self, in_shape):
        return in_shape


class _Pool2D(Layer):
    def __init__(self, name, size):
        super().__init__(name)
        self.size = size

    def _split(self, x):
        n, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise ValueError(f"layer {self.name}: input {h}x{w} not divisible by pool {s}")
        return x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5) \
                .reshape(n, c, h // s, w // s, s * s)

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        if h % self.size or w % self.size:
            raise ValueError(f"layer {self.name}: input {h}x{w} not divisible by "
                             f"pool {self.size}")
        return (n, c, h // self.size, w // self.size)


class MaxPool2D(_Pool2D):
    kind = "maxpool"

    def forward(self, x, ctx):
        windows = self._split(x)
        idx = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, cache, gy):
        x_shape, idx = cache
        n, c, h, w = x_shape
        s = self.size
        gwin = np.zeros((n, c, h // s, w // s, s * s))
        np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
        return gwin.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5) \
                   .reshape(x_shape)


class AvgPool2D(_Pool2D):
    kind = "avgpool"

    def forward(self, x, ctx):
        windows = self._split(x)
        return windows.mean(axis=-1), x.shape

    def backward(self, cache, gy):
        x_shape = cache
        n, c, h, w = x_shape
        s = self.size
        gwin = np.broadcast_to(gy[..., None] / (s * s),
                               (n, c, h // s, w // s, s * s))
        return gwin.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5) \
                   .reshape(x_shape)


class ResidualBlock(Layer):
    """Body layers plus an identity or projection shortcut; the branch
    outputs are added in real arithmetic."""

    kind = "residual"

    def __init__(self, name, body: list[Layer], projection: list[Layer] | None = None):
        super().__init__(name)
        self.body = body
        self.projection = projection or []

    def params(self):
        out = []
        for layer in self.body + self.projection:
            out.extend(layer.params())
        return out

    def forward(self, x, ctx):
        body_caches = []
        y = x
        for layer in self.body:
            y, c = layer.forward(y, ctx)
            body_caches.append(c)
        shortcut = x
        proj_caches = []
        for layer in self.projection:
            shortcut, c = layer.forward(shortcut, ctx)
            proj_caches.append(c)
        return y + shortcut, (body_caches, proj_caches)

    def backward(self, cache, gy):
        body_caches, proj_caches = cache
        g_body = gy
        for layer, c in zip(reversed(self.body), reversed(body_caches)):
            g_body = layer.backward(c, g_body)
        g_proj = gy
        for layer, c in zip(reversed(self.projection), reversed(proj_caches)):
            g_proj = layer.backward(c, g_proj)
        return g_body + g_proj

    def out_shape(self, in_shape):
        shape = in_shape
        for layer in self.body:
            shape = layer.out_shape(shape)
        proj_shape = in_shape
        for layer in self.projection:
            proj_shape = layer.out_shape(proj_shape)
        if shape != proj_shape:
            raise ValueError(f"block {self.name}: branch shape {shape} does not "
                             f"match shortcut {proj_shape}")
        return shape
