"""Network container: layered forward/backward with explicit caches.

forward_train keeps both the full-precision masters and the quantized
values alive; backward_ste pushes the loss gradient through the
straight-through surrogates back onto the masters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Layer, PassCtx, Param


class NumericFailure(RuntimeError):
    """NaN/Inf appeared in a forward intermediate or the loss."""

    def __init__(self, message, layer_index=None, layer_name=None):
        super().__init__(message)
        self.layer_index = layer_index
        self.layer_name = layer_name


class StaleCacheError(RuntimeError):
    """Backward was called with a cache from an older forward."""


@dataclass
class NetCache:
    forward_id: int
    ctx: PassCtx
    items: list = field(default_factory=list)


class Network:
    def __init__(self, layers: list[Layer], input_shape: tuple):
        self.layers = layers
        self.input_shape = tuple(input_shape)  # (C, H, W) or (features,)
        self._forward_id = 0
        self.check_shapes()

    def check_shapes(self, batch=2):
        shape = (batch, *self.input_shape)
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def params(self) -> list[Param]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x, training=True, surrogate=False):
        """Run the net; returns (output, cache) with one cache entry per
        layer.  Raises NumericFailure naming the first layer that
        produced a non-finite value."""
        x = np.asarray(x, dtype=np.float64)
        ctx = PassCtx(training=training, surrogate=surrogate)
        self._forward_id += 1
        cache = NetCache(self._forward_id, ctx)
        for idx, layer in enumerate(self.layers):
            x, c = layer.forward(x, ctx)
            if not np.isfinite(x).all():
                raise NumericFailure(
                    f"non-finite values after layer {idx} ({layer.name})",
                    layer_index=idx, layer_name=layer.name)
            cache.items.append(c)
        return x, cache

    def backward(self, cache: NetCache, gy):
        """Propagate an output gradient back to the input; parameter
        gradients land on each Param.grad."""
        if cache.forward_id != self._forward_id:
            raise StaleCacheError(
                f"cache from forward #{cache.forward_id}, latest is "
                f"#{self._forward_id}")
        gy = np.asarray(gy, dtype=np.float64)
        for layer, c in zip(reversed(self.layers), reversed(cache.items)):
            gy = layer.backward(c, gy)
        return gy

    def state(self) -> dict:
        """Deep-copied parameter values and batch-norm statistics."""
        out = {}
        for p in self.params():
            out[p.name] = p.value.copy()
        for layer in self._all_layers():
            if hasattr(layer, "running_mean"):
                out[f"{layer.name}.running_mean"] = layer.running_mean.copy()
                out[f"{layer.name}.running_var"] = layer.running_var.copy()
        return out

    def load_state(self, state: dict):
        for p in self.params():
            p.value[...] = state[p.name]
        for layer in self._all_layers():
            if hasattr(layer, "running_mean"):
                layer.running_mean[...] = state[f"{layer.name}.running_mean"]
                layer.running_var[...] = state[f"{layer.name}.running_var"]

    def _all_layers(self):
        def walk(layers):
            for layer in layers:
                yield layer
                if hasattr(layer, "body"):
                    yield from walk(layer.body)
                    yield from walk(layer.projection)
        return walk(self.layers)


def forward_train(net: Network, batch):
    """Training-mode forward: batch statistics, quantizers active."""
    return net.forward(batch, training=True)


def backward_ste(net: Network, cache: NetCache, loss_grad):
    """Gradient flow through the STE surrogates onto the real masters."""
    return net.backward(cache, loss_grad)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, logits grad)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    loss = -np.log(probs[np.arange(n), labels] + 1e-300).mean()
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def accuracy(logits, labels) -> float:
    return float((np.argmax(logits, axis=1) == np.asarray(labels)).mean())
