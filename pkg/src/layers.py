import numpy as np

from numerics import (Tensor, parameter, layer_norm, masked_attention, conv1d, gelu, reshape, transpose,
                      default_dtype)
from errors import ModelError


class Module:
    """Parameter container; parameters are found by walking instance attributes."""

    def named_parameters(self, prefix=''):
        for name, value in vars(self).items():
            if name.startswith('_'):
                continue
            full = prefix + name
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + '.')
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters('%s.%d.' % (full, i))

    def parameters(self):
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def state(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, arrays):
        params = self.parameters()
        missing = set(params) - set(arrays)
        unexpected = set(arrays) - set(params)
        if missing or unexpected:
            raise ModelError('parameter names differ: missing %s, unexpected %s'
                             % (sorted(missing), sorted(unexpected)))
        for name, p in params.items():
            value = np.asarray(arrays[name])
            if value.shape != p.shape:
                raise ModelError('parameter %s has shape %s, expected %s' % (name, value.shape, p.shape))
        for name, p in params.items():
            p.data = np.array(arrays[name], dtype=default_dtype())


def normal(rng, shape, std):
    return parameter(rng.normal(0.0, std, size=shape))


def zeros(shape):
    return parameter(np.zeros(shape))


def ones(shape):
    return parameter(np.ones(shape))


class Linear(Module):
    def __init__(self, d_in, d_out, rng, std=None):
        self.weight = normal(rng, (d_in, d_out), std if std is not None else 1.0 / np.sqrt(d_in))
        self.bias = zeros((d_out,))

    def __call__(self, x):
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, d, epsilon=1e-5):
        self.gain = ones((d,))
        self.bias = zeros((d,))
        self._epsilon = epsilon

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, self._epsilon)


class Conv1d(Module):
    def __init__(self, c_in, c_out, taps, rng, stride=1, padding=0):
        self.weight = normal(rng, (taps, c_in, c_out), 1.0 / np.sqrt(taps * c_in))
        self.bias = zeros((c_out,))
        self._stride = stride
        self._padding = padding

    def __call__(self, x):
        return conv1d(x, self.weight, self.bias, self._stride, self._padding)


class FeedForward(Module):
    def __init__(self, d, expansion, rng):
        self.inner = Linear(d, d * expansion, rng)
        self.outer = Linear(d * expansion, d, rng, std=0.02)

    def __call__(self, x):
        return self.outer(gelu(self.inner(x)))


class Attention(Module):
    """Multi-head attention of `x` over `context` (self-attention when they are the same)."""

    def __init__(self, d_model, heads, rng):
        if d_model % heads:
            raise ModelError('heads (%d) must divide d_model (%d)' % (heads, d_model))
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.output = Linear(d_model, d_model, rng, std=0.02)
        self._heads = heads

    def _split(self, x):
        batch, length, d = x.shape
        return transpose(reshape(x, (batch, length, self._heads, d // self._heads)), (0, 2, 1, 3))

    def __call__(self, x, context, mask):
        """`mask` is boolean, broadcastable to (B, heads, Nx, Ncontext)."""
        q = self._split(self.query(x))
        k = self._split(self.key(context))
        v = self._split(self.value(context))
        attended = masked_attention(q, k, v, mask)
        batch, heads, length, dh = attended.shape
        merged = reshape(transpose(attended, (0, 2, 1, 3)), (batch, length, heads * dh))
        return self.output(merged)
