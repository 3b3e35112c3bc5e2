"""
Dense-array autodiff on top of numpy.

A Tensor wraps an immutable ndarray plus the closure that routes an upstream
gradient to its parents. Calling backward() on a scalar visits every node of
the graph once, in reverse topological order, and leaves `.grad` on each one.
Graphs are single-threaded; independent graphs may live on separate threads.
"""
import contextlib
import threading
from dataclasses import dataclass, field
from typing import List

import numpy as np

from constants import MASK_FILL, GRADIENT_STEP, GRADIENT_TOLERANCE
from errors import NumericsError

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype():
    return _get('dtype', np.dtype(np.float64))


def set_precision(bits):
    if bits == 64:
        _state.dtype = np.dtype(np.float64)
    elif bits == 32:
        _state.dtype = np.dtype(np.float32)
    else:
        raise NumericsError('precision must be 32 or 64, got %r' % (bits,))


@contextlib.contextmanager
def precision(bits):
    previous = default_dtype()
    set_precision(bits)
    try:
        yield
    finally:
        _state.dtype = previous


def grad_enabled():
    return _get('grad', True)


@contextlib.contextmanager
def no_grad():
    previous = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = previous


class Tensor:
    def __init__(self, data, requires_grad=False, parents=(), backward=None, op='leaf'):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(default_dtype())
        if not np.isfinite(data).all():
            raise NumericsError('non-finite values produced by %s' % op)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, op='detach')

    def __repr__(self):
        return 'Tensor(shape=%s, op=%s, requires_grad=%s)' % (self.shape, self.op, self.requires_grad)

    @classmethod
    def from_op(cls, data, parents, backward, op='custom'):
        """Build the output node of an operation.

        `backward(grad)` must return one gradient (or None) per parent. When no
        parent needs a gradient, or gradients are disabled, the node is a
        constant and keeps no reference to its parents.
        """
        if grad_enabled() and any(p.requires_grad for p in parents):
            return cls(data, requires_grad=True, parents=tuple(parents), backward=backward, op=op)
        return cls(data, op=op)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise NumericsError('backward() without a gradient needs a scalar, got shape %s' % (self.shape,))
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            if node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, index: getitem(self, index)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=default_dtype()), op='constant')


def parameter(data):
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True, op='parameter')


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap(x):
    return np.swapaxes(x, -1, -2)


# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), 'add')


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), 'sub')


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(a.data * b.data, (a, b),
                          lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), 'mul')


def neg(a):
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), 'neg')


def square(a):
    return Tensor.from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), 'square')


def absolute(a):
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,), 'abs')


def relu(a):
    return Tensor.from_op(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), 'relu')


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    # tanh approximation
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)
    return Tensor.from_op(out, (a,), backward, 'gelu')


# reductions and shape


def tensor_sum(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return Tensor.from_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, 'sum')


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), 'reshape')


def transpose(a, axes):
    inverse = np.argsort(axes)
    return Tensor.from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), 'transpose')


def getitem(a, index):
    def backward(g):
        grad = np.zeros_like(a.data)
        grad[index] = g
        return (grad,)
    return Tensor.from_op(a.data[index], (a,), backward, 'getitem')


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                          lambda g: tuple(np.split(g, sizes, axis=axis)), 'concat')


def embedding(table, indices):
    """Rows of `table` picked by an integer index array of any shape."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise NumericsError('embedding index out of range [0, %d)' % table.shape[0])

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices, g)
        return (grad,)
    return Tensor.from_op(table.data[indices], (table,), backward, 'embedding')


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError('matmul needs operands of rank >= 2, got %s and %s' % (a.shape, b.shape))
    if a.shape[-1] != b.shape[-2]:
        raise NumericsError('matmul shape mismatch %s @ %s' % (a.shape, b.shape))

    def backward(g):
        return (_unbroadcast(g @ _swap(b.data), a.shape),
                _unbroadcast(_swap(a.data) @ g, b.shape))
    return Tensor.from_op(a.data @ b.data, (a, b), backward, 'matmul')


def stop_gradient(a):
    return as_tensor(a).detach()


def straight_through(latent, quantized):
    """Forward value of `quantized`, gradient passed unchanged to `latent`."""
    quantized = quantized.data if isinstance(quantized, Tensor) else np.asarray(quantized)
    if quantized.shape != latent.shape:
        raise NumericsError('straight-through shapes differ: %s vs %s' % (latent.shape, quantized.shape))
    return Tensor.from_op(quantized.astype(latent.dtype, copy=True), (latent,), lambda g: (g,), 'straight_through')


# fused blocks


def layer_norm(x, gain, bias, epsilon=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if epsilon <= 0:
        raise NumericsError('layer_norm epsilon must be positive')
    data = x.data
    mu = data.mean(axis=-1, keepdims=True)
    centered = data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)
    return Tensor.from_op(out, (x, gain, bias), backward, 'layer_norm')


def masked_attention(queries, keys, values, mask, scale=None):
    """Softmax attention restricted to the keys `mask` allows.

    queries (..., Nq, dk), keys (..., Nk, dk), values (..., Nk, dv); `mask` is a
    boolean array broadcastable to (..., Nq, Nk). Disallowed logits are replaced
    by a large negative constant so their weight underflows to exactly zero.
    """
    q, k, v = as_tensor(queries), as_tensor(keys), as_tensor(values)
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q.data @ _swap(k.data)) * scale
    try:
        allow = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    except ValueError:
        raise NumericsError('attention mask %s does not cover scores %s' % (np.shape(mask), scores.shape))
    if not allow.any(axis=-1).all():
        raise NumericsError('attention mask has a query row with no allowed key')
    scores = np.where(allow, scores, MASK_FILL[scores.dtype])
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    out = weights @ v.data

    def backward(g):
        gw = g @ _swap(v.data)
        gv = _swap(weights) @ g
        gs = weights * (gw - (gw * weights).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k.data
        gk = _swap(gs) @ q.data
        return _unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape), _unbroadcast(gv, v.shape)
    result = Tensor.from_op(out, (q, k, v), backward, 'masked_attention')
    result.attention_weights = weights
    return result


def log_softmax_rows(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_rows(logits):
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def cross_entropy(logits, targets, weights=None):
    """Mean over positions of weight * -log softmax(logits)[target].

    `logits` has shape (..., K) and `targets` the leading shape; a single
    logit vector with an integer target gives the plain negated log-probability.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    vocabulary = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise NumericsError('targets %s do not match logits %s' % (targets.shape, logits.shape))
    if targets.size and (targets.min() < 0 or targets.max() >= vocabulary):
        raise NumericsError('target index out of range [0, %d)' % vocabulary)
    if weights is None:
        weights = np.ones(targets.shape, dtype=logits.dtype)
    weights = np.asarray(weights, dtype=logits.dtype)
    count = max(targets.size, 1)

    log_probs = log_softmax_rows(logits.data)
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    loss = -(weights * picked).sum() / count

    def backward(g):
        grad = np.exp(log_probs)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (weights / count)[..., None] * g,)
    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, 'cross_entropy')


def conv1d(x, weight, bias, stride=1, padding=0):
    """Channels-last 1-D convolution: x (B, L, Cin), weight (k, Cin, Cout)."""
    batch, length, channels = x.shape
    taps, cin, cout = weight.shape
    if cin != channels:
        raise NumericsError('conv1d expects %d input channels, got %d' % (cin, channels))
    padded = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    out_length = (length + 2 * padding - taps) // stride + 1
    if out_length < 1:
        raise NumericsError('conv1d input of length %d is too short' % length)
    windows = [slice(j, j + stride * (out_length - 1) + 1, stride) for j in range(taps)]
    out = sum(padded[:, window, :] @ weight.data[j] for j, window in enumerate(windows)) + bias.data

    def backward(g):
        gpad = np.zeros_like(padded)
        gw = np.empty_like(weight.data)
        flat_g = g.reshape(-1, cout)
        for j, window in enumerate(windows):
            gpad[:, window, :] += g @ weight.data[j].T
            gw[j] = padded[:, window, :].reshape(-1, cin).T @ flat_g
        return gpad[:, padding:padding + length, :], gw, flat_g.sum(axis=0)
    return Tensor.from_op(out, (x, weight, bias), backward, 'conv1d')


def upsample(x, factor):
    """Nearest-neighbour repeat along the time axis of (B, L, C)."""
    batch, length, channels = x.shape
    return Tensor.from_op(np.repeat(x.data, factor, axis=1), (x,),
                          lambda g: (g.reshape(batch, length, factor, channels).sum(axis=2),), 'upsample')


# verification


@dataclass
class GradientReport:
    max_relative_error: float
    tolerance: float
    errors: List[float] = field(default_factory=list)

    @property
    def passed(self):
        return self.max_relative_error <= self.tolerance


def gradient_check(function, inputs, tolerance=GRADIENT_TOLERANCE, step=GRADIENT_STEP):
    """Compare reverse-mode gradients of a scalar function with central differences.

    The error for each input is max|analytic - numeric| divided by the largest
    gradient magnitude of that input (floored at 1e-6).
    """
    with precision(64):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        tensors = [parameter(a.copy()) for a in arrays]
        out = function(*tensors)
        if out.data.size != 1:
            raise NumericsError('gradient_check needs a scalar-valued function')
        out.backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        def evaluate():
            with no_grad():
                value = function(*[Tensor(a) for a in arrays]).data
            if not np.isfinite(value).all():
                raise NumericsError('gradient_check: non-finite function value')
            return float(value)

        errors = []
        for array, grad in zip(arrays, analytic):
            numeric = np.zeros_like(array)
            for index in np.ndindex(array.shape):
                original = array[index]
                array[index] = original + step
                plus = evaluate()
                array[index] = original - step
                minus = evaluate()
                array[index] = original
                numeric[index] = (plus - minus) / (2 * step)
            grad = np.broadcast_to(grad, array.shape)
            scale = max(np.abs(grad).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-6)
            errors.append(float(np.abs(grad - numeric).max(initial=0.0) / scale))
    return GradientReport(max(errors, default=0.0), tolerance, errors)
