import numpy as np


def piecewise_constant_rate(step, initial, final, decay_step):
    """Initial rate until `decay_step`, final rate from then on."""
    if step < 0:
        raise ValueError('step must be non-negative')
    return initial if step < decay_step else final


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm is not None and max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


class AdamW:
    """Adaptive-moment updates with weight decay decoupled from the gradient.

    Decay applies to matrices only; gains, biases and other vectors are left alone.
    """

    def __init__(self, params, learning_rate, betas=(0.9, 0.99), epsilon=1e-8, weight_decay=0.0):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.epsilon = epsilon
        self.weight_decay = weight_decay
        self.steps = 0
        self.first = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.second = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, learning_rate=None):
        lr = self.learning_rate if learning_rate is None else learning_rate
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self.first[name] = self.beta1 * self.first[name] + (1 - self.beta1) * p.grad
            v = self.second[name] = self.beta2 * self.second[name] + (1 - self.beta2) * p.grad * p.grad
            update = (m / correction1) / (np.sqrt(v / correction2) + self.epsilon)
            data = p.data
            if self.weight_decay and data.ndim >= 2:
                data = data - lr * self.weight_decay * data
            p.data = (data - lr * update).astype(p.data.dtype)
