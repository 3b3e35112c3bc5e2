import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from constants import CSV_FLOAT
from corruption import corrupt_batch
from errors import TrainingError, NumericsError
from numerics import cross_entropy, default_dtype, precision
from optim import AdamW, clip_grad_norm, piecewise_constant_rate
from utils import get_logger, timed, make_rng

logger = get_logger('bad-training')

# rng stream ids under the run seed
DATA_STREAM = 1
CORRUPTION_STREAM = 2


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    final_learning_rate: float = 1e-4
    decay_step: int = 3000
    steps: int = 4000
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    unmasked_weight: float = 0.1
    log_every: int = 100
    prefetch: bool = False

    def validate(self):
        if self.learning_rate < 0 or self.final_learning_rate < 0:
            raise TrainingError('learning rates must be non-negative')
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise TrainingError('AdamW moments must lie in (0, 1)')
        return self


@dataclass
class Batch:
    tokens: np.ndarray  # (B, T)
    labels: np.ndarray  # (B,)
    words: np.ndarray   # (B, Lw), 0 = padding


@dataclass
class StepResult:
    step: int
    loss: float
    masked_accuracy: float
    lr: float
    grad_norm: float


def lr_schedule(step, config):
    return piecewise_constant_rate(step, config.learning_rate, config.final_learning_rate, config.decay_step)


def bad_objective(logits, targets, masked, unmasked_weight):
    """Cross-entropy averaged over all positions; unmasked positions count `unmasked_weight`."""
    masked = np.asarray(masked, dtype=bool)
    weights = np.where(masked, 1.0, unmasked_weight)
    return cross_entropy(logits, targets, weights)


def masked_accuracy(logits, targets, masked):
    masked = np.asarray(masked, dtype=bool)
    if not masked.any():
        return float('nan')
    predicted = np.argmax(logits, axis=-1)
    return float((predicted == targets)[masked].mean())


def train_step(model, batch, optimizer, step, rng, config, corruption):
    """Corrupt, forward, backward, clip and update once."""
    optimizer.zero_grad()
    corrupted, plans, targets = corrupt_batch(batch.tokens, model.config.max_length, rng, corruption)
    masked = np.stack([plan.masked for plan in plans])
    lr = lr_schedule(step, config)
    try:
        logits = model.logits_for(corrupted, plans, batch.words)
        loss = bad_objective(logits, targets, masked, config.unmasked_weight)
        loss.backward()
    except NumericsError as e:
        # Tensor refuses non-finite values, so a diverged loss surfaces here
        raise TrainingError('step %d (lr %g) diverged: %s' % (step, lr, e)) from e
    value = loss.item()
    norm = clip_grad_norm(optimizer.params, config.grad_clip)
    if not np.isfinite(norm):
        raise TrainingError('non-finite gradient norm at step %d (lr %g)' % (step, lr))
    optimizer.step(lr)
    return StepResult(step, value, masked_accuracy(logits.data, targets, masked), lr, norm)


def make_optimizer(model, config):
    return AdamW(model.parameters(), config.learning_rate, (config.beta1, config.beta2),
                 weight_decay=config.weight_decay)


TRAINING_METRICS = ['step', 'loss', 'masked_accuracy', 'lr']


@timed
def train_transformer(model, sample_batch, config, corruption, seed, steps=None, metrics_path=None):
    """Run the optimization loop.

    `sample_batch(rng)` draws one Batch. Step s reads its data from
    make_rng(seed, DATA_STREAM, s) and its corruption from
    make_rng(seed, CORRUPTION_STREAM, s), so prefetching cannot change results.
    """
    config.validate()
    steps = config.steps if steps is None else steps
    optimizer = make_optimizer(model, config)
    results = []

    # the worker thread does not inherit the caller's thread-local precision
    bits = default_dtype().itemsize * 8

    def load(step):
        with precision(bits):
            return sample_batch(make_rng(seed, DATA_STREAM, step))

    handle = open(metrics_path, 'w', newline='') if metrics_path else None
    pool = ThreadPoolExecutor(max_workers=1) if config.prefetch else None
    try:
        writer = csv.writer(handle) if handle else None
        if writer:
            writer.writerow(TRAINING_METRICS)
        pending = pool.submit(load, 0) if pool else None
        for step in range(steps):
            if pool:
                batch = pending.result()
                if step + 1 < steps:
                    pending = pool.submit(load, step + 1)
            else:
                batch = load(step)
            result = train_step(model, batch, optimizer, step, make_rng(seed, CORRUPTION_STREAM, step),
                                config, corruption)
            if step % config.log_every == 0 or step == steps - 1:
                results.append(result)
                logger.info('step %d loss %.5f masked acc %.3f lr %g', step, result.loss,
                            result.masked_accuracy, result.lr)
                if writer:
                    writer.writerow([step, CSV_FLOAT % result.loss, CSV_FLOAT % result.masked_accuracy,
                                     CSV_FLOAT % result.lr])
    finally:
        if pool:
            pool.shutdown()
        if handle:
            handle.close()
    return results
