"""
VQ-VAE tokenizer: 1-D conv encoder (log2(l) stride-2 stages), nearest-code
quantizer over an EMA codebook, and a mirrored upsampling decoder.
"""
import csv
from dataclasses import dataclass

import numba
import numpy as np

from constants import EMA_EPSILON, DEAD_CODE_THRESHOLD, DEAD_CODE_INTERVAL, CSV_FLOAT
from errors import TokenizerError
from layers import Module, Conv1d
from numerics import (Tensor, as_tensor, relu, upsample, absolute, square, mean, stop_gradient,
                      straight_through, no_grad)
from optim import AdamW, piecewise_constant_rate, clip_grad_norm
from utils import get_logger, timed

logger = get_logger('bad-tokenizer')


@dataclass
class TokenizerConfig:
    features: int = 8
    codebook_size: int = 64
    code_dim: int = 32
    downsample: int = 4
    width: int = 64
    res_blocks: int = 1
    beta: float = 0.02
    ema_decay: float = 0.99
    dead_code_threshold: float = DEAD_CODE_THRESHOLD
    reset_every: int = DEAD_CODE_INTERVAL
    learning_rate: float = 2e-4
    final_learning_rate: float = 1e-5
    decay_step: int = 200000
    steps: int = 300000
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    log_every: int = 100


@numba.njit
def nearest_codes(latents, codes):
    # squared Euclidean; strict < keeps the lowest index on ties
    n, d = latents.shape
    k = codes.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = 0
        best_distance = np.inf
        for j in range(k):
            distance = 0.0
            for c in range(d):
                diff = latents[i, c] - codes[j, c]
                distance += diff * diff
            if distance < best_distance:
                best_distance = distance
                best = j
        out[i] = best
    return out


@numba.njit
def assignment_statistics(latents, indices, k):
    n, d = latents.shape
    counts = np.zeros(k)
    sums = np.zeros((k, d))
    for i in range(n):
        counts[indices[i]] += 1.0
        for c in range(d):
            sums[indices[i], c] += latents[i, c]
    return counts, sums


class Codebook:
    def __init__(self, codes, ema_counts=None, ema_sums=None, usage=None):
        codes = np.array(codes, dtype=np.float64)
        if codes.ndim != 2 or codes.shape[0] < 2:
            raise TokenizerError('a codebook needs at least two code vectors')
        if not np.isfinite(codes).all():
            raise TokenizerError('codebook vectors must be finite')
        self.codes = codes
        self.ema_counts = np.ones(len(codes)) if ema_counts is None else np.array(ema_counts, dtype=np.float64)
        self.ema_sums = codes.copy() if ema_sums is None else np.array(ema_sums, dtype=np.float64)
        self.usage = np.zeros(len(codes), dtype=np.int64) if usage is None else np.array(usage, dtype=np.int64)

    @classmethod
    def random(cls, size, dim, rng):
        return cls(rng.normal(0.0, 1.0, size=(size, dim)))

    @property
    def size(self):
        return self.codes.shape[0]

    @property
    def dim(self):
        return self.codes.shape[1]

    def copy(self):
        return Codebook(self.codes, self.ema_counts, self.ema_sums, self.usage)

    def lookup(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.size):
            raise TokenizerError('token index outside [0, %d)' % self.size)
        return self.codes[indices]


def quantize(latent, codebook):
    """Nearest code to one d-vector: (index, code vector)."""
    latent = np.ascontiguousarray(np.asarray(latent, dtype=np.float64).reshape(1, -1))
    index = int(nearest_codes(latent, codebook.codes)[0])
    return index, codebook.codes[index]


def quantize_batch(latents, codebook):
    latents = np.asarray(latents, dtype=np.float64)
    flat = np.ascontiguousarray(latents.reshape(-1, latents.shape[-1]))
    return nearest_codes(flat, codebook.codes).reshape(latents.shape[:-1])


def ema_update(codebook, latents, indices, decay):
    """counts <- decay*counts + (1-decay)*n_k, sums likewise, codes <- sums / counts."""
    if not 0.0 < decay < 1.0:
        raise TokenizerError('EMA decay must lie in (0, 1), got %r' % (decay,))
    latents = np.asarray(latents, dtype=np.float64)
    latents = np.ascontiguousarray(latents.reshape(-1, codebook.dim))
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if len(indices) == 0:
        return codebook
    counts, sums = assignment_statistics(latents, indices, codebook.size)
    updated = codebook.copy()
    updated.ema_counts = decay * codebook.ema_counts + (1 - decay) * counts
    updated.ema_sums = decay * codebook.ema_sums + (1 - decay) * sums
    updated.codes = updated.ema_sums / np.maximum(updated.ema_counts, EMA_EPSILON)[:, None]
    updated.usage = codebook.usage + counts.astype(np.int64)
    return updated


def reset_dead_codes(codebook, threshold, donors, rng):
    """Re-seed codes whose EMA count fell below `threshold` from donor latents."""
    donors = np.asarray(donors, dtype=np.float64).reshape(-1, codebook.dim)
    dead = np.flatnonzero(codebook.ema_counts < threshold)
    if len(dead) == 0:
        return codebook
    if len(donors) == 0:
        raise TokenizerError('no donor latents to re-seed dead codes from')
    picks = rng.choice(len(donors), size=len(dead), replace=len(donors) < len(dead))
    updated = codebook.copy()
    updated.codes[dead] = donors[picks]
    updated.ema_sums[dead] = donors[picks]
    updated.ema_counts[dead] = 1.0
    logger.debug('re-seeded %d dead codes', len(dead))
    return updated


def codebook_usage(indices, size):
    """Fraction of the codebook that appears in `indices`."""
    return len(np.unique(np.asarray(indices))) / float(size)


@dataclass
class VQLoss:
    total: Tensor
    reconstruction: Tensor
    codebook: Tensor
    commitment: Tensor


def vq_loss(frames, reconstruction, latents, quantized, beta):
    """|F - F^|_1 + |sg[E] - X|^2 + beta |E - sg[X]|^2, each averaged per element."""
    frames = stop_gradient(frames)
    recon = mean(absolute(reconstruction - frames))
    codebook_term = mean(square(stop_gradient(latents) - as_tensor(quantized)))
    total = recon + codebook_term
    if beta:
        commitment = mean(square(latents - stop_gradient(quantized))) * beta
        total = total + commitment
    else:
        commitment = as_tensor(0.0)
    return VQLoss(total, recon, codebook_term, commitment)


class ResidualBlock(Module):
    def __init__(self, width, rng):
        self.conv = Conv1d(width, width, 3, rng, padding=1)
        self.project = Conv1d(width, width, 1, rng)

    def __call__(self, x):
        return x + self.project(relu(self.conv(relu(x))))


def _stages(downsample):
    stages = int(round(np.log2(downsample)))
    if downsample < 1 or 2 ** stages != downsample:
        raise TokenizerError('downsampling rate must be a power of two, got %d' % downsample)
    return stages


class Encoder(Module):
    def __init__(self, config, rng):
        width = config.width
        self.stem = Conv1d(config.features, width, 3, rng, padding=1)
        self.downs = [Conv1d(width, width, 4, rng, stride=2, padding=1) for _ in range(_stages(config.downsample))]
        self.blocks = [ResidualBlock(width, rng) for _ in range(len(self.downs) * config.res_blocks)]
        self.head = Conv1d(width, config.code_dim, 3, rng, padding=1)
        self._res_blocks = config.res_blocks

    def __call__(self, x):
        x = self.stem(x)
        for i, down in enumerate(self.downs):
            x = down(relu(x))
            for block in self.blocks[i * self._res_blocks:(i + 1) * self._res_blocks]:
                x = block(x)
        return self.head(relu(x))


class Decoder(Module):
    def __init__(self, config, rng):
        width = config.width
        self.stem = Conv1d(config.code_dim, width, 3, rng, padding=1)
        self.blocks = [ResidualBlock(width, rng) for _ in range(_stages(config.downsample) * config.res_blocks)]
        self.ups = [Conv1d(width, width, 3, rng, padding=1) for _ in range(_stages(config.downsample))]
        self.head = Conv1d(width, config.features, 3, rng, padding=1)
        self._res_blocks = config.res_blocks

    def __call__(self, x):
        x = self.stem(x)
        for i, up in enumerate(self.ups):
            for block in self.blocks[i * self._res_blocks:(i + 1) * self._res_blocks]:
                x = block(x)
            x = up(upsample(relu(x), 2))
        return self.head(relu(x))


class VQVAE(Module):
    def __init__(self, config, rng):
        self.config = config
        self.encoder = Encoder(config, rng)
        self.decoder = Decoder(config, rng)
        self.codebook = Codebook.random(config.codebook_size, config.code_dim, rng)

    def _frames(self, frames):
        data = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[2] != self.config.features:
            raise TokenizerError('frames must be (batch, tau, %d), got %s' % (self.config.features, data.shape))
        if data.shape[1] % self.config.downsample:
            raise TokenizerError('tau=%d is not divisible by the downsampling rate %d'
                                 % (data.shape[1], self.config.downsample))
        return as_tensor(data)

    def encode(self, frames):
        """(B, tau, D) frames -> (B, tau / l, d) latents."""
        return self.encoder(self._frames(frames))

    def quantize(self, latents):
        data = latents.data if isinstance(latents, Tensor) else latents
        indices = quantize_batch(data, self.codebook)
        return indices, self.codebook.codes[indices]

    def decode_latents(self, quantized):
        return self.decoder(as_tensor(quantized))

    def decode(self, tokens):
        """(B, T) code indices -> (B, T * l, D) frames."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        return self.decode_latents(self.codebook.lookup(tokens))

    def tokenize(self, frames):
        with no_grad():
            indices, _ = self.quantize(self.encode(frames))
        return indices

    def detokenize(self, tokens):
        with no_grad():
            return self.decode(tokens).data

    def zero_decoder(self):
        for p in self.decoder.parameters().values():
            p.data = np.zeros_like(p.data)

    def forward(self, frames):
        frames = self._frames(frames)
        latents = self.encode(frames)
        indices, codes = self.quantize(latents)
        reconstruction = self.decode_latents(straight_through(latents, codes))
        loss = vq_loss(frames, reconstruction, latents, codes, self.config.beta)
        return reconstruction, latents, indices, loss


def train_step(model, frames, optimizer, step, rng):
    config = model.config
    optimizer.zero_grad()
    reconstruction, latents, indices, loss = model.forward(frames)
    loss.total.backward()
    clip_grad_norm(optimizer.params, config.grad_clip)
    lr = piecewise_constant_rate(step, config.learning_rate, config.final_learning_rate, config.decay_step)
    optimizer.step(lr)
    model.codebook = ema_update(model.codebook, latents.data, indices, config.ema_decay)
    if config.reset_every and step > 0 and step % config.reset_every == 0:
        model.codebook = reset_dead_codes(model.codebook, config.dead_code_threshold, latents.data, rng)
    return {
        'step': step,
        'loss': loss.total.item(),
        'recon_l1': loss.reconstruction.item(),
        'codebook_loss': loss.codebook.item(),
        'commit_loss': loss.commitment.item(),
        'alive': float((model.codebook.ema_counts >= config.dead_code_threshold).mean()),
        'lr': lr,
    }


TOKENIZER_METRICS = ['step', 'loss', 'recon_l1', 'codebook_loss', 'commit_loss', 'alive', 'lr']


@timed
def train_tokenizer(model, source, rng, steps=None, metrics_path=None):
    """Fit the VQ-VAE on frames drawn from `source`; returns the logged rows."""
    config = model.config
    steps = config.steps if steps is None else steps
    optimizer = AdamW(model.parameters(), config.learning_rate, (config.beta1, config.beta2),
                      weight_decay=config.weight_decay)
    with no_grad():
        warmup, _ = source.sample_frames(config.batch_size, rng)
        donors = model.encode(warmup).data
    # seed every code from encoder outputs before the first update
    model.codebook = reset_dead_codes(model.codebook, np.inf, donors, rng)
    rows = []
    handle = open(metrics_path, 'w', newline='') if metrics_path else None
    try:
        writer = csv.writer(handle) if handle else None
        if writer:
            writer.writerow(TOKENIZER_METRICS)
        for step in range(steps):
            frames, _ = source.sample_frames(config.batch_size, rng)
            row = train_step(model, frames, optimizer, step, rng)
            if step % config.log_every == 0 or step == steps - 1:
                rows.append(row)
                logger.info('step %d loss %.5f recon %.5f alive %.2f', step, row['loss'], row['recon_l1'],
                            row['alive'])
                if writer:
                    writer.writerow([row['step']] + [CSV_FLOAT % row[k] for k in TOKENIZER_METRICS[1:]])
    finally:
        if handle:
            handle.close()
    return rows
