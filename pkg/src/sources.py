"""Synthetic data: labelled Markov token chains and labelled sinusoidal frame sequences."""
from dataclasses import dataclass, field

import numpy as np

from errors import ConfigError
from training import Batch
from utils import sample_categorical


def default_prompts(labels):
    # word 1 is shared, word 2 + label names the condition; 0 is padding
    return [[1, 2 + label] for label in range(labels)]


def prompt_words(labels, prompts):
    """Pad the prompts of `labels` into a (B, Lw) word-id array."""
    labels = np.asarray(labels, dtype=np.int64)
    width = max(len(p) for p in prompts)
    table = np.zeros((len(prompts), width), dtype=np.int64)
    for label, prompt in enumerate(prompts):
        table[label, :len(prompt)] = prompt
    return table[labels]


@dataclass
class TokenDataset:
    tokens: np.ndarray
    labels: np.ndarray


@dataclass
class MarkovSource:
    # transitions[label] is a row-stochastic K x K matrix
    transitions: np.ndarray
    initial: np.ndarray
    prompts: list = field(default_factory=list)

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        if self.transitions.ndim == 2:
            self.transitions = self.transitions[None]
        self.initial = np.broadcast_to(np.asarray(self.initial, dtype=np.float64),
                                       self.transitions.shape[:2]).copy()
        if (self.transitions < 0).any() or (self.initial < 0).any():
            raise ConfigError('Markov probabilities must be non-negative')
        if np.abs(self.transitions.sum(axis=2) - 1.0).max() > 1e-12:
            raise ConfigError('transition rows must sum to 1')
        if np.abs(self.initial.sum(axis=1) - 1.0).max() > 1e-12:
            raise ConfigError('initial distributions must sum to 1')
        if not self.prompts:
            self.prompts = default_prompts(self.labels)

    @property
    def labels(self):
        return self.transitions.shape[0]

    @property
    def states(self):
        return self.transitions.shape[1]

    @classmethod
    def desk(cls, states=8, labels=2, step_probability=0.75, stay_probability=0.15):
        """Each label walks a cycle: even labels step +1, odd labels -1, faster for higher labels."""
        if states < 3:
            raise ConfigError('the desk chain needs at least 3 states')
        rest = (1.0 - step_probability - stay_probability) / (states - 2)
        transitions = np.empty((labels, states, states))
        for label in range(labels):
            step = (label // 2 + 1) * (1 if label % 2 == 0 else -1)
            matrix = np.full((states, states), rest)
            for s in range(states):
                matrix[s, s] = stay_probability
                matrix[s, (s + step) % states] = step_probability
            transitions[label] = matrix / matrix.sum(axis=1, keepdims=True)
        return cls(transitions, np.full(states, 1.0 / states))

    def sample(self, count, length, rng, labels=None):
        if labels is None:
            labels = rng.integers(0, self.labels, size=count)
        labels = np.asarray(labels, dtype=np.int64)
        tokens = np.empty((count, length), dtype=np.int64)
        tokens[:, 0] = sample_categorical(self.initial[labels], rng)
        for t in range(1, length):
            tokens[:, t] = sample_categorical(self.transitions[labels, tokens[:, t - 1]], rng)
        return tokens, labels

    def marginals(self, label, length):
        """(length, K) state distribution at every position."""
        out = np.empty((length, self.states))
        out[0] = self.initial[label]
        for t in range(1, length):
            out[t] = out[t - 1] @ self.transitions[label]
        return out

    def bigram_distribution(self, label, length, start=0):
        """Joint distribution of (x_t, x_t+1) averaged over transitions with t >= start."""
        marginals = self.marginals(label, length)[start:length - 1]
        if len(marginals) == 0:
            raise ConfigError('no transitions start at or after position %d' % start)
        return (marginals[:, :, None] * self.transitions[label][None]).mean(axis=0)

    def log_likelihood(self, tokens, label):
        tokens = np.atleast_2d(tokens)
        logp = np.log(np.maximum(self.initial[label][tokens[:, 0]], 1e-300))
        steps = self.transitions[label][tokens[:, :-1], tokens[:, 1:]]
        return logp + np.log(np.maximum(steps, 1e-300)).sum(axis=1)


def generate_markov_dataset(source, count, length, rng, labels=None):
    if length < 2:
        raise ConfigError('Markov sequences need length >= 2, got %d' % length)
    tokens, labels = source.sample(count, length, rng, labels)
    return TokenDataset(tokens, labels)


@dataclass
class SineMotionSource:
    """Each label owns per-feature frequencies, amplitudes and phases; frames stay in [-1, 1]."""
    frequencies: np.ndarray  # (labels, D), cycles per sequence
    amplitudes: np.ndarray   # (labels, D), each <= 1
    phases: np.ndarray       # (labels, D)
    length: int = 64
    prompts: list = field(default_factory=list)

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64)
        if (np.abs(self.amplitudes) > 1.0).any():
            raise ConfigError('sinusoid amplitudes must lie in [-1, 1]')
        if not self.prompts:
            self.prompts = default_prompts(self.labels)

    @property
    def labels(self):
        return len(self.frequencies)

    @property
    def features(self):
        return np.shape(self.frequencies)[1]

    @classmethod
    def desk(cls, features=8, labels=2, length=64, seed=0):
        rng = np.random.default_rng(seed)
        return cls(frequencies=rng.integers(1, 5, size=(labels, features)).astype(np.float64),
                   amplitudes=rng.uniform(0.3, 0.9, size=(labels, features)),
                   phases=rng.uniform(0.0, 2 * np.pi, size=(labels, features)),
                   length=length)

    def sample_frames(self, count, rng, labels=None):
        """(count, length, D) frames and their labels; each sequence gets a random shift and gain."""
        if labels is None:
            labels = rng.integers(0, self.labels, size=count)
        labels = np.asarray(labels, dtype=np.int64)
        shift = rng.uniform(0.0, 2 * np.pi, size=(count, 1, 1))
        gain = rng.uniform(0.8, 1.0, size=(count, 1, 1))
        t = np.arange(self.length, dtype=np.float64)[None, :, None] / self.length
        angle = 2 * np.pi * np.asarray(self.frequencies)[labels][:, None, :] * t
        angle = angle + np.asarray(self.phases)[labels][:, None, :] + shift
        return gain * self.amplitudes[labels][:, None, :] * np.sin(angle), labels


@dataclass
class TokenizedSource:
    """Sine frames turned into token sequences by a trained tokenizer."""
    frames: SineMotionSource
    tokenizer: object

    @property
    def labels(self):
        return self.frames.labels

    @property
    def prompts(self):
        return self.frames.prompts

    def sample(self, count, length, rng, labels=None):
        frames, labels = self.frames.sample_frames(count, rng, labels)
        tokens = self.tokenizer.tokenize(frames)
        if tokens.shape[1] != length:
            raise ConfigError('tokenizer yields %d tokens per sequence, expected %d' % (tokens.shape[1], length))
        return tokens, labels


def batch_sampler(source, batch_size, length):
    def sample(rng):
        tokens, labels = source.sample(batch_size, length, rng)
        return Batch(tokens, labels, prompt_words(labels, source.prompts))
    return sample


def dataset_batch_sampler(dataset, prompts, batch_size):
    """Batches of rows drawn with replacement from a fixed dataset."""
    def sample(rng):
        rows = rng.integers(0, len(dataset.tokens), size=batch_size)
        labels = dataset.labels[rows]
        return Batch(dataset.tokens[rows], labels, prompt_words(labels, prompts))
    return sample
