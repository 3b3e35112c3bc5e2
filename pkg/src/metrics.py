"""
Desk-scale evaluation metrics: bigram KL against an analytic chain,
Frechet distance between Gaussian fits of feature sets, and analogues of
condition accuracy, diversity and multimodality.
"""
import numba
import numpy as np
from scipy import linalg

from constants import KL_SMOOTHING
from errors import ConfigError


@numba.njit
def bigram_counts(tokens, states, start):
    counts = np.zeros((states, states))
    for n in range(tokens.shape[0]):
        for t in range(start, tokens.shape[1] - 1):
            counts[tokens[n, t], tokens[n, t + 1]] += 1.0
    return counts


def kl_divergence(p, q, smoothing=KL_SMOOTHING):
    p = np.asarray(p, dtype=np.float64).ravel() + smoothing
    q = np.asarray(q, dtype=np.float64).ravel() + smoothing
    p, q = p / p.sum(), q / q.sum()
    return float(np.sum(p * np.log(p / q)))


def bigram_kl(tokens, source, label=None, start=0, smoothing=KL_SMOOTHING):
    """KL(empirical bigrams || analytic bigrams) over transitions starting at position >= start.

    With `label` None the reference is the equal-weight mixture of every label's chain.
    """
    tokens = np.ascontiguousarray(np.atleast_2d(tokens), dtype=np.int64)
    if tokens.size == 0:
        raise ConfigError('bigram KL needs at least one token')
    if tokens.min() < 0 or tokens.max() >= source.states:
        raise ConfigError('tokens outside the source alphabet [0, %d)' % source.states)
    length = tokens.shape[1]
    empirical = bigram_counts(tokens, source.states, start)
    if label is None:
        reference = np.mean([source.bigram_distribution(l, length, start) for l in range(source.labels)], axis=0)
    else:
        reference = source.bigram_distribution(label, length, start)
    return kl_divergence(empirical, reference, smoothing)


def sequence_features(tokens, states):
    """Unigram histogram followed by the histogram of successive differences mod K."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    count, length = tokens.shape
    rows = np.arange(count)[:, None]
    unigram = np.zeros((count, states))
    np.add.at(unigram, (np.broadcast_to(rows, tokens.shape), tokens), 1.0 / length)
    steps = np.mod(np.diff(tokens, axis=1), states)
    moves = np.zeros((count, states))
    if length > 1:
        np.add.at(moves, (np.broadcast_to(rows, steps.shape), steps), 1.0 / (length - 1))
    return np.concatenate([unigram, moves], axis=1)


def frame_features(frames):
    """Per-feature mean and standard deviation over time, (N, 2D)."""
    frames = np.asarray(frames, dtype=np.float64)
    return np.concatenate([frames.mean(axis=1), frames.std(axis=1)], axis=1)


def _sqrt_psd(matrix):
    values, vectors = linalg.eigh(matrix)
    return (vectors * np.sqrt(np.maximum(values, 0.0))) @ vectors.T


def frechet_gaussian_distance(features_a, features_b):
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^1/2).

    The trace of the product root is taken from the symmetric form
    S_a^1/2 S_b S_a^1/2, whose eigenvalues are clamped at 0.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[1] != b.shape[1]:
        raise ConfigError('feature dimensions differ: %d vs %d' % (a.shape[1], b.shape[1]))
    if min(len(a), len(b)) < a.shape[1] + 1:
        raise ConfigError('need at least %d samples per side for %d features' % (a.shape[1] + 1, a.shape[1]))
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    if not (np.isfinite(cov_a).all() and np.isfinite(cov_b).all()):
        raise ConfigError('non-finite covariance')
    root_a = _sqrt_psd(cov_a)
    middle = root_a @ cov_b @ root_a
    cross = np.sqrt(np.maximum(linalg.eigvalsh((middle + middle.T) / 2), 0.0)).sum()
    diff = a.mean(axis=0) - b.mean(axis=0)
    return float(max(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross, 0.0))


def _label_scores(tokens, source):
    tokens = np.atleast_2d(tokens)
    return np.stack([source.log_likelihood(tokens, label) for label in range(source.labels)], axis=1)


def condition_accuracy(tokens, labels, source):
    """Share of sequences whose most likely label under the source is the one they were generated for."""
    return condition_precision(tokens, labels, source, 1)


def condition_precision(tokens, labels, source, top=3):
    """Share of sequences whose own label is among the `top` most likely labels under the source.

    Ties rank the generating label first.
    """
    if top < 1:
        raise ConfigError('top must be at least 1, got %d' % top)
    scores = _label_scores(tokens, source)
    labels = np.asarray(labels, dtype=np.int64)
    own = scores[np.arange(len(labels)), labels]
    better = (scores > own[:, None]).sum(axis=1)
    return float((better < top).mean())


def condition_distance(tokens, labels, source):
    """Mean per-token negative log-likelihood under the chain of each sequence's own label."""
    tokens = np.atleast_2d(tokens)
    labels = np.asarray(labels, dtype=np.int64)
    own = _label_scores(tokens, source)[np.arange(len(labels)), labels]
    return float(-own.mean() / tokens.shape[1])


def diversity(features, rng, pairs=300):
    """Mean Euclidean distance between randomly paired feature vectors."""
    features = np.asarray(features, dtype=np.float64)
    if len(features) < 2:
        raise ConfigError('diversity needs at least two samples')
    first = rng.integers(0, len(features), size=pairs)
    second = rng.integers(0, len(features), size=pairs)
    return float(np.linalg.norm(features[first] - features[second], axis=1).mean())


def multimodality(features, labels, rng, pairs=10):
    """Mean distance between pairs generated for the same condition."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    distances = []
    for label in np.unique(labels):
        group = features[labels == label]
        if len(group) < 2:
            continue
        first = rng.integers(0, len(group), size=pairs)
        second = rng.integers(0, len(group), size=pairs)
        distances.append(np.linalg.norm(group[first] - group[second], axis=1))
    if not distances:
        raise ConfigError('multimodality needs two samples of at least one condition')
    return float(np.concatenate(distances).mean())


def mean_confidence_interval(values):
    """Mean and 95% half-width, 1.96 sigma / sqrt(n)."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(1.96 * values.std() / np.sqrt(len(values)))
