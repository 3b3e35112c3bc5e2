"""
Iterative decoders.

Both samplers start from a fully masked sequence (apart from known tokens
when editing) and unmask it over I iterations so that after iteration i
exactly cosine_schedule(i, I, U) of the U unknown positions are still
masked. OAAS unmasks in permutation-rank order; CBS keeps the most
confident predictions and re-masks the rest.
"""
from dataclasses import dataclass

import numpy as np

from constants import Direction, EditMode, SamplingMethod, ConfidenceMode
from corruption import CorruptionConfig, plan_for, sample_permutation
from errors import SamplingError
from numerics import no_grad, softmax_rows
from primitives import GenerationState, Permutation
from utils import get_logger, sample_categorical

logger = get_logger('bad-sampling')


@dataclass
class SamplingConfig:
    iterations: int = 10
    temperature: float = 1.0
    # 0 disables top-k filtering
    top_k: int = 0
    method: SamplingMethod = SamplingMethod.OAAS
    confidence: ConfidenceMode = ConfidenceMode.DISTRIBUTION
    # initial temperature of Gumbel noise on CBS log-confidence, annealed to 0
    gumbel_temperature: float = 0.0


def cosine_schedule(i, iterations, length):
    """Positions still masked after iteration i of I: floor(T cos(pi i / 2I)), 0 at i = I."""
    if iterations < 1:
        raise SamplingError('need at least one iteration, got %d' % iterations)
    if not 1 <= i <= iterations:
        raise SamplingError('iteration %d outside [1, %d]' % (i, iterations))
    if i == iterations:
        return 0
    return int(np.floor(length * np.cos(np.pi * i / (2 * iterations))))


def token_distribution(logits, temperature=1.0, top_k=0):
    if temperature <= 0:
        raise SamplingError('temperature must be positive, got %r' % (temperature,))
    probs = softmax_rows(np.asarray(logits, dtype=np.float64) / temperature)
    if 0 < top_k < probs.shape[-1]:
        threshold = np.sort(probs, axis=-1)[..., -top_k][..., None]
        probs = np.where(probs >= threshold, probs, 0.0)
        probs = probs / probs.sum(axis=-1, keepdims=True)
    return probs


def known_positions(mode, length):
    """Boolean mask of the positions an editing task holds fixed."""
    mode = EditMode(mode)
    quarter, half = length // 4, length // 2
    known = np.zeros(length, dtype=bool)
    if mode == EditMode.INPAINT:
        known[:quarter] = True
        known[length - quarter:] = True
    elif mode == EditMode.OUTPAINT:
        known[quarter:length - quarter] = True
    elif mode == EditMode.PREFIX:
        known[:half] = True
    else:
        known[length - half:] = True
    return known


def known_from_pairs(pairs, length):
    """(tokens, known mask) from (position, token) pairs; contradictions are errors."""
    tokens = np.full(length, -1, dtype=np.int64)
    known = np.zeros(length, dtype=bool)
    for position, token in pairs:
        if not 0 <= position < length:
            raise SamplingError('known position %d outside [0, %d)' % (position, length))
        if known[position] and tokens[position] != token:
            raise SamplingError('position %d given both %d and %d' % (position, tokens[position], token))
        tokens[position] = token
        known[position] = True
    return tokens, known


def _mask_config(model):
    return CorruptionConfig(vocabulary_size=model.config.vocab_size, direction=model.config.direction,
                            maskbook_indexing=model.config.maskbook_indexing)


def _initial_state(model, words, length, iterations, rng, tokens=None, known=None, permutations=None):
    words = np.atleast_2d(np.asarray(words, dtype=np.int64))
    batch = len(words)
    if length > model.config.max_length:
        raise SamplingError('length %d exceeds the model max_length %d' % (length, model.config.max_length))
    if iterations < 1:
        raise SamplingError('need at least one iteration, got %d' % iterations)
    if known is None:
        known = np.zeros((batch, length), dtype=bool)
    known = np.broadcast_to(np.asarray(known, dtype=bool), (batch, length)).copy()
    if tokens is None:
        tokens = np.full((batch, length), -1, dtype=np.int64)
    tokens = np.array(np.broadcast_to(tokens, (batch, length)), dtype=np.int64)
    if len(set(known.sum(axis=1).tolist())) > 1:
        raise SamplingError('every row of a batch needs the same number of known positions')
    if (tokens[known] < 0).any() or (tokens[known] >= model.config.vocab_size).any():
        raise SamplingError('known tokens must lie in [0, %d)' % model.config.vocab_size)
    tokens[~known] = -1
    if permutations is None:
        permutations = [sample_permutation(length, rng) for _ in range(batch)]
    if len(permutations) != batch or any(len(p) != length for p in permutations):
        raise SamplingError('need one permutation of length %d per sequence' % length)
    return words, GenerationState(
        tokens=tokens,
        masked=~known,
        ranks=np.stack([p.rank for p in permutations]),
        confidence=np.zeros((batch, length)),
        direction=model.config.direction,
        iteration=0,
        total_iterations=iterations,
        permutations=list(permutations),
    )


def _predict(model, state, words, config, rng):
    mask_config = _mask_config(model)
    plans = [plan_for(state.masked[b], state.permutations[b], mask_config, model.config.max_length, rng)
             for b in range(len(state.tokens))]
    with no_grad():
        logits = model.logits_for(np.where(state.masked, 0, state.tokens), plans, words).data
    return token_distribution(logits, config.temperature, config.top_k)


def oaas_generate(model, words, length, config, rng, known=None, tokens=None, permutations=None, trace=None):
    """Order-agnostic autoregressive sampling.

    A fresh permutation is drawn per sequence unless `permutations` is given.
    Suffix direction decodes the lowest remaining ranks first, prefix the
    highest. Each trace entry holds the decoded positions and their
    predictive distributions.
    """
    words, state = _initial_state(model, words, length, config.iterations, rng, tokens, known, permutations)
    unknown = state.masked_count
    order = []
    for b, permutation in enumerate(state.permutations):
        ranked = permutation.restricted(np.flatnonzero(state.masked[b]))
        order.append(ranked if state.direction == Direction.SUFFIX else ranked[::-1])
    order = np.array(order, dtype=np.int64).reshape(len(state.tokens), unknown)
    remaining = unknown
    rows = np.arange(len(state.tokens))[:, None]
    for i in range(1, config.iterations + 1):
        target = cosine_schedule(i, config.iterations, unknown)
        count = remaining - target
        state.iteration = i
        if count <= 0:
            continue
        decoded = order[:, unknown - remaining:unknown - remaining + count]
        probs = _predict(model, state, words, config, rng)[rows, decoded]
        state.tokens[rows, decoded] = sample_categorical(probs, rng)
        state.confidence[rows, decoded] = probs.max(axis=-1)
        state.masked[rows, decoded] = False
        remaining = target
        if trace is not None:
            trace.append({'iteration': i, 'decoded': decoded.copy(), 'probs': probs})
        logger.debug('oaas iteration %d decoded %d, %d masked', i, count, remaining)
    return state


def cbs_generate(model, words, length, config, rng, known=None, tokens=None, permutations=None, trace=None):
    """Confidence-based sampling.

    Every masked position is predicted each iteration; the most confident
    predictions are kept (ties to the lowest position) so that exactly
    cosine_schedule(i) positions stay masked, the rest are re-masked.
    """
    words, state = _initial_state(model, words, length, config.iterations, rng, tokens, known, permutations)
    unknown = state.masked_count
    for i in range(1, config.iterations + 1):
        target = cosine_schedule(i, config.iterations, unknown)
        state.iteration = i
        keep = state.masked_count - target
        if keep <= 0:
            continue
        probs = _predict(model, state, words, config, rng)
        drawn = sample_categorical(probs, rng)
        if ConfidenceMode(config.confidence) == ConfidenceMode.DISTRIBUTION:
            confidence = probs.max(axis=-1)
        else:
            confidence = np.take_along_axis(probs, drawn[..., None], axis=-1)[..., 0]
        score = np.log(np.maximum(confidence, 1e-300))
        if config.gumbel_temperature > 0:
            # linearly annealed, zero on the last iteration
            score = score + config.gumbel_temperature * (1.0 - i / config.iterations) * rng.gumbel(size=score.shape)
        retained = []
        for b in range(len(state.tokens)):
            candidates = np.flatnonzero(state.masked[b])
            ranked = candidates[np.lexsort((candidates, -score[b, candidates]))]
            chosen = ranked[:keep]
            state.tokens[b, chosen] = drawn[b, chosen]
            state.confidence[b, chosen] = confidence[b, chosen]
            state.masked[b, chosen] = False
            retained.append(np.sort(chosen))
        if trace is not None:
            trace.append({'iteration': i, 'retained': retained, 'score': score, 'probs': probs})
        logger.debug('cbs iteration %d kept %d, %d masked', i, keep, target)
    return state


SAMPLERS = {
    SamplingMethod.OAAS: oaas_generate,
    SamplingMethod.CBS: cbs_generate,
}


def generate(model, words, length, config, rng, **kwargs):
    return SAMPLERS[SamplingMethod(config.method)](model, words, length, config, rng, **kwargs)


def edit_generate(model, words, tokens, mode, config, rng, known=None):
    """Regenerate the positions an editing `mode` leaves open, holding the rest fixed.

    `tokens` is (B, T) (or (T,)); `known` overrides the mode's layout.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    words = np.atleast_2d(np.asarray(words, dtype=np.int64))
    if len(words) == 1 and len(tokens) > 1:
        words = np.repeat(words, len(tokens), axis=0)
    length = tokens.shape[1]
    if known is None:
        known = known_positions(mode, length)
    known = np.broadcast_to(np.asarray(known, dtype=bool), tokens.shape)
    if known.all():
        return GenerationState(tokens=tokens.copy(), masked=np.zeros(tokens.shape, dtype=bool),
                               ranks=np.tile(np.arange(length), (len(tokens), 1)),
                               confidence=np.ones(tokens.shape), direction=model.config.direction,
                               iteration=config.iterations, total_iterations=config.iterations,
                               permutations=[Permutation.identity(length) for _ in tokens])
    state = generate(model, words, length, config, rng, known=known, tokens=tokens)
    if not np.array_equal(state.tokens[known], tokens[known]):
        raise SamplingError('a known token was modified during editing')
    return state
