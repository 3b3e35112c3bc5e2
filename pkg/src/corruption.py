"""
Permutation-based corruption: which tokens are masked, in what order the mask
tokens depend on each other, which Maskbook rows feed them, and the hybrid
attention mask that ties it together.

Mask grids put the condition slots (sentence, time) first, then the T
sequence positions. A condition slot is visible to every row and only looks
at condition slots itself.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from constants import (Direction, MaskbookIndexing, CONDITION_SLOTS, LOW_RATIO_PROBABILITY,
                       MAX_REPLACE_RATIO)
from errors import MaskError
from primitives import Permutation, HybridAttentionMask, CorruptionPlan


@dataclass
class CorruptionConfig:
    vocabulary_size: int = 64
    low_ratio_probability: float = LOW_RATIO_PROBABILITY
    max_replace_ratio: float = MAX_REPLACE_RATIO
    # fixed ratios instead of sampled ones
    mask_ratio: Optional[float] = None
    replace_ratio: Optional[float] = None
    direction: Direction = Direction.SUFFIX
    maskbook_indexing: MaskbookIndexing = MaskbookIndexing.POSITION
    condition_slots: int = CONDITION_SLOTS


def sample_mask_ratio(rng, low_ratio_probability=LOW_RATIO_PROBABILITY, size=None):
    """c_m ~ U(0, 0.5) with probability 0.1, U(0.5, 1) otherwise."""
    low = rng.random(size) < low_ratio_probability
    ratio = np.where(low, rng.uniform(0.0, 0.5, size), rng.uniform(0.5, 1.0, size))
    return float(ratio) if size is None else ratio


def masked_count(mask_ratio, length):
    # round half up, at least one and at most all positions
    count = np.clip(np.floor(np.asarray(mask_ratio) * length + 0.5), 1, length).astype(np.int64)
    return int(count) if count.ndim == 0 else count


def random_replace(tokens, vocabulary_size, rng, ratio=None, max_ratio=MAX_REPLACE_RATIO):
    """Swap floor(c_r * T) uniformly chosen positions for uniform random codes.

    Returns (tokens', replaced mask, c_r).
    """
    if vocabulary_size < 2:
        raise MaskError('random replacement needs at least two codes')
    tokens = np.array(tokens, dtype=np.int64)
    if ratio is None:
        ratio = float(rng.uniform(0.0, max_ratio))
    count = int(np.floor(ratio * len(tokens)))
    replaced = np.zeros(len(tokens), dtype=bool)
    if count:
        positions = rng.choice(len(tokens), size=count, replace=False)
        tokens[positions] = rng.integers(0, vocabulary_size, size=count)
        replaced[positions] = True
    return tokens, replaced, ratio


def sample_permutation(length, rng):
    if length < 1:
        raise MaskError('permutation length must be at least 1')
    return Permutation.from_order(rng.permutation(length))


def build_bidirectional_mask(masked, condition_slots=CONDITION_SLOTS):
    """att_bi: every row sees the condition slots; sequence rows also see unmasked positions."""
    masked = np.asarray(masked, dtype=bool)
    n = condition_slots
    allow = np.zeros((n + len(masked), n + len(masked)), dtype=bool)
    allow[:, :n] = True
    allow[n:, n:] = ~masked[None, :]
    return allow


def build_permuted_causal_mask(masked, permutation, direction=Direction.SUFFIX, condition_slots=CONDITION_SLOTS):
    """att_per: a masked position sees masked positions of later (suffix) or earlier (prefix) rank."""
    masked = np.asarray(masked, dtype=bool)
    if len(permutation) != len(masked):
        raise MaskError('permutation covers %d positions, sequence has %d' % (len(permutation), len(masked)))
    rank = permutation.rank
    if direction == Direction.SUFFIX:
        ordered = rank[None, :] >= rank[:, None]
    elif direction == Direction.PREFIX:
        ordered = rank[None, :] <= rank[:, None]
    else:
        raise MaskError('unknown direction %r' % (direction,))
    n = condition_slots
    allow = np.zeros((n + len(masked), n + len(masked)), dtype=bool)
    allow[n:, n:] = masked[:, None] & masked[None, :] & ordered
    return allow


def build_hybrid_mask(masked, permutation, direction=Direction.SUFFIX, condition_slots=CONDITION_SLOTS):
    """att_hyb = att_bi OR att_per."""
    allow = (build_bidirectional_mask(masked, condition_slots)
             | build_permuted_causal_mask(masked, permutation, direction, condition_slots))
    if not allow.any(axis=1).all():
        raise MaskError('hybrid mask has a row with no allowed key')
    return HybridAttentionMask(allow, condition_slots)


def maskbook_rows(masked, permutation, indexing, maskbook_size, rng=None):
    length = len(masked)
    if length > maskbook_size:
        raise MaskError('sequence of length %d exceeds the Maskbook (%d rows)' % (length, maskbook_size))
    if indexing == MaskbookIndexing.POSITION:
        return np.arange(length, dtype=np.int64)
    if indexing == MaskbookIndexing.RANK:
        return permutation.rank.copy()
    if indexing == MaskbookIndexing.RANDOM:
        rows = np.zeros(length, dtype=np.int64)
        count = int(np.sum(masked))
        rows[np.asarray(masked, dtype=bool)] = rng.choice(maskbook_size, size=count, replace=False)
        return rows
    raise MaskError('unknown Maskbook indexing %r' % (indexing,))


def plan_for(masked, permutation, config, maskbook_size, rng=None, replaced=None,
             mask_ratio=None, replace_ratio=0.0):
    """Assemble a plan for an explicit masked set and ordering."""
    masked = np.asarray(masked, dtype=bool)
    if replaced is None:
        replaced = np.zeros(len(masked), dtype=bool)
    if mask_ratio is None:
        mask_ratio = masked.mean() if len(masked) else 0.0
    return CorruptionPlan(
        masked=masked,
        replaced=np.asarray(replaced, dtype=bool),
        permutation=permutation,
        mask_ratio=float(mask_ratio),
        replace_ratio=float(replace_ratio),
        maskbook_rows=maskbook_rows(masked, permutation, config.maskbook_indexing, maskbook_size, rng),
        attention=build_hybrid_mask(masked, permutation, config.direction, config.condition_slots),
        direction=config.direction,
    )


def corrupt(tokens, maskbook_size, rng, config):
    """Replace, mask and order one sequence.

    Returns (corrupted tokens, plan, targets); targets are the tokens before
    replacement. Embedding the corrupted tokens is the model's job.
    """
    targets = np.array(tokens, dtype=np.int64)
    length = len(targets)
    if length > maskbook_size:
        raise MaskError('sequence of length %d exceeds the Maskbook (%d rows)' % (length, maskbook_size))
    corrupted, replaced, replace_ratio = random_replace(
        targets, config.vocabulary_size, rng, config.replace_ratio, config.max_replace_ratio)
    ratio = config.mask_ratio
    if ratio is None:
        ratio = sample_mask_ratio(rng, config.low_ratio_probability)
    count = masked_count(ratio, length)
    masked = np.zeros(length, dtype=bool)
    masked[rng.choice(length, size=count, replace=False)] = True
    permutation = sample_permutation(length, rng)
    plan = plan_for(masked, permutation, config, maskbook_size, rng, replaced, ratio, replace_ratio)
    return corrupted, plan, targets


def corrupt_batch(tokens, maskbook_size, rng, config):
    corrupted, plans = [], []
    for row in np.asarray(tokens):
        c, plan, _ = corrupt(row, maskbook_size, rng, config)
        corrupted.append(c)
        plans.append(plan)
    return np.stack(corrupted), plans, np.array(tokens, dtype=np.int64)


def stack_attention(plans):
    return np.stack([plan.attention.allow for plan in plans])
