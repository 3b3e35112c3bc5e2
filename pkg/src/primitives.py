from dataclasses import dataclass, field

import numpy as np

from constants import Direction, CONDITION_SLOTS
from errors import MaskError


@dataclass(frozen=True)
class Permutation:
    # order[p] is the position decoded at rank p; rank[position] is p
    order: np.ndarray
    rank: np.ndarray

    @classmethod
    def from_order(cls, order):
        order = np.asarray(order, dtype=np.int64)
        if not np.array_equal(np.sort(order), np.arange(len(order))):
            raise MaskError('%s is not a permutation of 0..%d' % (order.tolist(), len(order) - 1))
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        return cls(order, rank)

    @classmethod
    def identity(cls, length):
        return cls.from_order(np.arange(length))

    def __len__(self):
        return len(self.order)

    def restricted(self, positions):
        """The given positions in rank order."""
        positions = np.asarray(positions, dtype=np.int64)
        return positions[np.argsort(self.rank[positions], kind='stable')]


@dataclass
class HybridAttentionMask:
    # (slots + T) x (slots + T); rows are queries, columns keys
    allow: np.ndarray
    condition_slots: int = CONDITION_SLOTS

    @property
    def size(self):
        return self.allow.shape[0]

    @property
    def sequence_block(self):
        n = self.condition_slots
        return self.allow[n:, n:]

    def to_text(self):
        return '\n'.join(''.join('1' if cell else '0' for cell in row) for row in self.allow) + '\n'

    @classmethod
    def from_text(cls, text, condition_slots=CONDITION_SLOTS):
        rows = [line.strip() for line in text.strip().splitlines() if line.strip()]
        if any(len(row) != len(rows) or set(row) - {'0', '1'} for row in rows):
            raise MaskError('mask text must be a square grid of 0/1')
        return cls(np.array([[c == '1' for c in row] for row in rows], dtype=bool), condition_slots)


@dataclass
class CorruptionPlan:
    masked: np.ndarray
    replaced: np.ndarray
    permutation: Permutation
    mask_ratio: float
    replace_ratio: float
    # Maskbook row feeding each masked position (ignored where unmasked)
    maskbook_rows: np.ndarray
    attention: HybridAttentionMask
    direction: Direction = Direction.SUFFIX

    @property
    def length(self):
        return len(self.masked)

    @property
    def masked_count(self):
        return int(self.masked.sum())

    @property
    def masked_positions(self):
        return np.flatnonzero(self.masked)

    @property
    def replaced_positions(self):
        return np.flatnonzero(self.replaced)


@dataclass
class GenerationState:
    tokens: np.ndarray
    masked: np.ndarray
    ranks: np.ndarray
    confidence: np.ndarray
    direction: Direction
    iteration: int = 0
    total_iterations: int = 0
    permutations: list = field(default_factory=list)

    @property
    def masked_count(self):
        # identical across the batch by construction
        return int(self.masked[0].sum()) if len(self.masked) else 0
