"""
Conditional transformer over [sentence, time, x_1 .. x_T].

The first `cross_layers` blocks let every slot cross-attend to the prompt's
word embeddings; the remaining blocks are pre-norm self-attention under the
hybrid mask. Masked positions are embedded with Maskbook rows instead of
their (unknown) token.
"""
from dataclasses import dataclass

import numpy as np

from constants import Direction, MaskbookIndexing, CONDITION_SLOTS
from errors import ModelError
from layers import Module, Linear, LayerNorm, FeedForward, Attention, normal
from numerics import Tensor, as_tensor, embedding, concat, matmul, mul
from utils import get_logger

logger = get_logger('bad-transformer')


@dataclass
class ModelConfig:
    layers: int = 4
    d_model: int = 64
    heads: int = 4
    cross_layers: int = 2
    vocab_size: int = 8
    max_length: int = 16
    time_buckets: int = 64
    ffn_mult: int = 4
    text_vocab_size: int = 16
    direction: Direction = Direction.SUFFIX
    maskbook_indexing: MaskbookIndexing = MaskbookIndexing.POSITION

    def validate(self):
        if self.d_model % self.heads:
            raise ModelError('heads (%d) must divide d_model (%d)' % (self.heads, self.d_model))
        if not 0 <= self.cross_layers <= self.layers:
            raise ModelError('cross_layers (%d) must lie in [0, layers=%d]' % (self.cross_layers, self.layers))
        if self.vocab_size < 2 or self.max_length < 1 or self.time_buckets < 1:
            raise ModelError('vocab_size >= 2, max_length >= 1 and time_buckets >= 1 required')
        return self


@dataclass
class ConditionBundle:
    sentence: Tensor       # (B, 1, d)
    words: Tensor          # (B, Lw, d)
    word_mask: np.ndarray  # (B, Lw), True on real words

    @property
    def batch(self):
        return self.words.shape[0]


class PromptEncoder(Module):
    """Learned word table; the sentence embedding is the mean over the prompt's words."""

    def __init__(self, vocabulary, d_model, rng):
        self.table = normal(rng, (vocabulary, d_model), 0.02)

    def __call__(self, words):
        # word id 0 is padding
        words = np.atleast_2d(np.asarray(words, dtype=np.int64))
        word_mask = words > 0
        if not word_mask.any(axis=1).all():
            raise ModelError('every prompt needs at least one word')
        embedded = embedding(self.table, words)
        averaging = word_mask / word_mask.sum(axis=1, keepdims=True)
        sentence = matmul(averaging[:, None, :], embedded)
        return ConditionBundle(sentence, embedded, word_mask)


class CrossBlock(Module):
    def __init__(self, config, rng):
        self.norm = LayerNorm(config.d_model)
        self.attention = Attention(config.d_model, config.heads, rng)
        self.ffn_norm = LayerNorm(config.d_model)
        self.ffn = FeedForward(config.d_model, config.ffn_mult, rng)

    def __call__(self, x, conditions):
        mask = conditions.word_mask[:, None, None, :]
        x = x + self.attention(self.norm(x), conditions.words, mask)
        return x + self.ffn(self.ffn_norm(x))


class SelfBlock(Module):
    def __init__(self, config, rng):
        self.norm = LayerNorm(config.d_model)
        self.attention = Attention(config.d_model, config.heads, rng)
        self.ffn_norm = LayerNorm(config.d_model)
        self.ffn = FeedForward(config.d_model, config.ffn_mult, rng)

    def __call__(self, x, allow):
        h = self.norm(x)
        x = x + self.attention(h, h, allow[:, None, :, :])
        return x + self.ffn(self.ffn_norm(x))


def time_buckets(masked, buckets):
    """Bucket of the masked ratio n_m / T for each row of a (B, T) mask."""
    masked = np.atleast_2d(np.asarray(masked, dtype=bool))
    ratio = masked.mean(axis=1)
    return np.minimum((ratio * buckets).astype(np.int64), buckets - 1)


class BadTransformer(Module):
    def __init__(self, config, rng):
        self.config = config.validate()
        d = config.d_model
        self.token_embedding = normal(rng, (config.vocab_size, d), 0.02)
        self.maskbook = normal(rng, (config.max_length, d), 0.02)
        self.positions = normal(rng, (config.max_length + CONDITION_SLOTS, d), 0.02)
        self.time_embedding = normal(rng, (config.time_buckets, d), 0.02)
        self.prompts = PromptEncoder(config.text_vocab_size, d, rng)
        self.cross_blocks = [CrossBlock(config, rng) for _ in range(config.cross_layers)]
        self.self_blocks = [SelfBlock(config, rng) for _ in range(config.layers - config.cross_layers)]
        self.final_norm = LayerNorm(d)
        self.head = Linear(d, config.vocab_size, rng, std=0.02)

    def encode_prompts(self, words):
        return self.prompts(words)

    def embed_inputs(self, tokens, masked, maskbook_rows, conditions):
        """(B, T + 2, d): sentence, time, then token or Maskbook embeddings plus positions."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        masked = np.atleast_2d(np.asarray(masked, dtype=bool))
        rows = np.atleast_2d(np.asarray(maskbook_rows, dtype=np.int64))
        batch, length = tokens.shape
        if length > self.config.max_length:
            raise ModelError('sequence of length %d exceeds max_length %d' % (length, self.config.max_length))
        if masked.shape != tokens.shape or rows.shape != tokens.shape:
            raise ModelError('tokens %s, mask %s and Maskbook rows %s disagree'
                             % (tokens.shape, masked.shape, rows.shape))
        if conditions.batch != batch:
            raise ModelError('%d prompts for a batch of %d' % (conditions.batch, batch))
        # masked positions may hold a sentinel; their token embedding is discarded
        visible = embedding(self.token_embedding, np.where(masked, 0, tokens))
        hidden = embedding(self.maskbook, np.where(masked, rows, 0))
        weight = masked[..., None].astype(np.float64)
        sequence = mul(visible, 1.0 - weight) + mul(hidden, weight)
        time = embedding(self.time_embedding, time_buckets(masked, self.config.time_buckets)[:, None])
        x = concat([conditions.sentence, time, sequence], axis=1)
        return x + self.positions[:length + CONDITION_SLOTS]

    def forward(self, embedded, allow, conditions):
        """Logits (B, T, K) for the sequence slots; `allow` is (B, T + 2, T + 2) or (T + 2, T + 2)."""
        allow = np.asarray(allow, dtype=bool)
        if allow.ndim == 2:
            allow = np.broadcast_to(allow, (embedded.shape[0],) + allow.shape)
        if allow.shape != (embedded.shape[0], embedded.shape[1], embedded.shape[1]):
            raise ModelError('attention mask %s does not cover inputs %s' % (allow.shape, embedded.shape))
        x = as_tensor(embedded)
        for block in self.cross_blocks:
            x = block(x, conditions)
        for block in self.self_blocks:
            x = block(x, allow)
        logits = self.head(self.final_norm(x))
        return logits[:, CONDITION_SLOTS:, :]

    def __call__(self, tokens, masked, maskbook_rows, allow, words):
        conditions = self.encode_prompts(words)
        return self.forward(self.embed_inputs(tokens, masked, maskbook_rows, conditions), allow, conditions)

    def logits_for(self, tokens, plans, words):
        """Logits under a list of corruption plans, one per row of `tokens`."""
        masked = np.stack([plan.masked for plan in plans])
        rows = np.stack([plan.maskbook_rows for plan in plans])
        allow = np.stack([plan.attention.allow for plan in plans])
        return self(tokens, masked, rows, allow, words)
