"""
Independent oracle suites: each recomputes a result the slow, obvious way
and compares it with the library. `selftest` runs all of them.
"""
import itertools
import math
from dataclasses import dataclass

import numpy as np

from constants import Direction, CONDITION_SLOTS
from corruption import build_hybrid_mask, CorruptionConfig, plan_for
from layers import Conv1d
from numerics import (Tensor, parameter, gradient_check, layer_norm, masked_attention, cross_entropy, conv1d,
                      upsample, embedding, gelu, relu, tensor_sum, square, mean, absolute, concat, reshape,
                      transpose, straight_through, precision, no_grad)
from primitives import Permutation
from sampling import cosine_schedule
from tokenizer import Codebook, quantize
from transformer import ModelConfig, BadTransformer, SelfBlock
from utils import get_logger, timed

logger = get_logger('bad-oracles')


@dataclass
class SuiteResult:
    name: str
    cases: int
    failures: int
    detail: str = ''

    @property
    def passed(self):
        return self.failures == 0


def brute_force_allow(masked, rank, direction, condition_slots=CONDITION_SLOTS):
    """Apply the attention rules pair by pair.

    Condition slots are visible to all and see only condition slots; every
    position sees unmasked positions; masked positions also see masked ones
    of later (suffix) or earlier (prefix) rank, themselves included; nothing
    sees a masked position otherwise.
    """
    n = condition_slots
    size = n + len(masked)
    allow = np.zeros((size, size), dtype=bool)
    for i in range(size):
        for j in range(size):
            if j < n:
                allow[i, j] = True
            elif i < n:
                allow[i, j] = False
            elif not masked[j - n]:
                allow[i, j] = True
            elif masked[i - n]:
                later = rank[j - n] >= rank[i - n]
                allow[i, j] = later if direction == Direction.SUFFIX else rank[j - n] <= rank[i - n]
    return allow


def mask_suite(rng, max_length=6, permutations=50):
    cases = failures = 0
    for length in range(1, max_length + 1):
        for bits in itertools.product([False, True], repeat=length):
            masked = np.array(bits, dtype=bool)
            for _ in range(permutations):
                permutation = Permutation.from_order(rng.permutation(length))
                for direction in Direction:
                    built = build_hybrid_mask(masked, permutation, direction).allow
                    cases += 1
                    if not np.array_equal(built, brute_force_allow(masked, permutation.rank, direction)):
                        failures += 1
    return SuiteResult('hybrid mask', cases, failures)


def linear_scan(latent, codes):
    best, best_distance = 0, math.inf
    for j, code in enumerate(codes):
        distance = 0.0
        for a, b in zip(latent, code):
            distance += (a - b) * (a - b)
        if distance < best_distance:
            best, best_distance = j, distance
    return best


def quantizer_suite(rng, cases=1000):
    failures = 0
    for case in range(cases):
        size, dim = int(rng.integers(2, 12)), int(rng.integers(1, 6))
        codes = rng.normal(size=(size, dim))
        if case % 4 == 0:
            # duplicated codes force an exact tie
            codes[rng.integers(1, size)] = codes[0]
            latent = codes[0] + rng.normal(scale=0.1, size=dim)
        elif case % 4 == 1:
            latent = codes[rng.integers(0, size)].copy()
        else:
            latent = rng.normal(size=dim)
        index, _ = quantize(latent, Codebook(codes))
        failures += index != linear_scan(latent.tolist(), codes.tolist())
    return SuiteResult('quantizer', cases, int(failures))


def schedule_suite(rng, cases=1000):
    failures = 0
    for _ in range(cases):
        iterations = int(rng.integers(1, 40))
        i = int(rng.integers(1, iterations + 1))
        length = int(rng.integers(1, 200))
        expected = 0 if i == iterations else math.floor(length * math.cos(math.pi * i / (2 * iterations)))
        failures += cosine_schedule(i, iterations, length) != expected
    return SuiteResult('cosine schedule', cases, int(failures))


def _gradient_cases(rng):
    mask = rng.random((3, 4)) < 0.6
    mask[:, 0] = True
    targets = rng.integers(0, 5, size=3)
    indices = rng.integers(0, 6, size=(2, 3))
    return {
        'square sum': (lambda x: tensor_sum(square(x)), [rng.normal(size=(3, 4))]),
        'gelu': (lambda x: tensor_sum(gelu(x)), [rng.normal(size=(3, 4))]),
        'relu': (lambda x: tensor_sum(square(relu(x))), [rng.normal(size=(3, 4))]),
        'abs': (lambda x: mean(absolute(x)), [rng.normal(size=(3, 4))]),
        'matmul': (lambda a, b: tensor_sum(square(a @ b)), [rng.normal(size=(2, 3)), rng.normal(size=(3, 4))]),
        'mul broadcast': (lambda a, b: tensor_sum(square(a * b)), [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
        'layer_norm': (lambda x, g, b: tensor_sum(square(layer_norm(x, g, b)) * x),
                       [rng.normal(size=(3, 5)), rng.normal(size=(5,)), rng.normal(size=(5,))]),
        'masked_attention': (lambda q, k, v: tensor_sum(square(masked_attention(q, k, v, mask))),
                             [rng.normal(size=(3, 2)), rng.normal(size=(4, 2)), rng.normal(size=(4, 3))]),
        'cross_entropy': (lambda x: cross_entropy(x, targets), [rng.normal(size=(3, 5))]),
        'conv1d': (lambda x, w, b: tensor_sum(square(conv1d(x, w, b, stride=2, padding=1))),
                   [rng.normal(size=(2, 8, 3)), rng.normal(size=(4, 3, 2)), rng.normal(size=(2,))]),
        'upsample': (lambda x: tensor_sum(square(upsample(x, 2)) * rng_weights(2, 8, 3)),
                     [rng.normal(size=(2, 4, 3))]),
        'embedding': (lambda t: tensor_sum(square(embedding(t, indices))), [rng.normal(size=(6, 3))]),
        'concat reshape transpose': (
            lambda a, b: tensor_sum(square(transpose(reshape(concat([a, b], axis=1), (2, 5, 2)), (0, 2, 1))[0])),
            [rng.normal(size=(2, 4)), rng.normal(size=(2, 6))]),
    }


def rng_weights(*shape):
    # fixed, non-uniform weights so upsample's summed gradient is non-trivial
    return np.arange(np.prod(shape), dtype=np.float64).reshape(shape) / np.prod(shape)


def gradient_suite(rng, tolerance=1e-4):
    cases = failures = 0
    details = []
    for name, (function, inputs) in _gradient_cases(rng).items():
        report = gradient_check(function, inputs, tolerance)
        cases += 1
        if not report.passed:
            failures += 1
            details.append('%s %.2e' % (name, report.max_relative_error))

    with precision(64):
        block = SelfBlock(ModelConfig(d_model=8, heads=2), rng)
        allow = rng.random((1, 5, 5)) < 0.5
        allow[..., 0] = True
        # the key bias shifts every score of a row equally, so its gradient is exactly zero
        params = {name: p for name, p in block.parameters().items() if not name.endswith('key.bias')}
        names = list(params)

        def block_loss(x, *weights):
            for name, weight in zip(names, weights):
                setattr_path(block, name, weight)
            return tensor_sum(square(block(x, allow)))
        report = gradient_check(block_loss, [rng.normal(size=(1, 5, 8))] + [p.data for p in params.values()],
                                tolerance)
        for name, p in params.items():
            setattr_path(block, name, p)
    cases += 1
    if not report.passed:
        failures += 1
        details.append('transformer block %.2e' % report.max_relative_error)
    return SuiteResult('gradients', cases, failures, ', '.join(details))


def setattr_path(module, dotted, value):
    *path, leaf = dotted.split('.')
    for part in path:
        module = module[int(part)] if isinstance(module, list) else getattr(module, part)
    setattr(module, leaf, value)


def straight_through_suite(rng, tolerance=1e-10):
    """Reconstruction gradient reaching E through the estimator equals the gradient at X."""
    with precision(64):
        decoder = Conv1d(3, 2, 3, rng, padding=1)
        frames = rng.normal(size=(1, 4, 2))
        latents = parameter(rng.normal(size=(1, 4, 3)))
        codes = parameter(rng.normal(size=(1, 4, 3)))
        mean(absolute(decoder(straight_through(latents, codes.data)) - frames)).backward()
        mean(absolute(decoder(codes) - frames)).backward()
        error = np.abs(latents.grad - codes.grad).max() / max(np.abs(codes.grad).max(), 1e-30)
    return SuiteResult('straight-through', 1, int(error > tolerance), 'relative error %.2e' % error)


def leakage_suite(rng, draws=100, tolerance=1e-6, config=None):
    """Perturb every key a query may not see; the query's logits must not move."""
    config = config or ModelConfig()
    failures = 0
    with precision(64), no_grad():
        model = BadTransformer(config, rng)
        length = config.max_length
        for _ in range(draws):
            masked = rng.random(length) < rng.uniform(0.2, 1.0)
            permutation = Permutation.from_order(rng.permutation(length))
            mask_config = CorruptionConfig(vocabulary_size=config.vocab_size, direction=config.direction,
                                           maskbook_indexing=config.maskbook_indexing)
            plan = plan_for(masked, permutation, mask_config, config.max_length, rng)
            tokens = rng.integers(0, config.vocab_size, size=(1, length))
            conditions = model.encode_prompts([[1, 2]])
            embedded = model.embed_inputs(tokens, plan.masked[None], plan.maskbook_rows[None], conditions)
            base = model.forward(embedded, plan.attention.allow, conditions).data
            for query in range(length):
                blocked = ~plan.attention.allow[CONDITION_SLOTS + query]
                if not blocked.any():
                    continue
                noise = rng.normal(size=embedded.shape) * blocked[None, :, None]
                moved = model.forward(Tensor(embedded.data + noise), plan.attention.allow, conditions).data
                failures += np.abs(moved[0, query] - base[0, query]).max() > tolerance
    return SuiteResult('no leakage', draws, int(failures))


@timed
def run_selftest(rng):
    suites = [mask_suite, quantizer_suite, schedule_suite, gradient_suite, straight_through_suite, leakage_suite]
    results = []
    for suite in suites:
        result = suite(rng)
        level = logger.info if result.passed else logger.error
        level('%-18s %6d cases %4d failures %s', result.name, result.cases, result.failures, result.detail)
        results.append(result)
    return results
