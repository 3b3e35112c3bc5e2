from dataclasses import replace

import numpy as np
import pytest

from constants import Direction, MaskbookIndexing, CONDITION_SLOTS
from corruption import CorruptionConfig, plan_for, sample_permutation
from errors import ModelError
from numerics import no_grad
from oracles import leakage_suite
from primitives import Permutation
from training import bad_objective
from transformer import ModelConfig, BadTransformer, time_buckets


def mask_config(config):
    return CorruptionConfig(vocabulary_size=config.vocab_size, direction=config.direction,
                            maskbook_indexing=config.maskbook_indexing)


@pytest.mark.unittest
def test_output_has_one_row_per_position(small_model_config, rng):
    model = BadTransformer(small_model_config, rng)
    plans = [plan_for(rng.random(6) < 0.5, sample_permutation(6, rng), mask_config(small_model_config), 8)
             for _ in range(2)]
    logits = model.logits_for(rng.integers(0, 5, size=(2, 6)), plans, np.array([[1, 2], [1, 3]]))
    assert logits.shape == (2, 6, 5)
    assert np.isfinite(logits.data).all()


@pytest.mark.unittest
def test_shared_mask_broadcasts_over_the_batch(small_model_config, rng):
    model = BadTransformer(small_model_config, rng)
    masked = np.array([True, False, True, False])
    plan = plan_for(masked, Permutation.identity(4), mask_config(small_model_config), 8)
    conditions = model.encode_prompts([[1, 2], [1, 3]])
    tokens = rng.integers(0, 5, size=(2, 4))
    embedded = model.embed_inputs(tokens, np.stack([masked] * 2), np.stack([plan.maskbook_rows] * 2), conditions)
    shared = model.forward(embedded, plan.attention.allow, conditions)
    stacked = model.forward(embedded, np.stack([plan.attention.allow] * 2), conditions)
    assert np.array_equal(shared.data, stacked.data)
    with pytest.raises(ModelError):
        model.forward(embedded, np.ones((3, 3), dtype=bool), conditions)


@pytest.mark.unittest
def test_no_information_leaks_through_the_mask(small_model_config, rng):
    result = leakage_suite(rng, draws=30, config=small_model_config)
    assert result.passed


@pytest.mark.unittest
def test_no_information_leaks_in_prefix_mode(prefix_model_config, rng):
    assert leakage_suite(rng, draws=30, config=prefix_model_config).passed


@pytest.mark.unittest
def test_no_information_leaks_with_rank_indexed_maskbook(small_model_config, rng):
    config = replace(small_model_config, maskbook_indexing=MaskbookIndexing.RANK)
    assert leakage_suite(rng, draws=20, config=config).passed


@pytest.mark.unittest
def test_masked_token_values_are_ignored(small_model_config, rng):
    model = BadTransformer(small_model_config, rng)
    masked = np.array([False, True, True, False, True])
    plan = plan_for(masked, sample_permutation(5, rng), mask_config(small_model_config), 8)
    tokens = rng.integers(0, 5, size=(1, 5))
    other = tokens.copy()
    other[0, masked] = (other[0, masked] + 1) % 5
    with no_grad():
        a = model.logits_for(tokens, [plan], [[1, 2]]).data
        b = model.logits_for(other, [plan], [[1, 2]]).data
    assert np.array_equal(a, b)


@pytest.mark.unittest
def test_single_masked_position_ignores_the_order(small_model_config, rng):
    model = BadTransformer(small_model_config, rng)
    masked = np.zeros(6, dtype=bool)
    masked[3] = True
    tokens = rng.integers(0, 5, size=(1, 6))
    with no_grad():
        logits = [model.logits_for(tokens, [plan_for(masked, sample_permutation(6, rng),
                                                     mask_config(small_model_config), 8)], [[1, 2]]).data
                  for _ in range(5)]
    assert all(np.array_equal(logits[0], other) for other in logits[1:])


@pytest.mark.unittest
def test_reordering_changes_only_masked_rows(small_model_config, rng):
    model = BadTransformer(small_model_config, rng)
    masked = np.array([False, True, True, False, True, False])
    tokens = rng.integers(0, 5, size=(1, 6))
    config = mask_config(small_model_config)
    forward_plan = plan_for(masked, Permutation.identity(6), config, 8)
    backward_plan = plan_for(masked, Permutation.from_order(np.arange(6)[::-1]), config, 8)
    with no_grad():
        forward = model.logits_for(tokens, [forward_plan], [[1, 2]]).data
        backward = model.logits_for(tokens, [backward_plan], [[1, 2]]).data
    assert np.array_equal(forward[0, ~masked], backward[0, ~masked])
    for position in np.flatnonzero(masked):
        assert not np.array_equal(forward[0, position], backward[0, position])


@pytest.mark.unittest
@pytest.mark.parametrize('direction', list(Direction))
def test_loss_ignores_the_order_of_unmasked_positions(small_model_config, rng, direction):
    model_config = replace(small_model_config, direction=direction)
    model = BadTransformer(model_config, rng)
    masked = np.array([True, False, True, False, False, True, False])
    order = sample_permutation(7, rng).order
    # reverse the unmasked positions among the ranks they hold
    slots = np.flatnonzero(~masked[order])
    relabeled = order.copy()
    relabeled[slots] = order[slots][::-1]
    targets = rng.integers(0, 5, size=(1, 7))
    losses = []
    for permutation in (order, relabeled):
        plan = plan_for(masked, Permutation.from_order(permutation), mask_config(model_config), 8)
        with no_grad():
            logits = model.logits_for(targets, [plan], [[1, 2]])
        losses.append(bad_objective(logits, targets, masked[None], 0.1).item())
    assert losses[0] == losses[1]


@pytest.mark.unittest
def test_prompts_change_the_output(small_model_config, rng):
    model = BadTransformer(small_model_config, rng)
    masked = np.ones(4, dtype=bool)
    plan = plan_for(masked, Permutation.identity(4), mask_config(small_model_config), 8)
    tokens = np.zeros((1, 4), dtype=np.int64)
    with no_grad():
        a = model.logits_for(tokens, [plan], [[1, 2]]).data
        b = model.logits_for(tokens, [plan], [[1, 3]]).data
    assert not np.allclose(a, b)


@pytest.mark.unittest
def test_same_seed_gives_the_same_model(small_model_config):
    a = BadTransformer(small_model_config, np.random.default_rng(3)).state()
    b = BadTransformer(small_model_config, np.random.default_rng(3)).state()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[name], b[name]) for name in a)


@pytest.mark.unittest
def test_state_round_trip(small_model_config, rng):
    source = BadTransformer(small_model_config, rng)
    target = BadTransformer(small_model_config, np.random.default_rng(99))
    target.load_state(source.state())
    assert all(np.array_equal(source.state()[name], value) for name, value in target.state().items())
    state = source.state()
    state.pop('head.weight')
    with pytest.raises(ModelError):
        target.load_state(state)


@pytest.mark.unittest
def test_parameter_layout(small_model_config, rng):
    params = BadTransformer(small_model_config, rng).parameters()
    assert params['maskbook'].shape == (8, 16)
    assert params['positions'].shape == (8 + CONDITION_SLOTS, 16)
    assert any(name.startswith('cross_blocks.0.') for name in params)
    assert any(name.startswith('self_blocks.1.') for name in params)
    assert not any(name.startswith('self_blocks.2.') for name in params)


@pytest.mark.unittest
@pytest.mark.parametrize('changes', [dict(heads=3), dict(cross_layers=4), dict(vocab_size=1), dict(max_length=0)])
def test_invalid_configs(small_model_config, changes):
    with pytest.raises(ModelError):
        replace(small_model_config, **changes).validate()


@pytest.mark.unittest
def test_input_errors(small_model_config, rng):
    model = BadTransformer(small_model_config, rng)
    conditions = model.encode_prompts([[1, 2]])
    with pytest.raises(ModelError):
        model.embed_inputs(np.zeros((1, 9), dtype=np.int64), np.zeros((1, 9), dtype=bool),
                           np.zeros((1, 9), dtype=np.int64), conditions)
    with pytest.raises(ModelError):
        model.embed_inputs(np.zeros((1, 4), dtype=np.int64), np.zeros((1, 3), dtype=bool),
                           np.zeros((1, 4), dtype=np.int64), conditions)
    with pytest.raises(ModelError):
        model.embed_inputs(np.zeros((2, 4), dtype=np.int64), np.zeros((2, 4), dtype=bool),
                           np.zeros((2, 4), dtype=np.int64), conditions)
    with pytest.raises(ModelError):
        model.encode_prompts([[0, 0]])


@pytest.mark.unittest
def test_time_buckets():
    masked = np.array([[True, True, False, False], [True, True, True, True], [False, False, False, True]])
    assert time_buckets(masked, 64).tolist() == [32, 63, 16]
    assert time_buckets(masked, 1).tolist() == [0, 0, 0]


@pytest.mark.unittest
def test_default_config_is_valid():
    assert ModelConfig().validate().d_model == 64
