from dataclasses import replace

import numpy as np
import pytest

from errors import TokenizerError
from numerics import parameter, as_tensor, tensor_sum
from oracles import quantizer_suite, straight_through_suite
from sources import SineMotionSource
from tokenizer import (VQVAE, Codebook, quantize, quantize_batch, ema_update, reset_dead_codes, vq_loss,
                       codebook_usage, train_tokenizer, train_step)
from optim import AdamW


@pytest.mark.unittest
def test_quantize_examples():
    codebook = Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
    index, code = quantize([0.9, 0.8], codebook)
    assert index == 1 and np.array_equal(code, [1.0, 1.0])
    assert quantize([0.0, 0.0], codebook)[0] == 0
    # equidistant: lowest index wins
    assert quantize([0.5, 0.5], codebook)[0] == 0


@pytest.mark.unittest
def test_quantizer_matches_linear_scan(rng):
    result = quantizer_suite(rng)
    assert result.cases == 1000
    assert result.passed


@pytest.mark.unittest
def test_codebook_needs_two_codes():
    with pytest.raises(TokenizerError):
        Codebook(np.zeros((1, 3)))


@pytest.mark.unittest
@pytest.mark.parametrize('tau,expected', [(64, 16), (8, 2), (4, 1)])
def test_encode_length(small_tokenizer_config, rng, tau, expected):
    model = VQVAE(small_tokenizer_config, rng)
    latents = model.encode(rng.normal(size=(2, tau, 3)))
    assert latents.shape == (2, expected, 4)
    assert model.decode_latents(latents).shape == (2, tau, 3)


@pytest.mark.unittest
def test_encode_rejects_indivisible_length(small_tokenizer_config, rng):
    model = VQVAE(small_tokenizer_config, rng)
    with pytest.raises(TokenizerError):
        model.encode(rng.normal(size=(1, 7, 3)))


@pytest.mark.unittest
def test_decode_round_trip_shape_and_invalid_index(small_tokenizer_config, rng):
    model = VQVAE(small_tokenizer_config, rng)
    frames = rng.normal(size=(3, 16, 3))
    tokens = model.tokenize(frames)
    assert tokens.shape == (3, 4)
    assert model.detokenize(tokens).shape == frames.shape
    with pytest.raises(TokenizerError):
        model.decode(np.array([[0, 8, 1, 1]]))


@pytest.mark.unittest
def test_zero_decoder_gives_constant_output(small_tokenizer_config, rng):
    model = VQVAE(small_tokenizer_config, rng)
    model.zero_decoder()
    frames = rng.normal(size=(2, 16, 3))
    reconstruction, _, _, loss = model.forward(frames)
    assert np.array_equal(reconstruction.data, np.zeros_like(frames))
    assert np.isfinite(loss.total.item())


@pytest.mark.unittest
def test_vq_loss_vanishes_on_perfect_reconstruction(rng):
    frames = rng.normal(size=(1, 4, 2))
    latents = rng.normal(size=(1, 2, 3))
    loss = vq_loss(frames, as_tensor(frames), parameter(latents), latents.copy(), beta=0.25)
    assert loss.total.item() == 0.0


@pytest.mark.unittest
def test_vq_loss_without_commitment_leaves_latents_untouched(rng):
    frames = rng.normal(size=(1, 4, 2))
    latents = parameter(rng.normal(size=(1, 2, 3)))
    loss = vq_loss(frames, as_tensor(rng.normal(size=(1, 4, 2))), latents, rng.normal(size=(1, 2, 3)), beta=0.0)
    assert loss.commitment.item() == 0.0
    loss.codebook.backward()
    assert latents.grad is None


@pytest.mark.unittest
def test_commitment_gradient(rng):
    latents = parameter(rng.normal(size=(1, 2, 3)))
    codes = rng.normal(size=(1, 2, 3))
    loss = vq_loss(np.zeros((1, 4, 2)), as_tensor(np.zeros((1, 4, 2))), latents, codes, beta=0.5)
    loss.total.backward()
    assert np.allclose(latents.grad, 0.5 * 2 * (latents.data - codes) / latents.data.size)


@pytest.mark.unittest
def test_straight_through_matches_gradient_at_codes(rng):
    result = straight_through_suite(rng)
    assert result.passed, result.detail


@pytest.mark.unittest
def test_ema_update_converges_to_batch_mean(rng):
    codebook = Codebook(np.array([[5.0, 5.0], [-5.0, -5.0]]))
    latents = rng.normal(loc=1.0, size=(64, 2))
    indices = np.zeros(64, dtype=np.int64)
    for _ in range(3000):
        codebook = ema_update(codebook, latents, indices, 0.99)
    assert np.allclose(codebook.codes[0], latents.mean(axis=0), atol=1e-6)
    # an unassigned code decays towards dead
    assert codebook.ema_counts[1] < 1e-5


@pytest.mark.unittest
def test_ema_update_with_empty_batch_is_identity():
    codebook = Codebook(np.array([[0.0], [1.0]]))
    assert ema_update(codebook, np.zeros((0, 1)), np.zeros(0, dtype=np.int64), 0.99) is codebook
    with pytest.raises(TokenizerError):
        ema_update(codebook, np.zeros((1, 1)), np.zeros(1, dtype=np.int64), 1.0)


@pytest.mark.unittest
def test_reset_dead_codes(rng):
    codebook = Codebook(np.zeros((4, 2)))
    donors = rng.normal(size=(10, 2))
    assert reset_dead_codes(codebook, 0.5, donors, rng) is codebook

    codebook.ema_counts[:] = 0.0
    reset = reset_dead_codes(codebook, 1.0, donors, rng)
    assert all(any(np.array_equal(code, d) for d in donors) for code in reset.codes)
    assert np.array_equal(reset.ema_counts, np.ones(4))
    # the input is not modified
    assert np.array_equal(codebook.codes, np.zeros((4, 2)))


@pytest.mark.unittest
def test_resets_keep_two_clusters_alive(rng):
    # every code starts on the same far point, so code 0 takes all latents at first
    codebook = Codebook(np.full((4, 2), 10.0))
    centers = np.array([[-3.0, 0.0], [3.0, 0.0]])
    for step in range(3000):
        latents = centers[np.arange(64) % 2] + rng.normal(scale=0.1, size=(64, 2))
        codebook = ema_update(codebook, latents, quantize_batch(latents, codebook), 0.99)
        if step > 0 and step % 256 == 0:
            codebook = reset_dead_codes(codebook, 1.0, latents, rng)
    assert (codebook.ema_counts >= 1.0).sum() >= 2
    for center in centers:
        assert np.min(np.linalg.norm(codebook.codes - center, axis=1)) < 0.3


@pytest.mark.unittest
def test_quantize_batch_and_usage(rng):
    codebook = Codebook(np.array([[0.0], [10.0], [20.0]]))
    indices = quantize_batch(np.array([[[0.1], [9.0]], [[11.0], [0.2]]]), codebook)
    assert np.array_equal(indices, [[0, 1], [1, 0]])
    assert codebook_usage(indices, codebook.size) == pytest.approx(2 / 3)


@pytest.mark.unittest
def test_loss_decreases_on_a_fixed_batch(small_tokenizer_config, rng):
    source = SineMotionSource.desk(features=3, length=16)
    model = VQVAE(replace(small_tokenizer_config, decay_step=1000), rng)
    frames, _ = source.sample_frames(8, rng)
    model.codebook = reset_dead_codes(model.codebook, np.inf, model.encode(frames).data, rng)
    optimizer = AdamW(model.parameters(), 1e-3, (0.9, 0.99))
    losses = [train_step(model, frames, optimizer, step, rng)['recon_l1'] for step in range(100)]
    assert losses[-1] < losses[0]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


@pytest.mark.unittest
def test_training_loop_writes_metrics(small_tokenizer_config, rng, tmp_path):
    source = SineMotionSource.desk(features=3, length=16)
    model = VQVAE(small_tokenizer_config, rng)
    path = tmp_path / 'metrics.csv'
    rows = train_tokenizer(model, source, rng, metrics_path=str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == 'step,loss,recon_l1,codebook_loss,commit_loss,alive,lr'
    assert len(lines) == len(rows) + 1
    assert [row['step'] for row in rows] == [0, 5, 10, 15, 19]
    assert rows[-1]['lr'] == pytest.approx(1e-4)
