import numpy as np
import pytest

from checkpoint import save_checkpoint, load_checkpoint, save_model, restore_model, model_tensors
from config import load_settings
from errors import CheckpointError, ModelError
from tokenizer import VQVAE
from transformer import BadTransformer


def as_float32(arrays):
    return {name: np.asarray(value, dtype=np.float32) for name, value in arrays.items()}


@pytest.mark.unittest
def test_round_trip_is_bit_exact(small_model_config, rng, tmp_path):
    model = BadTransformer(small_model_config, rng)
    path = str(tmp_path / 'model.ckpt')
    save_model(path, 'transformer', model, {'transformer.layers': '3'})
    checkpoint = load_checkpoint(path)
    expected = as_float32(model.state())
    assert checkpoint.module == 'transformer' and checkpoint.version == 1
    assert list(checkpoint.tensors) == list(expected)
    assert all(np.array_equal(checkpoint.tensors[name], expected[name]) for name in expected)
    assert all(checkpoint.tensors[name].dtype == np.float32 for name in expected)

    restored = restore_model(BadTransformer(small_model_config, np.random.default_rng(5)), checkpoint,
                             'transformer')
    assert all(np.array_equal(value, expected[name]) for name, value in restored.state().items())


@pytest.mark.unittest
def test_scalar_and_empty_tensors(tmp_path):
    path = str(tmp_path / 'odd.ckpt')
    save_checkpoint(path, 'misc', {'scalar': np.float64(2.5), 'empty': np.zeros((0, 3)), 'vector': np.arange(3)})
    tensors = load_checkpoint(path).tensors
    assert tensors['scalar'].shape == () and tensors['scalar'] == 2.5
    assert tensors['empty'].shape == (0, 3)
    assert tensors['vector'].tolist() == [0.0, 1.0, 2.0]


@pytest.mark.unittest
def test_tokenizer_round_trip_keeps_the_codebook(small_tokenizer_config, rng, tmp_path):
    model = VQVAE(small_tokenizer_config, rng)
    model.codebook.ema_counts[:] = np.arange(model.codebook.size)
    path = str(tmp_path / 'tokenizer.ckpt')
    save_model(path, 'tokenizer', model)
    restored = restore_model(VQVAE(small_tokenizer_config, np.random.default_rng(9)), load_checkpoint(path))
    for name, value in as_float32(model_tensors(model)).items():
        assert np.array_equal(model_tensors(restored)[name], value)
    assert restored.codebook.ema_counts.tolist() == list(range(small_tokenizer_config.codebook_size))


@pytest.mark.unittest
def test_manifest_echoes_the_config(small_model_config, rng, tmp_path):
    settings = load_settings()
    path = str(tmp_path / 'model.ckpt')
    save_model(path, 'transformer', BadTransformer(small_model_config, rng), settings.flatten())
    config = load_checkpoint(path).config
    assert config == settings.flatten()
    assert config['transformer.direction'] == 'suffix'
    with open(path, 'rb') as handle:
        assert b'config.training.learning_rate = 0.001' in handle.read()


@pytest.mark.unittest
@pytest.mark.parametrize('keep', [3, 40, -1, -8])
def test_truncated_file_is_rejected(small_model_config, rng, tmp_path, keep):
    path = tmp_path / 'model.ckpt'
    save_model(str(path), 'transformer', BadTransformer(small_model_config, rng))
    blob = path.read_bytes()
    path.write_bytes(blob[:keep])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


@pytest.mark.unittest
def test_version_mismatch(tmp_path):
    manifest = b'format_version = 2\nmodule = transformer\n'
    path = tmp_path / 'future.ckpt'
    path.write_bytes(b'%d\n' % len(manifest) + manifest)
    with pytest.raises(CheckpointError, match='format version 2'):
        load_checkpoint(str(path))


@pytest.mark.unittest
@pytest.mark.parametrize('manifest,payload', [
    (b'format_version = 1\nmodule = m\nweights.a = 2@0\n', b'\0' * 8),
    (b'format_version = 1\nmodule = m\ntensor.a = 2@4\n', b'\0' * 8),
    (b'format_version = 1\nmodule = m\ntensor.a = 2@0\n', b'\0' * 12),
    (b'format_version = 1\ntensor.a = 2@0\n', b'\0' * 8),
    (b'format_version = 1\nmodule = m\ntensor.a = 2\n', b'\0' * 8),
    (b'format_version = 1\nmodule = m\nbroken line\n', b''),
])
def test_malformed_manifests(tmp_path, manifest, payload):
    path = tmp_path / 'bad.ckpt'
    path.write_bytes(b'%d\n' % len(manifest) + manifest + payload)
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


@pytest.mark.unittest
def test_missing_length_line(tmp_path):
    path = tmp_path / 'bad.ckpt'
    path.write_bytes(b'no newline at all')
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))
    path.write_bytes(b'abc\nformat_version = 1\n')
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


@pytest.mark.unittest
def test_restore_checks_module_and_leaves_the_model_alone(small_model_config, small_tokenizer_config, rng,
                                                          tmp_path):
    path = str(tmp_path / 'tokenizer.ckpt')
    save_model(path, 'tokenizer', VQVAE(small_tokenizer_config, rng))
    model = BadTransformer(small_model_config, rng)
    before = {name: value.copy() for name, value in model.state().items()}
    with pytest.raises(CheckpointError):
        restore_model(model, load_checkpoint(path), 'transformer')
    with pytest.raises(CheckpointError):
        restore_model(model, load_checkpoint(path))

    other = str(tmp_path / 'other.ckpt')
    save_model(other, 'transformer', BadTransformer(small_model_config, rng))
    checkpoint = load_checkpoint(other)
    del checkpoint.tensors['head.bias']
    with pytest.raises(ModelError):
        restore_model(model, checkpoint)
    assert all(np.array_equal(before[name], value) for name, value in model.state().items())
