"""
Single-file checkpoints.

    <manifest byte length>\n
    <UTF-8 manifest>
    <little-endian float32 payload>

The manifest is `key = value` lines: format_version, module, one
`config.<section.key>` line per echoed setting and one
`tensor.<name> = <d0>x<d1>..@<offset>` line per tensor, offsets counted in
floats. Every check runs before any state is handed back.
"""
from dataclasses import dataclass, field

import numpy as np

from constants import CHECKPOINT_VERSION
from errors import CheckpointError
from tokenizer import Codebook
from utils import get_logger

logger = get_logger('bad-checkpoint')

PAYLOAD_DTYPE = np.dtype('<f4')
CODEBOOK_PREFIX = 'codebook.'


@dataclass
class Checkpoint:
    module: str
    tensors: dict
    config: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _shape_text(shape):
    return 'x'.join(str(extent) for extent in shape)


def _parse_shape(text):
    try:
        return tuple(int(extent) for extent in text.split('x')) if text else ()
    except ValueError:
        raise CheckpointError('malformed tensor shape %r' % text)


def save_checkpoint(path, module, tensors, config=None):
    lines = ['format_version = %d' % CHECKPOINT_VERSION, 'module = %s' % module]
    for key, value in sorted((config or {}).items()):
        lines.append('config.%s = %s' % (key, value))
    offset = 0
    arrays = []
    for name, value in tensors.items():
        array = np.asarray(value, dtype=PAYLOAD_DTYPE)
        lines.append('tensor.%s = %s@%d' % (name, _shape_text(array.shape), offset))
        offset += array.size
        arrays.append(array)
    manifest = ('\n'.join(lines) + '\n').encode('utf-8')
    with open(path, 'wb') as handle:
        handle.write(b'%d\n' % len(manifest))
        handle.write(manifest)
        for array in arrays:
            handle.write(array.tobytes())
    logger.info('saved %s checkpoint with %d tensors (%d floats) to %s', module, len(arrays), offset, path)


def load_checkpoint(path):
    with open(path, 'rb') as handle:
        blob = handle.read()
    newline = blob.find(b'\n')
    if newline < 0:
        raise CheckpointError('%s: missing manifest length line' % path)
    try:
        manifest_length = int(blob[:newline].decode('ascii'))
    except (UnicodeDecodeError, ValueError):
        raise CheckpointError('%s: malformed manifest length line' % path)
    manifest_end = newline + 1 + manifest_length
    if manifest_end > len(blob):
        raise CheckpointError('%s: truncated manifest' % path)
    try:
        manifest = blob[newline + 1:manifest_end].decode('utf-8')
    except UnicodeDecodeError:
        raise CheckpointError('%s: manifest is not UTF-8' % path)

    entries = {}
    for line in manifest.splitlines():
        key, sep, value = line.partition(' = ')
        if not sep:
            raise CheckpointError('%s: malformed manifest line %r' % (path, line))
        entries[key] = value
    try:
        version = int(entries.pop('format_version'))
        module = entries.pop('module')
    except (KeyError, ValueError):
        raise CheckpointError('%s: manifest lacks format_version or module' % path)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError('%s: format version %d, expected %d' % (path, version, CHECKPOINT_VERSION))

    if (len(blob) - manifest_end) % PAYLOAD_DTYPE.itemsize:
        raise CheckpointError('%s: payload is not a whole number of float32 values' % path)
    payload = np.frombuffer(blob[manifest_end:], dtype=PAYLOAD_DTYPE)
    config, tensors, expected = {}, {}, 0
    for key, value in entries.items():
        if key.startswith('config.'):
            config[key[len('config.'):]] = value
        elif key.startswith('tensor.'):
            shape_text, sep, offset_text = value.rpartition('@')
            if not sep:
                raise CheckpointError('%s: tensor entry %r lacks an offset' % (path, value))
            shape = _parse_shape(shape_text)
            offset, size = int(offset_text), int(np.prod(shape, dtype=np.int64))
            if offset != expected or offset + size > len(payload):
                raise CheckpointError('%s: tensor %s does not fit the payload' % (path, key))
            tensors[key[len('tensor.'):]] = payload[offset:offset + size].reshape(shape).copy()
            expected = offset + size
        else:
            raise CheckpointError('%s: unknown manifest key %r' % (path, key))
    if expected != len(payload):
        raise CheckpointError('%s: payload holds %d floats, manifest describes %d' % (path, len(payload), expected))
    return Checkpoint(module, tensors, config, version)


def model_tensors(model):
    """Parameters plus, for a tokenizer, the EMA codebook state."""
    tensors = dict(model.state())
    codebook = getattr(model, 'codebook', None)
    if codebook is not None:
        tensors[CODEBOOK_PREFIX + 'codes'] = codebook.codes
        tensors[CODEBOOK_PREFIX + 'ema_counts'] = codebook.ema_counts
        tensors[CODEBOOK_PREFIX + 'ema_sums'] = codebook.ema_sums
    return tensors


def save_model(path, module, model, config=None):
    save_checkpoint(path, module, model_tensors(model), config)


def restore_model(model, checkpoint, module=None):
    if module is not None and checkpoint.module != module:
        raise CheckpointError('checkpoint holds a %s, expected a %s' % (checkpoint.module, module))
    params = {k: v for k, v in checkpoint.tensors.items() if not k.startswith(CODEBOOK_PREFIX)}
    codebook = {k[len(CODEBOOK_PREFIX):]: v for k, v in checkpoint.tensors.items() if k.startswith(CODEBOOK_PREFIX)}
    if codebook and getattr(model, 'codebook', None) is None:
        raise CheckpointError('checkpoint carries a codebook the model has no place for')
    if codebook and set(codebook) != {'codes', 'ema_counts', 'ema_sums'}:
        raise CheckpointError('incomplete codebook entries %s' % sorted(codebook))
    restored = Codebook(codebook['codes'], codebook['ema_counts'], codebook['ema_sums']) if codebook else None
    model.load_state(params)
    if restored is not None:
        model.codebook = restored
    return model
