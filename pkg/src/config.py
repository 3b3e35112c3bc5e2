"""
`section.key = value` configuration.

Values are layered with a ChainMap (command-line overrides, then the file,
then the preset) and materialized into the per-module dataclasses; a key
no layer sets keeps the dataclass default, which is the desk setting.
"""
import enum
import typing
from collections import ChainMap
from dataclasses import dataclass, fields, field

from constants import DataSource
from corruption import CorruptionConfig
from errors import ConfigError, ModelError, TrainingError
from sampling import SamplingConfig
from tokenizer import TokenizerConfig
from training import TrainConfig
from transformer import ModelConfig


@dataclass
class NumericsConfig:
    precision: int = 64


@dataclass
class DataConfig:
    source: DataSource = DataSource.MARKOV
    states: int = 8
    labels: int = 2
    # training set size and token sequence length
    count: int = 50000
    length: int = 16
    # sinusoid frames: features per frame and frames per sequence
    features: int = 8
    frames: int = 64


@dataclass
class EvalConfig:
    samples_per_label: int = 2000
    repeats: int = 1
    diversity_pairs: int = 300
    multimodality_pairs: int = 10


# keys filled in from other sections
_DERIVED = {
    ('corruption', 'vocabulary_size'), ('corruption', 'direction'), ('corruption', 'maskbook_indexing'),
    ('corruption', 'condition_slots'), ('tokenizer', 'features'),
}

SECTIONS = {
    'numerics': NumericsConfig,
    'data': DataConfig,
    'tokenizer': TokenizerConfig,
    'transformer': ModelConfig,
    'corruption': CorruptionConfig,
    'training': TrainConfig,
    'sampling': SamplingConfig,
    'eval': EvalConfig,
}

desk_preset = {
    'tokenizer.width': '48',
    'tokenizer.learning_rate': '1e-3',
    'tokenizer.final_learning_rate': '1e-4',
    'tokenizer.steps': '6000',
    'tokenizer.decay_step': '4500',
    'tokenizer.batch_size': '32',
    'tokenizer.log_every': '50',
}

full_scale_preset = {
    'data.source': 'tokens',
    'data.frames': '64',
    'data.length': '16',
    'tokenizer.codebook_size': '8192',
    'tokenizer.code_dim': '32',
    'tokenizer.downsample': '4',
    'tokenizer.width': '512',
    'tokenizer.res_blocks': '2',
    'tokenizer.beta': '0.02',
    'tokenizer.ema_decay': '0.99',
    'tokenizer.learning_rate': '2e-4',
    'tokenizer.final_learning_rate': '1e-5',
    'tokenizer.decay_step': '200000',
    'tokenizer.steps': '300000',
    'tokenizer.batch_size': '256',
    'tokenizer.beta1': '0.9',
    'tokenizer.beta2': '0.99',
    'transformer.layers': '18',
    'transformer.d_model': '1024',
    'transformer.heads': '16',
    'transformer.cross_layers': '2',
    'transformer.vocab_size': '8192',
    'transformer.max_length': '49',
    'training.learning_rate': '2e-4',
    'training.final_learning_rate': '1e-5',
    'training.decay_step': '150000',
    'training.steps': '300000',
    'training.batch_size': '128',
    'training.beta1': '0.5',
    'training.beta2': '0.99',
    'sampling.iterations': '10',
    'eval.repeats': '20',
}

PRESETS = {
    'desk': desk_preset,
    'paper-scale': full_scale_preset,
}


def _known_keys():
    keys = set()
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            if (section, f.name) in _DERIVED:
                continue
            keys.add('%s.%s' % (section, f.name))
    return keys


def parse_config_text(text, source='<config>'):
    """`section.key = value` lines; `#` starts a comment."""
    values = {}
    known = _known_keys()
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError('%s:%d: expected "section.key = value", got %r' % (source, number, raw))
        if key.count('.') != 1:
            raise ConfigError('%s:%d: key %r must be section.key' % (source, number, key))
        if key not in known:
            raise ConfigError('%s:%d: unknown key %r' % (source, number, key))
        values[key] = value
    return values


def read_config(path):
    with open(path) as handle:
        return parse_config_text(handle.read(), path)


def _convert(raw, hint, key):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        options = [arg for arg in typing.get_args(hint) if arg is not type(None)]
        if raw.lower() == 'none':
            return None
        return _convert(raw, options[0], key)
    try:
        if hint is bool:
            lowered = raw.lower()
            if lowered in ('true', 'yes', '1'):
                return True
            if lowered in ('false', 'no', '0'):
                return False
            raise ValueError(raw)
        if isinstance(hint, type) and issubclass(hint, enum.Enum):
            return hint(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return hint(raw)
    except ValueError:
        raise ConfigError('bad value %r for %s' % (raw, key))


def materialize(section, values):
    """Build one section's dataclass from `section.key` values."""
    cls = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        key = '%s.%s' % (section, f.name)
        if key in values:
            kwargs[f.name] = _convert(values[key], hints[f.name], key)
    return cls(**kwargs)


@dataclass
class Settings:
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    transformer: ModelConfig = field(default_factory=ModelConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def flatten(self):
        """Every setting as `section.key` -> text, for checkpoint manifests."""
        out = {}
        for section in SECTIONS:
            for f in fields(getattr(self, section)):
                if (section, f.name) in _DERIVED:
                    continue
                value = getattr(getattr(self, section), f.name)
                out['%s.%s' % (section, f.name)] = value.value if isinstance(value, enum.Enum) else str(value)
        return out


def load_settings(path=None, preset='desk', overrides=None):
    if preset not in PRESETS:
        raise ConfigError('unknown preset %r, choose from %s' % (preset, sorted(PRESETS)))
    layers = [overrides or {}]
    if path:
        layers.append(read_config(path))
    layers.append(PRESETS[preset])
    return build_settings(ChainMap(*layers))


def build_settings(values):
    unknown = set(values) - _known_keys()
    if unknown:
        raise ConfigError('unknown keys %s' % sorted(unknown))
    settings = Settings(**{section: materialize(section, values) for section in SECTIONS})
    model = settings.transformer
    settings.corruption.vocabulary_size = model.vocab_size
    settings.corruption.direction = model.direction
    settings.corruption.maskbook_indexing = model.maskbook_indexing
    data = settings.data
    if data.source == DataSource.MARKOV and model.vocab_size != data.states:
        raise ConfigError('transformer.vocab_size (%d) must equal data.states (%d) for the Markov source'
                          % (model.vocab_size, data.states))
    if data.source == DataSource.TOKENS:
        if model.vocab_size != settings.tokenizer.codebook_size:
            raise ConfigError('transformer.vocab_size must equal tokenizer.codebook_size for tokenized data')
        if data.frames != data.length * settings.tokenizer.downsample:
            raise ConfigError('data.frames must equal data.length * tokenizer.downsample')
    settings.tokenizer.features = data.features
    if data.length > model.max_length:
        raise ConfigError('data.length %d exceeds transformer.max_length %d' % (data.length, model.max_length))
    if model.text_vocab_size < data.labels + 2:
        raise ConfigError('transformer.text_vocab_size too small for %d labels' % data.labels)
    if settings.numerics.precision not in (32, 64):
        raise ConfigError('numerics.precision must be 32 or 64')
    try:
        model.validate()
        settings.training.validate()
    except (ModelError, TrainingError) as error:
        raise ConfigError(str(error))
    return settings
