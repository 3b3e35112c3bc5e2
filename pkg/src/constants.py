import numpy as np
import enum

# additive fill for disallowed attention logits, per precision
MASK_FILL = {
    np.dtype(np.float32): -1e9,
    np.dtype(np.float64): -1e18,
}

# two prepended condition slots: sentence, time
CONDITION_SLOTS = 2
SENTENCE_SLOT = 0
TIME_SLOT = 1

# Corruption constants
LOW_RATIO_PROBABILITY = 0.1
MAX_REPLACE_RATIO = 0.4

# Tokenizer constants
EMA_EPSILON = 1e-5
DEAD_CODE_THRESHOLD = 1.0
DEAD_CODE_INTERVAL = 256

# Finite-difference constants
GRADIENT_STEP = 1e-5
GRADIENT_TOLERANCE = 1e-4

# Metric constants
KL_SMOOTHING = 1e-6
CSV_FLOAT = '%.9g'

CHECKPOINT_VERSION = 1


class Direction(enum.Enum):
    # mask at rank p attends to ranks >= p
    SUFFIX = 'suffix'
    # mask at rank p attends to ranks <= p
    PREFIX = 'prefix'


class MaskbookIndexing(enum.Enum):
    POSITION = 'position'
    RANK = 'rank'
    RANDOM = 'random'


class EditMode(enum.Enum):
    INPAINT = 'inpaint'
    OUTPAINT = 'outpaint'
    PREFIX = 'prefix'
    SUFFIX = 'suffix'


class SamplingMethod(enum.Enum):
    OAAS = 'oaas'
    CBS = 'cbs'


class ConfidenceMode(enum.Enum):
    # max probability of the distribution the token was drawn from
    DISTRIBUTION = 'distribution'
    # probability of the drawn token itself
    TOKEN = 'token'


class DataSource(enum.Enum):
    MARKOV = 'markov'
    TOKENS = 'tokens'
