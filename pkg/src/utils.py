from datetime import datetime
import logging
import numpy as np

_loggers = {}


def get_logger(name):
    # one handler per named logger, like the rest of the modules expect
    if name not in _loggers:
        logger = logging.getLogger(name)
        logger.addHandler(logging.StreamHandler())
        logger.setLevel(logging.INFO)
        logger.propagate = False
        _loggers[name] = logger
    return _loggers[name]


def set_log_level(level):
    for logger in _loggers.values():
        logger.setLevel(level)


logger = get_logger('bad')


def timed(func):
    def decorated(*args, **kwargs):
        s = datetime.now()
        ret = func(*args, **kwargs)
        logger.info("%s - %.4f", func.__name__, (datetime.now() - s).total_seconds())
        return ret
    decorated.__name__ = func.__name__
    decorated.__doc__ = func.__doc__
    return decorated


def make_rng(seed, *stream):
    """Independent generator for (seed, *stream); same inputs give the same stream."""
    if stream:
        return np.random.default_rng([seed, *stream])
    return np.random.default_rng(seed)


def sample_categorical(probs, rng):
    """Draw one index per row of a row-stochastic matrix (any leading shape)."""
    probs = np.asarray(probs)
    flat = probs.reshape(-1, probs.shape[-1])
    cdf = np.cumsum(flat, axis=1)
    u = rng.random(flat.shape[0]) * cdf[:, -1]
    draws = (cdf <= u[:, None]).sum(axis=1)
    draws = np.minimum(draws, flat.shape[1] - 1)
    return draws.reshape(probs.shape[:-1])
