class BadError(Exception):
    """Base class for every failure raised by this project."""


class NumericsError(BadError, ValueError):
    pass


class TokenizerError(BadError, ValueError):
    pass


class MaskError(BadError, ValueError):
    pass


class ModelError(BadError, ValueError):
    pass


class TrainingError(BadError, RuntimeError):
    pass


class SamplingError(BadError, ValueError):
    pass


class CheckpointError(BadError, ValueError):
    pass


class ConfigError(BadError, ValueError):
    pass
