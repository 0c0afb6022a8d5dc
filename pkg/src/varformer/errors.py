"""Exception types shared across the package."""


class VarformerError(Exception):
    pass


class ShapeError(VarformerError, ValueError):
    """Tensor or image shapes do not match what an operation requires."""


class DomainError(VarformerError, ValueError):
    """An argument lies outside the domain of an operation (NaN input, bad index, bad parameter)."""


class ConfigError(VarformerError, ValueError):
    """Invalid configuration key or value."""


class CheckpointError(VarformerError, IOError):
    """A checkpoint file is missing, malformed, or lacks a required section."""


class DataError(VarformerError, IOError):
    """Input data (corpus, manifest, image files) is missing or unusable."""
