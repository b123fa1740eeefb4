"""Shared exception types."""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class NumericError(RuntimeError):
    """A forward computation produced a non-finite value."""


class ContractError(RuntimeError):
    """An API was called in a way that violates its contract."""


class InputError(ValueError):
    """User-supplied data (files, corpora, ids) is invalid."""


class ConfigError(ValueError):
    """Invalid configuration key or value."""
