"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes are mutually inconsistent (model, pattern, or update)."""


class ConfigError(ValueError):
    """A configuration key is unknown, invalid, or violates a cross-field rule."""


class EncodeError(ValueError):
    """A sparse update violates its invariants and cannot be serialized."""


class DecodeError(ValueError):
    """A byte string failed wire-format validation; names the failing check."""


class IdxFormatError(ValueError):
    """An IDX file is malformed; the message names the offending offset."""
