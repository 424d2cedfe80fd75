"""Typed errors shared across the package."""


class SpoilerMoeError(Exception):
    pass


class ShapeError(SpoilerMoeError, ValueError):
    """Operand shapes do not conform to an operation's algebraic rule."""


class ConfigError(SpoilerMoeError, ValueError):
    """Invalid configuration value, unknown kind/variant, or bad dimension chain."""


class ContractError(SpoilerMoeError, RuntimeError):
    """A caller violated an operation's precondition at runtime."""


class DataFormatError(SpoilerMoeError, ValueError):
    """Malformed input file (JSONL record, embedding payload, checkpoint)."""


class ReferentialIntegrityError(DataFormatError):
    """A record references an id that does not resolve."""
