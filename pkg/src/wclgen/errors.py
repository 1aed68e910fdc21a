"""Exception types shared across the package.

Everything derives from ValueError so callers that don't care about the
distinction can catch the usual built-in.
"""


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class EmptyPoolError(ValueError):
    """A pooling mask selected no positions."""


class DegenerateVectorError(ValueError):
    """A zero-norm vector reached a cosine-similarity computation."""


class IngestionError(ValueError):
    """An input file is malformed; the message names the offending row."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""
