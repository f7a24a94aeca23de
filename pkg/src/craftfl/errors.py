"""Exception hierarchy shared across the package."""


class CraftflError(Exception):
    """Base class for all errors raised by craftfl."""


class InvalidInputError(CraftflError, ValueError):
    """An argument violates a documented precondition (bad shape, non-finite values, ...)."""


class NumericalError(CraftflError, RuntimeError):
    """A numerical routine failed (e.g. eigendecomposition did not converge)."""


class ConfigError(CraftflError, ValueError):
    """An experiment configuration is missing, malformed, or semantically invalid."""


class IdxFormatError(CraftflError, ValueError):
    """An IDX file could not be parsed (bad magic, truncation, or count mismatch)."""
