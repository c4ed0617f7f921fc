"""Exception types shared across the package."""


class LtriError(Exception):
    """Base class for all errors raised by ltri."""


class InvalidTrace(LtriError, ValueError):
    """Trace data violates the tile/vector contract (non-finite, negative, bad shape, gaps)."""


class ConfigError(LtriError, ValueError):
    """A parameter or configuration value is out of its allowed range."""


class StateError(LtriError, RuntimeError):
    """An engine operation was called in the wrong phase."""


class InternalError(LtriError, RuntimeError):
    """Bookkeeping invariant broken, e.g. a block evicted twice."""
