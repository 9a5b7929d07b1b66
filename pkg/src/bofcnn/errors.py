"""Exception hierarchy shared by all modules.

The CLI maps each category to a distinct exit code, so raise the most
specific class that applies.
"""


class BofcnnError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(BofcnnError):
    """Tensor shapes or extents violate an operation's contract."""


class ConfigError(BofcnnError):
    """Invalid configuration value or combination."""


class DataError(BofcnnError):
    """Dataset content violates an invariant (bad label, empty split, ...)."""


class FormatError(BofcnnError):
    """A data file does not parse; message includes the byte offset."""


class StateError(BofcnnError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class NumericError(BofcnnError):
    """A computation produced NaN/Inf or received non-finite input."""
