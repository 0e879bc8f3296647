"""Exception hierarchy shared across the pipeline.

Every error carries a human-readable message; the CLI maps the classes
onto exit codes (validation 1, I/O 2, numerical 3).
"""


class RadpipeError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(RadpipeError):
    """Bad configuration or arguments (names the offending field)."""


class DimensionError(ValidationError):
    """Tensor/volume shape mismatch (names the offending operand)."""


class EmptyMaskError(ValidationError):
    """An operation that needs a nonempty binary mask received an empty one."""


class FormatError(RadpipeError):
    """Malformed file on disk (RVOL pair, checkpoint archive, CSV)."""


class NumericalError(RadpipeError):
    """Non-finite values or solver breakdown during optimization."""


class ConvergenceError(NumericalError):
    """Iterative solver hit its iteration cap before reaching tolerance."""


class StratificationError(ValidationError):
    """A stratified fold split would leave some fold without both classes."""


class StateError(RadpipeError):
    """Operation called out of order (e.g. backward before forward)."""
