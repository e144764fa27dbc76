"""Exception types shared across the package.

The CLI maps these onto exit codes: data problems exit with 2, numerical
failures with 3.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward op, gradient or norm produced NaN/Inf."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, reused graph, ...)."""


class DataError(ValueError):
    """Malformed or insufficient input data."""


class ManifestError(DataError):
    pass


class CorruptFileError(DataError):
    """Binary container failed its magic/version/length checks."""


class UndefinedAUCError(DataError):
    """AUC requested for a label vector containing a single class."""
