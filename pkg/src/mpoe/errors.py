"""Exceptions raised by the mpoe package."""


class ShapeError(ValueError):
    """Tensor extents, axes or a factorization plan do not fit together."""


class NumericError(ValueError):
    """Input contains NaN or infinite entries."""


class DegenerateScaleError(ValueError):
    """A local tensor has zero norm and cannot be rescaled."""


class GateConfigError(ValueError):
    """Gate configuration is inconsistent (missing noise weights, bad k, ...)."""


class StaleTraceError(RuntimeError):
    """A routing trace does not belong to the bank or batch it is used with."""


class TensorFileError(ValueError):
    """A TensorFile or checkpoint directory is malformed."""
