"""Exception types shared across the package."""

import numpy as np


class GlmmError(Exception):
    """Base class for errors raised by glmmlap."""


class NotPositiveDefiniteError(GlmmError, np.linalg.LinAlgError):
    """A matrix required to be positive definite failed Cholesky, even
    after the diagonal jitter policy was exhausted."""


class ConvergenceError(GlmmError, RuntimeError):
    """An iterative solver failed to converge within its budget."""


class SupportError(GlmmError, ValueError):
    """A response value lies outside the support of the declared family."""


class SpecificationError(GlmmError, ValueError):
    """A model specification (dimensions, bounds, metadata) is invalid."""


class DataError(GlmmError, ValueError):
    """An input data file is unreadable, malformed, or contains missing or
    unusable values."""
