"""Input validation helpers.

Small checks shared by the covariance, fitting and estimator layers.  All
helpers return the validated (possibly converted) array so calls can be
chained; failures raise :class:`~glmmlap.errors.SpecificationError` with a
message naming the offending argument.
"""

from __future__ import annotations

import numpy as np

from .errors import SpecificationError


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise SpecificationError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise SpecificationError(f"{name} contains a non-finite value (flat index {bad})")
    return arr


def as_vector(x, name: str, n: int | None = None) -> np.ndarray:
    arr = as_float_array(x, name)
    arr = arr.reshape(-1) if arr.ndim != 1 else arr
    if n is not None and arr.shape[0] != n:
        raise SpecificationError(f"{name} must have length {n}, got {arr.shape[0]}")
    return arr


def as_design_matrix(X, name: str = "X", n: int | None = None) -> np.ndarray:
    arr = as_float_array(X, name)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise SpecificationError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise SpecificationError(f"{name} must have {n} rows, got {arr.shape[0]}")
    return arr


def check_full_column_rank(X: np.ndarray, name: str = "X") -> np.ndarray:
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        raise SpecificationError(
            f"{name} is rank deficient (rank {rank} < {X.shape[1]} columns)"
        )
    return X


def check_symmetric(A: np.ndarray, name: str, rtol: float = 1e-12) -> np.ndarray:
    scale = max(float(np.max(np.abs(A))), 1.0)
    if np.max(np.abs(A - A.T)) > rtol * scale:
        raise SpecificationError(f"{name} is not symmetric within {rtol:g} relative")
    return A


def check_neighbor_matrix(W, name: str = "W") -> np.ndarray:
    """Validate a neighbor incidence matrix: square, nonnegative, zero
    diagonal, symmetric, every row sum positive."""
    arr = as_float_array(W, name, ndim=2)
    if arr.shape[0] != arr.shape[1]:
        raise SpecificationError(f"{name} must be square, got shape {arr.shape}")
    if np.any(arr < 0):
        raise SpecificationError(f"{name} must be nonnegative")
    if np.any(np.diag(arr) != 0):
        bad = int(np.flatnonzero(np.diag(arr))[0])
        raise SpecificationError(f"{name} must have a zero diagonal (row {bad})")
    check_symmetric(arr, name, rtol=1e-10)
    row_sums = arr.sum(axis=1)
    if np.any(row_sums <= 0):
        bad = int(np.flatnonzero(row_sums <= 0)[0])
        raise SpecificationError(f"{name} row {bad} has zero row sum (island site)")
    return arr


def check_coords(coords, name: str = "coords", n: int | None = None) -> np.ndarray:
    arr = as_float_array(coords, name)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise SpecificationError(f"{name} must be an (n, d) array, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise SpecificationError(f"{name} must have {n} rows, got {arr.shape[0]}")
    return arr


def check_in_unit_interval(x: float, name: str, closed_low: bool = True) -> float:
    lo_ok = x >= 0 if closed_low else x > 0
    if not (lo_ok and x < 1):
        raise SpecificationError(f"{name} must lie in {'[' if closed_low else '('}0, 1), got {x}")
    return float(x)


def check_positive(x: float, name: str) -> float:
    if not x > 0:
        raise SpecificationError(f"{name} must be positive, got {x}")
    return float(x)
