"""Structured linear algebra: Cholesky factorization with log-determinant,
block-diagonal factor/solve, and a Woodbury-form operator for the negative
Hessian of the joint log-density.

The dense path is always available and serves as the reference; the block
path activates when a covariance matrix carries a block partition, replacing
one n x n factorization by many small ones.  Hot paths call LAPACK directly
(dpotrf/dpotrs) to keep per-iteration overhead low on desk-scale problems.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotri, dpotrs

from .errors import NotPositiveDefiniteError

# Jitter policy for near-singular symmetric PD matrices: add
# 1e-10 * mean(diag), retry with 10x escalation, three retries, then error.
_JITTER_BASE = 1e-10
_JITTER_RETRIES = 3


def _lower_chol(A: np.ndarray, label: str) -> np.ndarray:
    """Lower Cholesky factor with the diagonal jitter rescue."""
    c, info = dpotrf(A, lower=1, overwrite_a=0)
    if info == 0:
        return c
    if info < 0:
        raise ValueError(f"invalid input to Cholesky for {label}")
    base = _JITTER_BASE * max(float(np.mean(np.diag(A))), np.finfo(float).tiny)
    eye = np.eye(A.shape[0])
    for k in range(_JITTER_RETRIES):
        c, info = dpotrf(A + (base * 10.0**k) * eye, lower=1, overwrite_a=1)
        if info == 0:
            return c
    raise NotPositiveDefiniteError(
        f"{label} is not positive definite (jitter policy exhausted at {base * 100})"
    )


def _cho_factor_jittered(A: np.ndarray, label: str):
    """Compatibility wrapper returning a (factor, lower) pair usable with
    scipy's cho_solve, plus the applied jitter (always reported as 0.0 or
    folded into the factor)."""
    return (_lower_chol(np.asarray(A, dtype=float), label), True), 0.0


def _solve_chol(c: np.ndarray, b: np.ndarray) -> np.ndarray:
    x, info = dpotrs(c, b, lower=1)
    if info != 0:
        raise NotPositiveDefiniteError("triangular solve failed")
    return x


def _inv_from_chol(c: np.ndarray) -> np.ndarray:
    # dpotri fills only the lower triangle; the upper one still holds
    # whatever dpotrf left there, so rebuild symmetry from the lower part
    inv, info = dpotri(c, lower=1)
    if info != 0:
        raise NotPositiveDefiniteError("inverse from Cholesky failed")
    out = np.tril(inv)
    out += np.tril(inv, -1).T
    return out


class FactoredMatrix:
    """Cholesky factorization of a symmetric PD matrix, dense or blockwise.

    ``partition`` is a list of (start, stop) index ranges; when present,
    ``factors`` holds one lower factor per block and solves/logdet are
    performed blockwise.
    """

    __slots__ = ("n", "logdet", "factors", "partition")

    def __init__(self, n, logdet, factors, partition=None):
        self.n = n
        self.logdet = logdet
        self.factors = factors
        self.partition = partition

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.partition is None:
            return _solve_chol(self.factors[0], b)
        out = np.empty_like(b, dtype=float)
        for (start, stop), c in zip(self.partition, self.factors):
            out[start:stop] = _solve_chol(c, b[start:stop])
        return out

    def inverse(self) -> np.ndarray:
        if self.partition is None:
            return _inv_from_chol(self.factors[0])
        out = np.zeros((self.n, self.n))
        for (start, stop), c in zip(self.partition, self.factors):
            out[start:stop, start:stop] = _inv_from_chol(c)
        return out



def _logdet_lower(c: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(c))))


def chol_logdet(
    A: np.ndarray,
    partition: list[tuple[int, int]] | None = None,
    label: str = "matrix",
) -> FactoredMatrix:
    """Factor a symmetric PD matrix and record log|A|.

    With a ``partition`` the matrix is assumed block diagonal over the given
    contiguous index ranges and each block is factored independently; the
    log-determinant is the sum over blocks.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if partition is None:
        c = _lower_chol(A, label)
        return FactoredMatrix(n=n, logdet=_logdet_lower(c), factors=[c])
    factors = []
    logdet = 0.0
    for bi, (start, stop) in enumerate(partition):
        c = _lower_chol(np.ascontiguousarray(A[start:stop, start:stop]), f"{label} block {bi}")
        factors.append(c)
        logdet += _logdet_lower(c)
    return FactoredMatrix(n=n, logdet=logdet, factors=factors, partition=partition)


def block_solve(
    partition: list[tuple[int, int]], blocks: list[np.ndarray], b: np.ndarray
) -> np.ndarray:
    """Solve a block-diagonal system given explicit diagonal blocks."""
    b = np.asarray(b, dtype=float)
    out = np.empty_like(b, dtype=float)
    for bi, ((start, stop), block) in enumerate(zip(partition, blocks)):
        try:
            c = _lower_chol(np.asarray(block, dtype=float), f"block {bi}")
        except NotPositiveDefiniteError as exc:
            raise NotPositiveDefiniteError(f"block {bi} is singular") from exc
        out[start:stop] = _solve_chol(c, b[start:stop])
    return out


class NegHessianOperator:
    """Apply (-H)^{-1} and expose log|-H| for H = D - P with
    P = Sigma^{-1} - Sigma^{-1} X (X' Sigma^{-1} X)^{-1} X' Sigma^{-1}.

    Writes -H = A - U C U' with A = Sigma^{-1} - D, U = Sigma^{-1} X and
    C = (X' Sigma^{-1} X)^{-1}, and applies the Woodbury identity

        (-H)^{-1} = A^{-1} + A^{-1} U M^{-1} U' A^{-1},
        M = X' Sigma^{-1} X - U' A^{-1} U,
        log|-H| = log|A| + log|M| - log|X' Sigma^{-1} X|.

    When ``sigma_factor`` carries a block partition, A inherits it (D is
    diagonal), so no dense n x n factorization is formed.
    """

    def __init__(self, D: np.ndarray, sigma_factor: FactoredMatrix, X: np.ndarray):
        D = np.asarray(D, dtype=float).reshape(-1)
        n = sigma_factor.n
        X = np.asarray(X, dtype=float)
        U = sigma_factor.solve(X)
        xtsix = X.T @ U
        xtsix_c = _lower_chol(xtsix, "X' Sigma^-1 X")

        partition = sigma_factor.partition
        if partition is None:
            A = sigma_factor.inverse()
            A[np.diag_indices(n)] -= D
            c = _lower_chol(A, "Sigma^-1 - D")
            self._A_factor = FactoredMatrix(n=n, logdet=_logdet_lower(c), factors=[c])
        else:
            A = np.zeros((n, n))
            for (start, stop), c in zip(partition, sigma_factor.factors):
                blk = _inv_from_chol(c)
                blk[np.diag_indices(stop - start)] -= D[start:stop]
                A[start:stop, start:stop] = blk
            self._A_factor = chol_logdet(A, partition=partition, label="Sigma^-1 - D")
        self._AinvU = self._A_factor.solve(U)
        M = xtsix - U.T @ self._AinvU
        try:
            M_c = _lower_chol(0.5 * (M + M.T), "Woodbury core")
        except NotPositiveDefiniteError as exc:
            raise NotPositiveDefiniteError(
                "-H is not positive definite (Woodbury core failed)"
            ) from exc
        self._M_c = M_c
        self.logdet = self._A_factor.logdet + _logdet_lower(M_c) - _logdet_lower(xtsix_c)
        self._U = U

    def solve(self, b: np.ndarray) -> np.ndarray:
        Ainv_b = self._A_factor.solve(b)
        core = _solve_chol(self._M_c, self._U.T @ Ainv_b)
        return Ainv_b + self._AinvU @ core

    def dense_inverse(self) -> np.ndarray:
        return self.solve(np.eye(self._A_factor.n))


class CurvatureWoodburyNegHessian:
    """Dense-path operator for (-H)^{-1} and log|-H| that avoids any dense
    inverse, valid when every curvature entry is negative (S = -D > 0).

    With A = Sigma^{-1} + S and G = Sigma + S^{-1}:

        A^{-1} = Sigma - Sigma G^{-1} Sigma,      A^{-1} U = X - Sigma G^{-1} X,
        log|A| = log|S| + log|G| - log|Sigma|,    M = X' G^{-1} X,
        log|-H| = log|A| + log|M| - log|X' Sigma^{-1} X|,
        (-H)^{-1} v = A^{-1} v + (A^{-1} U) M^{-1} (A^{-1} U)' v,

    so one Cholesky of G per Newton iteration is the only n x n work.
    """

    __slots__ = ("_sigma", "_G_c", "_T", "_M_c", "logdet", "n")

    def __init__(self, D, sigma_dense, sigma_logdet, X, xtsix_logdet):
        s = -np.asarray(D, dtype=float).reshape(-1)
        n = sigma_dense.shape[0]
        self.n = n
        G = sigma_dense.copy()
        G[np.diag_indices(n)] += 1.0 / s
        G_c = _lower_chol(G, "Sigma + S^-1")
        GinvX = _solve_chol(G_c, X)
        T = X - sigma_dense @ GinvX
        M = X.T @ GinvX
        M_c = _lower_chol(0.5 * (M + M.T), "Woodbury core")
        log_A = float(np.sum(np.log(s))) + _logdet_lower(G_c) - sigma_logdet
        self.logdet = log_A + _logdet_lower(M_c) - xtsix_logdet
        self._sigma = sigma_dense
        self._G_c = G_c
        self._T = T
        self._M_c = M_c

    def _apply_A_inv(self, b):
        sb = self._sigma @ b
        return sb - self._sigma @ _solve_chol(self._G_c, sb)

    def solve(self, b: np.ndarray) -> np.ndarray:
        # U' A^{-1} b = (A^{-1} U)' b = T' b by symmetry of A^{-1}
        core = _solve_chol(self._M_c, self._T.T @ b)
        return self._apply_A_inv(b) + self._T @ core

    def dense_inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.n))


class DenseNegHessian:
    """Reference path: factor -H = P - diag(D) directly (with jitter)."""

    __slots__ = ("matrix", "_c", "logdet")

    def __init__(self, D: np.ndarray, P: np.ndarray):
        negH = P.copy()
        negH[np.diag_indices(negH.shape[0])] -= np.asarray(D, dtype=float).reshape(-1)
        self.matrix = negH
        self._c = _lower_chol(negH, "-H")
        self.logdet = _logdet_lower(self._c)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return _solve_chol(self._c, b)

    def dense_inverse(self) -> np.ndarray:
        return _inv_from_chol(self._c)


def smw_apply(D: np.ndarray, sigma_factor: FactoredMatrix, X: np.ndarray) -> NegHessianOperator:
    """Build the Woodbury operator for (-H)^{-1} and log|-H|."""
    return NegHessianOperator(D, sigma_factor, X)
