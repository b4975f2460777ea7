"""Inner Newton-Raphson mode finding and the Laplace-approximated marginal
log-likelihood with ML and REML Gaussian terms.

For fixed covariance parameters the joint log-density in the latent vector w
(with the fixed effects profiled out by their GLS estimate) has gradient
v = d - P w and Hessian H = D - P, where d and D are the data-model
derivative vectors and P is the REML-style projection of Sigma^{-1}.  The
mode a (v = 0) and log|-H| at the mode give the marginal objective

    loglik = log[y | g^{-1}(a), phi] + log[a | X, Sigma] - 0.5 log|-H_a|.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .covariance import CovMatrix, CovarianceSpec, build_sigma
from .errors import ConvergenceError, NotPositiveDefiniteError
from .families import Family
from .linalg import CurvatureWoodburyNegHessian, DenseNegHessian, chol_logdet, smw_apply
from .validation import as_design_matrix, as_vector

__all__ = [
    "SolverOptions",
    "ModeResult",
    "LikelihoodValue",
    "SigmaContext",
    "gls_beta",
    "reml_projection",
    "newton_mode",
    "gaussian_loglik",
    "laplace_loglik",
]

logger = logging.getLogger("glmmlap")

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class SolverOptions:
    """Newton solver controls.  ``step_alpha`` is the reduced step factor
    used once per iteration when a full step grows the gradient."""

    gtol: float = 1e-8
    obj_tol: float = 1e-10
    max_iter: int = 100
    step_alpha: float = 0.1


class SigmaContext:
    """Factorizations tied to one (Sigma, X) pair, reused across Newton
    iterations and by downstream inference."""

    def __init__(self, sigma: CovMatrix | np.ndarray, X: np.ndarray):
        if not isinstance(sigma, CovMatrix):
            sigma = CovMatrix(dense=np.asarray(sigma, dtype=float))
        self.sigma = sigma
        self.X = as_design_matrix(X, "X", n=sigma.n)
        self.n, self.p = self.X.shape
        self.factor = chol_logdet(sigma.dense, partition=sigma.structure, label="Sigma")
        self.U = self.factor.solve(self.X)
        xtsix = self.X.T @ self.U
        self.xtsix = 0.5 * (xtsix + xtsix.T)
        self.xtsix_factor = chol_logdet(self.xtsix, label="X' Sigma^-1 X")
        self._xtsix_inv = self.xtsix_factor.inverse()
        self._P_dense: np.ndarray | None = None

    def gls_beta(self, w: np.ndarray) -> np.ndarray:
        return self._xtsix_inv @ (self.U.T @ w)

    def apply_P(self, w: np.ndarray) -> np.ndarray:
        """P w = Sigma^{-1}(w - X beta_hat(w)) without forming P."""
        return self.factor.solve(w - self.X @ self.gls_beta(w))

    def proj_and_quad(self, w: np.ndarray) -> tuple[np.ndarray, float]:
        """(P w, w' P w) sharing one set of solves."""
        r = w - self.X @ self.gls_beta(w)
        Pw = self.factor.solve(r)
        return Pw, float(r @ Pw)

    def quad_residual(self, a: np.ndarray) -> float:
        r = a - self.X @ self.gls_beta(a)
        return float(r @ self.factor.solve(r))

    def P_dense(self) -> np.ndarray:
        if self._P_dense is None:
            P = self.factor.inverse()
            P -= self.U @ (self._xtsix_inv @ self.U.T)
            self._P_dense = 0.5 * (P + P.T)
        return self._P_dense

    def neg_hessian(self, D: np.ndarray):
        """Operator for (-H)^{-1} and log|-H| at curvature diagonal D.

        Uses the Woodbury block path when Sigma carries a partition and a
        no-inverse Woodbury form for dense Sigma with strictly negative
        curvature, falling back to the direct dense factorization otherwise
        (possible for beta-family curvature)."""
        D = np.asarray(D, dtype=float).reshape(-1)
        if self.sigma.structure is not None:
            try:
                return smw_apply(D, self.factor, self.X)
            except NotPositiveDefiniteError:
                pass
        elif np.all(D < 0):
            try:
                return CurvatureWoodburyNegHessian(
                    D, self.sigma.dense, self.factor.logdet, self.X,
                    self.xtsix_factor.logdet,
                )
            except NotPositiveDefiniteError:
                pass
        return DenseNegHessian(D, self.P_dense())


def gls_beta(sigma, X, w) -> np.ndarray:
    """Generalized least squares coefficients (X' S^-1 X)^-1 X' S^-1 w."""
    ctx = SigmaContext(sigma, X)
    return ctx.gls_beta(as_vector(w, "w", n=ctx.n))


def reml_projection(sigma, X) -> np.ndarray:
    """P = Sigma^{-1} - Sigma^{-1} X (X' Sigma^{-1} X)^{-1} X' Sigma^{-1}."""
    return SigmaContext(sigma, X).P_dense()


@dataclass
class ModeResult:
    """Converged latent mode and curvature information."""

    a: np.ndarray
    iterations: int
    max_grad: float
    logdet_negH: float
    neg_hessian: object
    D: np.ndarray
    converged: bool
    grad_trace: list[float] = field(default_factory=list)
    _context: SigmaContext | None = None

    @property
    def H(self) -> np.ndarray:
        """Dense Hessian D - P at the mode (materialized on demand)."""
        return np.diag(self.D) - self._context.P_dense()


@dataclass
class LikelihoodValue:
    """Assembled marginal objective with its three parts
    (loglik = data_term + gaussian_term - 0.5 * logdet_term)."""

    loglik: float
    data_term: float
    gaussian_term: float
    logdet_term: float


def _newton(y, family, ctx: SigmaContext, w0, phi, options: SolverOptions) -> ModeResult:
    def gradient_and_objective(w):
        Pw, quad = ctx.proj_and_quad(w)
        v = family.grad(y, w, phi) - Pw
        obj = float(np.sum(family.elements(y, w, phi))) - 0.5 * quad
        return v, float(np.max(np.abs(v))), obj

    w = np.array(w0, dtype=float, copy=True)
    v, max_v, obj = gradient_and_objective(w)
    if not np.isfinite(max_v):
        raise ConvergenceError("gradient is non-finite at the Newton starting point")
    trace = [max_v]

    iterations = 0
    stall_count = 0
    converged = max_v < options.gtol
    while not converged and iterations < options.max_iter:
        iterations += 1
        D = family.hess(y, w, phi)
        ops = ctx.neg_hessian(D)
        step = ops.solve(v)
        w_new = w + step
        v_new, new_max, obj_new = gradient_and_objective(w_new)
        if not np.isfinite(new_max) or new_max > max_v:
            # retake once with the reduced step; repeated failures count
            # toward the iteration cap
            w_new = w + options.step_alpha * step
            v_new, new_max, obj_new = gradient_and_objective(w_new)
        if not np.isfinite(new_max):
            raise ConvergenceError(
                f"Newton gradient diverged at iteration {iterations} (non-finite)"
            )
        w, v, max_v = w_new, v_new, new_max
        trace.append(max_v)
        if max_v < options.gtol:
            converged = True
        elif np.isfinite(obj_new) and abs(obj_new - obj) < options.obj_tol:
            # near quadratic convergence the objective change shrinks like
            # the squared gradient, so a stalled objective may just mean the
            # gradient needs another iteration or two; give up only when the
            # stall persists without reaching the stationarity tolerance
            stall_count += 1
            if stall_count >= 3:
                raise ConvergenceError(
                    f"Newton objective stalled at iteration {iterations} with "
                    f"max gradient {max_v:.3e} > {options.gtol:g}"
                )
        else:
            stall_count = 0
        obj = obj_new

    if not converged:
        raise ConvergenceError(
            f"Newton mode finding hit the iteration cap ({options.max_iter}); "
            f"max gradient {max_v:.3e}"
        )

    D = family.hess(y, w, phi)
    ops = ctx.neg_hessian(D)
    return ModeResult(
        a=w,
        iterations=iterations,
        max_grad=max_v,
        logdet_negH=ops.logdet,
        neg_hessian=ops,
        D=np.asarray(D, dtype=float),
        converged=converged,
        grad_trace=trace,
        _context=ctx,
    )


def newton_mode(y, family: Family, sigma, X, w0=None, phi=None, options=None) -> ModeResult:
    """Find the mode of the joint log-density in w at fixed covariance.

    Convergence requires max|v| below ``options.gtol``; a stalled objective
    without gradient convergence raises ConvergenceError.
    """
    options = options or SolverOptions()
    ctx = SigmaContext(sigma, X)
    y = as_vector(y, "y", n=ctx.n)
    if w0 is None:
        w0 = family.initial_w(y)
    w0 = as_vector(w0, "w0", n=ctx.n)
    return _newton(y, family, ctx, w0, phi, options)


def gaussian_loglik(a, X, sigma, mode: str = "ml") -> float:
    """Exact Gaussian log-density of the latent vector at a, with the fixed
    effects replaced by their GLS estimate (ML) or integrated out (REML)."""
    ctx = sigma if isinstance(sigma, SigmaContext) else SigmaContext(sigma, X)
    a = as_vector(a, "a", n=ctx.n)
    quad = ctx.quad_residual(a)
    mode = mode.lower()
    if mode == "ml":
        return -0.5 * (ctx.n * _LOG_2PI + ctx.factor.logdet + quad)
    if mode == "reml":
        return -0.5 * (
            (ctx.n - ctx.p) * _LOG_2PI + ctx.factor.logdet + ctx.xtsix_factor.logdet + quad
        )
    raise ValueError(f"mode must be 'ml' or 'reml', got {mode!r}")


def laplace_loglik(
    y,
    family: Family,
    X,
    cov: CovarianceSpec | CovMatrix | np.ndarray,
    theta=None,
    phi=None,
    mode: str = "reml",
    warm_start=None,
    options: SolverOptions | None = None,
) -> tuple[LikelihoodValue, ModeResult]:
    """Laplace-approximated marginal log-likelihood at (theta, phi).

    ``cov`` is either a CovarianceSpec (built at theta) or a prebuilt
    covariance matrix.  A warm start seeds the Newton solver from a previous
    mode; if it fails, the solver retries once from the link-initialized w.
    """
    options = options or SolverOptions()
    if isinstance(cov, CovarianceSpec):
        sigma = build_sigma(cov, theta)
    else:
        sigma = cov
    ctx = SigmaContext(sigma, X)
    y = as_vector(y, "y", n=ctx.n)

    cold = family.initial_w(y)
    starts = [cold] if warm_start is None else [as_vector(warm_start, "warm_start", n=ctx.n), cold]
    result = None
    last_error = None
    for w0 in starts:
        try:
            result = _newton(y, family, ctx, w0, phi, options)
            break
        except (ConvergenceError, NotPositiveDefiniteError) as exc:
            last_error = exc
    if result is None:
        raise ConvergenceError(f"mode finding failed for all starting points: {last_error}")

    data_term = float(np.sum(family.elements(y, result.a, phi)))
    gaussian_term = gaussian_loglik(result.a, X, ctx, mode=mode)
    value = LikelihoodValue(
        loglik=data_term + gaussian_term - 0.5 * result.logdet_negH,
        data_term=data_term,
        gaussian_term=gaussian_term,
        logdet_term=result.logdet_negH,
    )
    logger.debug(
        "laplace_loglik mode=%s loglik=%.10g iters=%d max_grad=%.3e",
        mode, value.loglik, result.iterations, result.max_grad,
    )
    return value, result
