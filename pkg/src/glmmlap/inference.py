"""Fixed-effect estimation with naive and corrected covariance, and latent
prediction at unobserved sites with corrected prediction variance.

With B = (X' S^-1 X)^-1 X' S^-1 at the fitted covariance S, the coefficient
estimate is beta = B w_hat and its corrected covariance adds the curvature
term for the latent w being estimated rather than observed:

    Var(beta) = B (-H)^{-1} B' + (X' S^-1 X)^{-1}.

Prediction uses the universal-kriging predictor Lambda w_hat; its corrected
error variance adds Lambda (-H)^{-1} Lambda' to the classical BLUP variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .covariance import PredictionMeta, cross_cov
from .errors import SpecificationError
from .fitting import FitResult
from .validation import as_design_matrix

__all__ = [
    "FixedEffectsTable",
    "PredictionResult",
    "fixed_effects",
    "predict",
    "interval_bounds",
    "z_multiplier",
]


def z_multiplier(level: float) -> float:
    if not 0 < level < 1:
        raise SpecificationError(f"interval level must lie in (0, 1), got {level}")
    return float(stats.norm.ppf(0.5 * (1.0 + level)))


def interval_bounds(estimate, se, level: float = 0.90) -> tuple[np.ndarray, np.ndarray]:
    """Two-sided interval estimate +- z * se at the given coverage level."""
    estimate = np.asarray(estimate, dtype=float)
    se = np.asarray(se, dtype=float)
    half = z_multiplier(level) * se
    return estimate - half, estimate + half


@dataclass
class FixedEffectsTable:
    names: list[str]
    estimate: np.ndarray
    se_u: np.ndarray
    se_c: np.ndarray
    t_value: np.ndarray
    p_value: np.ndarray
    cov_naive: np.ndarray
    cov_corrected: np.ndarray
    df_policy: str

    def intervals(self, level: float = 0.90) -> tuple[np.ndarray, np.ndarray]:
        return interval_bounds(self.estimate, self.se_c, level)

    def rows(self):
        for i, name in enumerate(self.names):
            yield (name, self.estimate[i], self.se_u[i], self.se_c[i],
                   self.t_value[i], self.p_value[i])


def _beta_operator(fit: FitResult) -> np.ndarray:
    """B = (X' S^-1 X)^{-1} X' S^-1 as a p x n matrix."""
    ctx = fit.mode_result._context
    return ctx.xtsix_factor.solve(ctx.U.T)


def fixed_effects(fit: FitResult, df_policy: str = "normal", names=None) -> FixedEffectsTable:
    """Coefficient table with naive and corrected standard errors.

    ``df_policy`` is "normal" for standard-normal p-values or "t" for a
    t-distribution with n - p degrees of freedom.
    """
    ctx = fit.mode_result._context
    p = ctx.p
    B = _beta_operator(fit)
    cov_naive = ctx.xtsix_factor.solve(np.eye(p))
    cov_naive = 0.5 * (cov_naive + cov_naive.T)
    curvature = B @ fit.mode_result.neg_hessian.solve(B.T)
    cov_corrected = cov_naive + 0.5 * (curvature + curvature.T)

    estimate = fit.beta
    se_u = np.sqrt(np.diag(cov_naive))
    se_c = np.sqrt(np.diag(cov_corrected))
    t_value = np.abs(estimate) / se_c
    if df_policy == "normal":
        p_value = 2.0 * stats.norm.sf(t_value)
    elif df_policy == "t":
        df = ctx.n - p
        p_value = 2.0 * stats.t.sf(t_value, df)
    else:
        raise SpecificationError(f"df_policy must be 'normal' or 't', got {df_policy!r}")
    names = list(names) if names is not None else [f"x{i}" for i in range(p)]
    if len(names) != p:
        raise SpecificationError(f"expected {p} coefficient names, got {len(names)}")
    return FixedEffectsTable(
        names=names,
        estimate=estimate,
        se_u=se_u,
        se_c=se_c,
        t_value=t_value,
        p_value=p_value,
        cov_naive=cov_naive,
        cov_corrected=cov_corrected,
        df_policy=df_policy,
    )


@dataclass
class PredictionResult:
    u_hat: np.ndarray
    var_corrected: np.ndarray
    var_blup: np.ndarray
    level: float = 0.90

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.var_corrected))

    @property
    def se_blup(self) -> np.ndarray:
        return np.sqrt(np.diag(self.var_blup))

    def intervals(self, level: float | None = None, corrected: bool = True):
        level = self.level if level is None else level
        se = self.se if corrected else self.se_blup
        return interval_bounds(self.u_hat, se, level)


def predict(fit: FitResult, X_u, pred_meta: PredictionMeta, level: float = 0.90) -> PredictionResult:
    """Predict the latent field at unobserved sites.

    The corrected variance is the default report; the classical BLUP
    variance (which treats w as observed) is exposed for diagnostics.
    """
    ctx = fit.mode_result._context
    X_u = as_design_matrix(X_u, "X_u")
    if X_u.shape[1] != ctx.p:
        raise SpecificationError(
            f"X_u must have {ctx.p} columns to match the fitted design, got {X_u.shape[1]}"
        )
    m = X_u.shape[0]
    if pred_meta.m != m:
        raise SpecificationError(f"pred_meta declares {pred_meta.m} sites but X_u has {m} rows")

    sigma_wu, sigma_uu = cross_cov(fit.cov_spec, fit.theta, pred_meta)
    sinv_wu = ctx.factor.solve(sigma_wu)          # S^{-1} Sigma_wu, n x m
    B = _beta_operator(fit)                       # p x n
    proj = sinv_wu.T                              # Sigma_wu' S^{-1}, m x n
    lam = X_u @ B + proj - (proj @ ctx.X) @ B     # m x n
    u_hat = lam @ fit.a

    K = X_u - proj @ ctx.X                        # m x p
    cov_naive = ctx.xtsix_factor.solve(np.eye(ctx.p))
    var_blup = sigma_uu - sigma_wu.T @ sinv_wu + K @ cov_naive @ K.T
    var_blup = 0.5 * (var_blup + var_blup.T)
    curvature = lam @ fit.mode_result.neg_hessian.solve(lam.T)
    var_corrected = var_blup + 0.5 * (curvature + curvature.T)
    return PredictionResult(
        u_hat=u_hat,
        var_corrected=var_corrected,
        var_blup=var_blup,
        level=level,
    )
