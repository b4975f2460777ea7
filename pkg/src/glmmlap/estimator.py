"""Scikit-learn style estimator facade.

``LaplaceGLMM`` wraps the functional core behind the familiar
fit/predict/get_params surface so the model composes with the wider
ecosystem (cloning, pipelines, grid search over declarative parameters).
Covariance structure is declared with :class:`CovTerm` entries whose fields
name keys into the ``meta`` dict passed to ``fit``/``predict``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .covariance import (
    AR1,
    CAR,
    SAR,
    CovarianceSpec,
    ExponentialGeo,
    Nugget,
    PredictionMeta,
    RandomEffect,
)
from .errors import SpecificationError
from .families import get_family
from .fitting import FitOptions, fit_model
from .inference import fixed_effects, predict as predict_latent
from .laplace import SolverOptions

__all__ = ["CovTerm", "LaplaceGLMM"]


@dataclass(frozen=True)
class CovTerm:
    """Declarative covariance component; fields name ``meta`` keys.

    kind: iid_nugget | random_effect | ar1 | exponential_geo | car | sar
    """

    kind: str
    coords: str | None = None
    time: str | None = None
    group: str | None = None
    design: str | None = None
    neighbors: str | None = None
    nugget: bool = False
    allow_negative_rho: bool = False


def _meta_get(meta: dict, key: str | None, term: CovTerm, what: str):
    if key is None:
        raise SpecificationError(f"{term.kind} term requires a {what} metadata key")
    if meta is None or key not in meta:
        raise SpecificationError(f"metadata key {key!r} required by {term.kind} term is missing")
    return meta[key]


def bind_component(term: CovTerm, meta: dict | None, n: int):
    if term.kind == "iid_nugget":
        return Nugget(n)
    if term.kind == "random_effect":
        if term.design is not None:
            return RandomEffect(Z=_meta_get(meta, term.design, term, "design"))
        return RandomEffect(groups=_meta_get(meta, term.group, term, "group"))
    if term.kind == "ar1":
        times = _meta_get(meta, term.time, term, "time")
        groups = meta.get(term.group) if term.group else None
        return AR1(times, groups=groups)
    if term.kind == "exponential_geo":
        return ExponentialGeo(_meta_get(meta, term.coords, term, "coords"), nugget=term.nugget)
    if term.kind == "car":
        return CAR(_meta_get(meta, term.neighbors, term, "neighbors"),
                   allow_negative_rho=term.allow_negative_rho)
    if term.kind == "sar":
        return SAR(_meta_get(meta, term.neighbors, term, "neighbors"),
                   allow_negative_rho=term.allow_negative_rho)
    raise SpecificationError(f"unknown covariance term kind {term.kind!r}")


def prediction_entry(term: CovTerm, meta_u: dict | None) -> dict | None:
    if term.kind == "iid_nugget":
        return None
    if term.kind == "random_effect":
        if term.design is not None:
            return {"Z": _meta_get(meta_u, term.design, term, "design")}
        return {"groups": _meta_get(meta_u, term.group, term, "group")}
    if term.kind == "ar1":
        entry = {"times": _meta_get(meta_u, term.time, term, "time")}
        if term.group:
            entry["groups"] = _meta_get(meta_u, term.group, term, "group")
        return entry
    if term.kind == "exponential_geo":
        return {"coords": _meta_get(meta_u, term.coords, term, "coords")}
    if term.kind in ("car", "sar"):
        return {"W_joint": _meta_get(meta_u, term.neighbors, term, "joint neighbors")}
    raise SpecificationError(f"unknown covariance term kind {term.kind!r}")


class LaplaceGLMM(BaseEstimator):
    """Generalized linear mixed model with patterned covariance, fitted by
    Laplace-approximated marginal ML or REML.

    Parameters
    ----------
    family : str
        Response family: binomial, poisson, negative_binomial, gamma,
        inverse_gaussian or beta.
    phi : float or None
        Initial (or fixed, see ``estimate_phi``) dispersion.
    estimate_phi : bool
        Whether dispersion is searched over or held at ``phi``.
    components : sequence of CovTerm or None
        Covariance structure; defaults to a single iid nugget.
    mode : str
        "reml" (default) or "ml".
    fit_intercept : bool
        Prepend a ones column to the design.
    """

    def __init__(
        self,
        family: str = "poisson",
        phi: float | None = None,
        estimate_phi: bool = True,
        components=None,
        mode: str = "reml",
        fit_intercept: bool = True,
        bounds: dict | None = None,
        maxfev: int | None = None,
        xatol: float = 1e-4,
        fatol: float = 1e-6,
        verbose: int = 0,
    ):
        self.family = family
        self.phi = phi
        self.estimate_phi = estimate_phi
        self.components = components
        self.mode = mode
        self.fit_intercept = fit_intercept
        self.bounds = bounds
        self.maxfev = maxfev
        self.xatol = xatol
        self.fatol = fatol
        self.verbose = verbose

    def _terms(self) -> list[CovTerm]:
        if self.components is None:
            return [CovTerm("iid_nugget")]
        return list(self.components)

    def _design(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if self.fit_intercept:
            X = np.column_stack([np.ones(X.shape[0]), X])
        return X

    def fit(self, X, y, meta: dict | None = None, trials=None):
        if hasattr(X, "columns"):
            self.feature_names_in_ = np.asarray(X.columns, dtype=object)
        X = self._design(X)
        y = np.asarray(y, dtype=float).reshape(-1)
        n = y.shape[0]
        family = get_family(self.family, phi=self.phi, trials=trials)
        terms = self._terms()
        spec = CovarianceSpec(components=[bind_component(t, meta, n) for t in terms])
        options = FitOptions(
            mode=self.mode,
            estimate_phi=self.estimate_phi,
            maxfev=self.maxfev,
            xatol=self.xatol,
            fatol=self.fatol,
            bounds=self.bounds,
            solver=SolverOptions(),
            verbose=self.verbose,
        )
        self.result_ = fit_model(y, family, X, spec, options)
        self.terms_ = terms
        self.theta_ = self.result_.theta
        self.phi_ = self.result_.phi
        self.beta_ = self.result_.beta
        self.w_ = self.result_.a
        self.loglik_ = self.result_.loglik
        self.n_features_in_ = X.shape[1] - (1 if self.fit_intercept else 0)
        return self

    def _pred_meta(self, m: int, meta_u: dict | None) -> PredictionMeta:
        return PredictionMeta(
            m=m, per_component=[prediction_entry(t, meta_u) for t in self.terms_]
        )

    def predict(self, X, meta: dict | None = None) -> np.ndarray:
        """Point predictions of the latent field at new sites."""
        return self.predict_result(X, meta).u_hat

    def predict_result(self, X, meta: dict | None = None, level: float = 0.90):
        """Full prediction object with corrected variances and intervals."""
        check_is_fitted(self, "result_")
        X_u = self._design(X)
        return predict_latent(self.result_, X_u, self._pred_meta(X_u.shape[0], meta), level)

    def fixed_effects(self, df_policy: str = "normal", names=None):
        check_is_fitted(self, "result_")
        if names is None:
            if hasattr(self, "feature_names_in_"):
                base = [str(c) for c in self.feature_names_in_]
            else:
                base = [f"x{i}" for i in range(self.n_features_in_)]
            names = (["Intercept"] if self.fit_intercept else []) + base
        return fixed_effects(self.result_, df_policy=df_policy, names=names)
