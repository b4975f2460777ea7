"""Outer maximization of the marginal objective over covariance parameters
(and dispersion), plus model comparison.

The search runs Nelder-Mead in a transformed space: variances, ranges and
dispersion on the log scale, correlations through a scaled logistic over
their validity interval.  Default bounds: variances at 10 x var of the
link-transformed data, geostatistical ranges at 10 x the maximum pairwise
distance, autoregressive dependence in [0, 1 - 1e-6], dispersion in
[1e-6, 1e6].  The inner Newton solver is warm-started across evaluations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit

from .covariance import CovarianceSpec, CovMatrix, ExponentialGeo, _Autoregressive
from .errors import ConvergenceError, NotPositiveDefiniteError, SpecificationError
from .families import Family
from .laplace import LikelihoodValue, ModeResult, SolverOptions, laplace_loglik
from .validation import as_design_matrix, as_vector, check_full_column_rank

__all__ = [
    "ParamEntry",
    "ParamSpace",
    "FitOptions",
    "FitResult",
    "build_param_space",
    "initial_params",
    "fit_model",
    "evaluate_at",
    "compare",
    "ComparisonTable",
]

logger = logging.getLogger("glmmlap")

_PENALTY = 1e4
_FAILED_EVAL = 1e10


@dataclass
class ParamEntry:
    name: str
    kind: str  # variance | nugget | range | correlation | dispersion
    lower: float
    upper: float
    transform: str  # "log" | "logistic"

    def to_unconstrained(self, value: float) -> float:
        if self.transform == "log":
            return float(np.log(value))
        span = self.upper - self.lower
        return float(logit((value - self.lower) / span))

    def from_unconstrained(self, x: float) -> float:
        if self.transform == "log":
            return float(np.exp(x))
        return float(self.lower + (self.upper - self.lower) * expit(x))

    def transformed_bounds(self) -> tuple[float, float]:
        if self.transform == "log":
            lo = np.log(self.lower) if self.lower > 0 else -np.inf
            hi = np.log(self.upper) if np.isfinite(self.upper) else np.inf
            return lo, hi
        return -np.inf, np.inf


@dataclass
class ParamSpace:
    """Ordered parameter entries: covariance parameters first (declaration
    order), then dispersion when present."""

    entries: list[ParamEntry]
    theta_len: int
    has_phi: bool

    @property
    def dim(self) -> int:
        return len(self.entries)

    def transform(self, values) -> np.ndarray:
        values = as_vector(values, "params", n=self.dim)
        return np.array([e.to_unconstrained(v) for e, v in zip(self.entries, values)])

    def untransform(self, x) -> np.ndarray:
        x = as_vector(x, "x", n=self.dim)
        return np.array([e.from_unconstrained(v) for e, v in zip(self.entries, x)])

    def split(self, values) -> tuple[np.ndarray, float | None]:
        values = np.asarray(values, dtype=float)
        theta = values[: self.theta_len]
        phi = float(values[self.theta_len]) if self.has_phi else None
        return theta, phi

    def transformed_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        los, his = zip(*(e.transformed_bounds() for e in self.entries))
        return np.array(los), np.array(his)

    def bound_flags(self, x, tol: float = 1e-6) -> list[str]:
        """Names of parameters whose estimate sits within ``tol`` of a bound
        (transformed units for log entries, relative natural units for
        logistic entries, which have no finite transformed bound)."""
        flags = []
        for entry, xi in zip(self.entries, np.asarray(x, dtype=float)):
            if entry.transform == "log":
                lo, hi = entry.transformed_bounds()
                if (np.isfinite(lo) and xi - lo < tol) or (np.isfinite(hi) and hi - xi < tol):
                    flags.append(entry.name)
            else:
                value = entry.from_unconstrained(xi)
                span = entry.upper - entry.lower
                if min(value - entry.lower, entry.upper - value) < tol * span:
                    flags.append(entry.name)
        return flags


_RHO_MAX = 1.0 - 1e-6


def build_param_space(
    y,
    family: Family,
    cov_spec: CovarianceSpec,
    estimate_phi: bool = True,
    overrides: dict | None = None,
) -> ParamSpace:
    overrides = overrides or {}
    y = as_vector(y, "y")
    g_star = family.initial_w(y)
    var_upper = overrides.get("variance_upper", 10.0 * max(float(np.var(g_star)), 1e-8))
    rho_upper = overrides.get("rho_upper", _RHO_MAX)

    entries: list[ParamEntry] = []
    for idx, comp in enumerate(cov_spec.components):
        for name, kind in zip(comp.param_names, comp.param_kinds):
            label = f"{comp.kind}[{idx}].{name}"
            if kind in ("variance", "nugget"):
                entries.append(ParamEntry(label, kind, 0.0, var_upper, "log"))
            elif kind == "range":
                max_dist = comp.max_distance if isinstance(comp, ExponentialGeo) else 1.0
                upper = overrides.get("range_upper", 10.0 * max_dist)
                entries.append(ParamEntry(label, kind, 0.0, upper, "log"))
            elif kind == "correlation":
                lower = 0.0
                if isinstance(comp, _Autoregressive) and comp.allow_negative_rho:
                    lower = comp.rho_interval[0] + 1e-6
                entries.append(ParamEntry(label, kind, lower, rho_upper, "logistic"))
            else:
                raise SpecificationError(f"unknown parameter kind {kind!r}")
    theta_len = len(entries)
    has_phi = family.has_dispersion and estimate_phi
    if has_phi:
        entries.append(
            ParamEntry(
                "phi",
                "dispersion",
                overrides.get("phi_lower", 1e-6),
                overrides.get("phi_upper", 1e6),
                "log",
            )
        )
    return ParamSpace(entries=entries, theta_len=theta_len, has_phi=has_phi)


def initial_params(y, family: Family, cov_spec: CovarianceSpec, space: ParamSpace | None = None) -> np.ndarray:
    """Starting values: the variance of the link-transformed data apportioned
    equally among variance components, ranges at a quarter of the maximum
    distance, correlations at 0.5, dispersion at its declared value."""
    space = space or build_param_space(y, family, cov_spec)
    y = as_vector(y, "y")
    g_star = family.initial_w(y)
    var_entries = [e for e in space.entries if e.kind in ("variance", "nugget")]
    share = max(float(np.var(g_star)), 1e-8) / max(len(var_entries), 1)

    values = []
    pos = 0
    for comp in cov_spec.components:
        for kind in comp.param_kinds:
            entry = space.entries[pos]
            pos += 1
            if kind in ("variance", "nugget"):
                values.append(min(share, 0.5 * entry.upper))
            elif kind == "range":
                max_dist = comp.max_distance if isinstance(comp, ExponentialGeo) else 1.0
                values.append(max_dist / 4.0)
            else:
                values.append(0.5)
    if space.has_phi:
        values.append(family.phi if family.phi is not None else 1.0)
    return np.array(values)


@dataclass
class FitOptions:
    mode: str = "reml"
    estimate_phi: bool = True
    maxfev: int | None = None  # per Nelder-Mead stage; default 200 * dim
    xatol: float = 1e-4
    fatol: float = 1e-6
    bounds: dict | None = None
    solver: SolverOptions = field(default_factory=SolverOptions)
    verbose: int = 0


@dataclass
class FitResult:
    """Fitted covariance parameters, latent mode and everything downstream
    inference needs."""

    theta: np.ndarray
    phi: float | None
    beta: np.ndarray
    a: np.ndarray
    sigma: CovMatrix
    loglik: float
    minus2ll: float
    mode: str
    value: LikelihoodValue
    mode_result: ModeResult
    param_space: ParamSpace
    param_names: list[str]
    n_evals: int
    max_newton_iterations: int
    converged: bool
    status: str
    bound_flags: list[str]
    best_trace: list[float]
    cov_spec: CovarianceSpec
    X: np.ndarray
    y: np.ndarray
    family: Family

    @property
    def n_free_params(self) -> int:
        k = self.param_space.dim
        if self.mode == "ml":
            k += self.X.shape[1]
        return k

    @property
    def aic(self) -> float:
        return self.minus2ll + 2.0 * self.n_free_params

    @property
    def max_grad(self) -> float:
        return self.mode_result.max_grad

    @property
    def H(self) -> np.ndarray:
        return self.mode_result.H


def fit_model(
    y,
    family: Family,
    X,
    cov_spec: CovarianceSpec,
    options: FitOptions | None = None,
) -> FitResult:
    """Maximize the Laplace marginal objective over (theta, phi).

    Nelder-Mead runs in transformed space with one restart from the
    incumbent.  Failed inner evaluations at trial points are penalized, not
    fatal; a failure at the returned optimum raises.
    """
    options = options or FitOptions()
    mode = options.mode.lower()
    if mode not in ("ml", "reml"):
        raise SpecificationError(f"mode must be 'ml' or 'reml', got {options.mode!r}")
    X = as_design_matrix(X, "X", n=cov_spec.n)
    check_full_column_rank(X)
    y = family.check_support(as_vector(y, "y", n=cov_spec.n))

    space = build_param_space(y, family, cov_spec, options.estimate_phi, options.bounds)
    x0 = space.transform(initial_params(y, family, cov_spec, space))
    t_lo, t_hi = space.transformed_bounds()

    state = {
        "warm": None, "best_a": None, "n_evals": 0, "best_x": None,
        "best_obj": np.inf, "trace": [], "max_newton": 0,
    }

    def neg_loglik(x):
        state["n_evals"] += 1
        xc = np.clip(x, t_lo, t_hi)
        penalty = _PENALTY * float(np.sum((x - xc) ** 2))
        params = space.untransform(xc)
        theta, phi = space.split(params)
        try:
            value, mode_res = laplace_loglik(
                y, family, X, cov_spec, theta, phi, mode=mode,
                warm_start=state["warm"], options=options.solver,
            )
            obj = -value.loglik + penalty
        except (ConvergenceError, NotPositiveDefiniteError, SpecificationError) as exc:
            logger.debug("evaluation failed at %s: %s", params, exc)
            return _FAILED_EVAL + penalty
        state["warm"] = mode_res.a
        state["max_newton"] = max(state["max_newton"], mode_res.iterations)
        if penalty == 0.0 and obj < state["best_obj"]:
            state["best_obj"] = obj
            state["best_x"] = xc.copy()
            state["best_a"] = mode_res.a
        state["trace"].append(-state["best_obj"] if np.isfinite(state["best_obj"]) else np.nan)
        if options.verbose:
            logger.info(
                "eval=%d loglik=%.6f max_grad=%.2e newton_iters=%d",
                state["n_evals"], value.loglik, mode_res.max_grad, mode_res.iterations,
            )
        return obj

    maxfev = options.maxfev or 200 * space.dim
    nm_opts = {"maxfev": maxfev, "xatol": options.xatol, "fatol": options.fatol}
    res = minimize(neg_loglik, x0, method="Nelder-Mead", options=nm_opts)
    if state["best_x"] is None:
        raise ConvergenceError("no successful objective evaluation during the search")
    # one restart from the incumbent
    res = minimize(neg_loglik, state["best_x"], method="Nelder-Mead", options=nm_opts)
    converged = bool(res.success)
    status = "converged" if converged else "max_evaluations"

    best_params = space.untransform(state["best_x"])
    theta_hat, phi_hat = space.split(best_params)
    value, mode_res = laplace_loglik(
        y, family, X, cov_spec, theta_hat, phi_hat, mode=mode,
        warm_start=state["best_a"], options=options.solver,
    )
    ctx = mode_res._context
    beta = ctx.gls_beta(mode_res.a)

    return FitResult(
        theta=theta_hat,
        phi=phi_hat if space.has_phi else (family.phi if family.has_dispersion else None),
        beta=beta,
        a=mode_res.a,
        sigma=ctx.sigma,
        loglik=value.loglik,
        minus2ll=-2.0 * value.loglik,
        mode=mode,
        value=value,
        mode_result=mode_res,
        param_space=space,
        param_names=[e.name for e in space.entries],
        n_evals=state["n_evals"],
        max_newton_iterations=state["max_newton"],
        converged=converged,
        status=status,
        bound_flags=space.bound_flags(state["best_x"]),
        best_trace=state["trace"],
        cov_spec=cov_spec,
        X=X,
        y=y,
        family=family,
    )


def evaluate_at(
    y,
    family: Family,
    X,
    cov_spec: CovarianceSpec,
    theta,
    phi: float | None = None,
    mode: str = "reml",
    solver: SolverOptions | None = None,
    warm_start=None,
    estimate_phi: bool | None = None,
) -> FitResult:
    """Build a FitResult by a single objective evaluation at fixed
    parameters (no search).  Used to rehydrate a stored fit for prediction
    and in tests.  ``estimate_phi`` controls whether dispersion counts as a
    free parameter; by default it does whenever a value is supplied."""
    mode = mode.lower()
    X = as_design_matrix(X, "X", n=cov_spec.n)
    check_full_column_rank(X)
    y = family.check_support(as_vector(y, "y", n=cov_spec.n))
    if estimate_phi is None:
        estimate_phi = family.has_dispersion and phi is not None
    estimate_phi = estimate_phi and family.has_dispersion
    space = build_param_space(y, family, cov_spec, estimate_phi=estimate_phi)
    theta = as_vector(theta, "theta", n=space.theta_len)
    value, mode_res = laplace_loglik(
        y, family, X, cov_spec, theta, phi, mode=mode,
        warm_start=warm_start, options=solver or SolverOptions(),
    )
    ctx = mode_res._context
    params = np.concatenate([theta, [phi]]) if space.has_phi else theta
    return FitResult(
        theta=theta,
        phi=phi if phi is not None else (family.phi if family.has_dispersion else None),
        beta=ctx.gls_beta(mode_res.a),
        a=mode_res.a,
        sigma=ctx.sigma,
        loglik=value.loglik,
        minus2ll=-2.0 * value.loglik,
        mode=mode,
        value=value,
        mode_result=mode_res,
        param_space=space,
        param_names=[e.name for e in space.entries],
        n_evals=1,
        max_newton_iterations=mode_res.iterations,
        converged=True,
        status="evaluated",
        bound_flags=space.bound_flags(space.transform(params)),
        best_trace=[value.loglik],
        cov_spec=cov_spec,
        X=X,
        y=y,
        family=family,
    )


@dataclass
class ComparisonRow:
    index: int
    label: str
    minus2ll: float
    aic: float
    n_params: int
    rank: int


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]

    def __iter__(self):
        return iter(self.rows)


def compare(fits, labels=None) -> ComparisonTable:
    """Rank fitted models by -2 log-likelihood (AIC reported alongside).

    All fits must share the response data and estimation mode; REML fits are
    comparable only with identical fixed-effect design matrices.
    """
    fits = list(fits)
    if not fits:
        raise SpecificationError("compare needs at least one fit")
    labels = labels or [f"model_{i}" for i in range(len(fits))]
    first = fits[0]
    for k, other in enumerate(fits[1:], start=1):
        if other.y.shape != first.y.shape or not np.array_equal(other.y, first.y):
            raise SpecificationError(f"fit {k} was estimated on different data")
        if other.mode != first.mode:
            raise SpecificationError("cannot compare fits with different estimation modes")
    if first.mode == "reml":
        for k, other in enumerate(fits[1:], start=1):
            if other.X.shape != first.X.shape or not np.array_equal(other.X, first.X):
                raise SpecificationError(
                    "REML fits with different fixed-effect designs are not comparable"
                )
    order = sorted(range(len(fits)), key=lambda i: (fits[i].minus2ll, i))
    ranks = {idx: r for r, idx in enumerate(order, start=1)}
    rows = [
        ComparisonRow(
            index=i,
            label=labels[i],
            minus2ll=fits[i].minus2ll,
            aic=fits[i].aic,
            n_params=fits[i].n_free_params,
            rank=ranks[i],
        )
        for i in range(len(fits))
    ]
    rows.sort(key=lambda r: r.rank)
    return ComparisonTable(rows=rows)
