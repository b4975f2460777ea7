"""glmmlap: generalized linear mixed models with patterned covariance,
fitted by Laplace-approximated marginal ML/REML, with corrected fixed-effect
inference, latent prediction and a simulation harness."""

from .covariance import (
    AR1,
    CAR,
    SAR,
    CovarianceSpec,
    CovMatrix,
    ExponentialGeo,
    Nugget,
    PredictionMeta,
    RandomEffect,
    ar1_block,
    build_sigma,
    car_cov,
    cross_cov,
    indicator_matrix,
    neighbors_from_distance,
    row_standardize,
    sar_cov,
)
from .errors import (
    ConvergenceError,
    GlmmError,
    NotPositiveDefiniteError,
    SpecificationError,
    SupportError,
)
from .estimator import CovTerm, LaplaceGLMM
from .families import (
    Beta,
    Binomial,
    Family,
    Gamma,
    InverseGaussian,
    NegativeBinomial,
    Poisson,
    get_family,
)
from .fitting import (
    ComparisonTable,
    FitOptions,
    FitResult,
    ParamSpace,
    build_param_space,
    compare,
    evaluate_at,
    fit_model,
    initial_params,
)
from .inference import (
    FixedEffectsTable,
    PredictionResult,
    fixed_effects,
    interval_bounds,
    predict,
    z_multiplier,
)
from .laplace import (
    LikelihoodValue,
    ModeResult,
    SigmaContext,
    SolverOptions,
    gaussian_loglik,
    gls_beta,
    laplace_loglik,
    newton_mode,
    reml_projection,
)
from .linalg import FactoredMatrix, block_solve, chol_logdet, smw_apply
from .simulate import ExperimentConfig, ExperimentReport, run_experiment, sim_mvn

__version__ = "0.1.0"

__all__ = [
    "AR1", "CAR", "SAR", "CovarianceSpec", "CovMatrix", "ExponentialGeo",
    "Nugget", "PredictionMeta", "RandomEffect", "ar1_block", "build_sigma",
    "car_cov", "cross_cov", "indicator_matrix", "neighbors_from_distance",
    "row_standardize", "sar_cov",
    "ConvergenceError", "GlmmError", "NotPositiveDefiniteError",
    "SpecificationError", "SupportError",
    "CovTerm", "LaplaceGLMM",
    "Beta", "Binomial", "Family", "Gamma", "InverseGaussian",
    "NegativeBinomial", "Poisson", "get_family",
    "ComparisonTable", "FitOptions", "FitResult", "ParamSpace",
    "build_param_space", "compare", "evaluate_at", "fit_model", "initial_params",
    "FixedEffectsTable", "PredictionResult", "fixed_effects",
    "interval_bounds", "predict", "z_multiplier",
    "LikelihoodValue", "ModeResult", "SigmaContext", "SolverOptions",
    "gaussian_loglik", "gls_beta", "laplace_loglik", "newton_mode",
    "reml_projection",
    "FactoredMatrix", "block_solve", "chol_logdet", "smw_apply",
    "ExperimentConfig", "ExperimentReport", "run_experiment", "sim_mvn",
    "__version__",
]
