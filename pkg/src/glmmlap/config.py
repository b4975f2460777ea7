"""Declarative model configuration for the command line.

The config is one YAML file.  Top-level keys::

    data: counts.csv          # CSV with a header row; missing values rejected
    response: y
    trials: n_trials          # optional, binomial only
    family: poisson           # binomial | poisson | negative_binomial |
                              # gamma | inverse_gaussian | beta
    phi: 1.0                  # optional dispersion initial value
    estimate_phi: true        # optional; false holds phi fixed
    mode: reml                # reml | ml
    seed: 0
    level: 0.90
    fixed:
      intercept: true
      columns: [x1, x2, "x1:x2", "x2^2"]   # col, col:col and col^2 syntax
    covariance:
      - kind: exponential_geo
        coords: [xcoord, ycoord]
        nugget: true
      - kind: random_effect
        group: site
      - kind: ar1
        time: year
        group: site
      - kind: car              # or sar
        edges: edges.csv       # i,j per row
        index_base: 0          # or 1
    bounds:                    # optional search-bound overrides
      variance_upper: 50.0
      range_upper: 14.0
      rho_upper: 0.999999
      phi_lower: 1.0e-6
      phi_upper: 1.0e6
    predict:                   # used by the predict subcommand
      file: sites.csv          # same metadata columns as the data file
      id: site_id              # optional id column; defaults to row index
      joint_edges: joint.csv   # car/sar only: edges over data + prediction rows
    simulate:                  # used by the simulate subcommand
      family: poisson
      phi: 1.0
      beta: [0.5, 0.5, -0.5, 0.5]
      sigma_sq: 1.0
      range: 1.0
      nugget_sq: 1.0e-4
      n_obs: 100
      n_pred: 25
      n_replicates: 500
      seed: 42
      level: 0.90

Unknown keys are rejected with the offending path.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .errors import DataError, SpecificationError
from .estimator import CovTerm, bind_component, prediction_entry
from .covariance import CovarianceSpec, PredictionMeta
from .families import FAMILY_KINDS, get_family
from .simulate import ExperimentConfig

__all__ = ["ModelConfig", "load_config", "ModelData", "build_model_data"]


def _check_keys(mapping: dict, allowed: set[str], path: str) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise SpecificationError(f"unknown config key {path}{unknown[0]!r}")


def _require(mapping: dict, key: str, path: str):
    if key not in mapping:
        raise SpecificationError(f"missing required config key {path}{key!r}")
    return mapping[key]


@dataclass
class FixedSpec:
    intercept: bool
    columns: list[str]


@dataclass
class CovTermConfig:
    kind: str
    coords: list[str] | None = None
    time: str | None = None
    group: str | None = None
    design: list[str] | None = None
    edges: str | None = None
    index_base: int = 0
    nugget: bool = False
    allow_negative_rho: bool = False


@dataclass
class PredictSpec:
    file: str
    id_column: str | None = None
    joint_edges: str | None = None


@dataclass
class ModelConfig:
    path: Path
    raw_bytes: bytes
    data: str | None
    response: str | None
    trials: str | None
    family: str | None
    phi: float | None
    estimate_phi: bool
    mode: str
    seed: int
    level: float
    fixed: FixedSpec | None
    covariance: list[CovTermConfig]
    bounds: dict | None
    predict: PredictSpec | None
    simulate: ExperimentConfig | None

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.raw_bytes).hexdigest()


_TOP_KEYS = {
    "data", "response", "trials", "family", "phi", "estimate_phi", "mode",
    "seed", "level", "fixed", "covariance", "bounds", "predict", "simulate",
}
_FIXED_KEYS = {"intercept", "columns"}
_COV_KEYS = {
    "kind", "coords", "time", "group", "design", "edges", "index_base",
    "nugget", "allow_negative_rho",
}
_BOUND_KEYS = {"variance_upper", "range_upper", "rho_upper", "phi_lower", "phi_upper"}
_PREDICT_KEYS = {"file", "id", "joint_edges"}
_SIM_KEYS = {
    "family", "phi", "beta", "sigma_sq", "range", "nugget_sq", "n_obs",
    "n_pred", "n_replicates", "seed", "level", "mode",
}
_COV_KINDS = {"iid_nugget", "random_effect", "ar1", "exponential_geo", "car", "sar"}


def _parse_fixed(raw, path: str) -> FixedSpec:
    if not isinstance(raw, dict):
        raise SpecificationError(f"{path} must be a mapping")
    _check_keys(raw, _FIXED_KEYS, f"{path}.")
    columns = raw.get("columns", [])
    if not isinstance(columns, list) or not all(isinstance(c, str) for c in columns):
        raise SpecificationError(f"{path}.columns must be a list of column names")
    return FixedSpec(intercept=bool(raw.get("intercept", True)), columns=columns)


def _parse_cov_term(raw, path: str) -> CovTermConfig:
    if not isinstance(raw, dict):
        raise SpecificationError(f"{path} must be a mapping")
    _check_keys(raw, _COV_KEYS, f"{path}.")
    kind = _require(raw, "kind", f"{path}.")
    if kind not in _COV_KINDS:
        raise SpecificationError(
            f"{path}.kind must be one of {sorted(_COV_KINDS)}, got {kind!r}"
        )
    coords = raw.get("coords")
    if coords is not None and (
        not isinstance(coords, list) or not all(isinstance(c, str) for c in coords)
    ):
        raise SpecificationError(f"{path}.coords must be a list of column names")
    design = raw.get("design")
    if design is not None and (
        not isinstance(design, list) or not all(isinstance(c, str) for c in design)
    ):
        raise SpecificationError(f"{path}.design must be a list of column names")
    index_base = int(raw.get("index_base", 0))
    if index_base not in (0, 1):
        raise SpecificationError(f"{path}.index_base must be 0 or 1")
    return CovTermConfig(
        kind=kind,
        coords=coords,
        time=raw.get("time"),
        group=raw.get("group"),
        design=design,
        edges=raw.get("edges"),
        index_base=index_base,
        nugget=bool(raw.get("nugget", False)),
        allow_negative_rho=bool(raw.get("allow_negative_rho", False)),
    )


def _parse_simulate(raw, path: str) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise SpecificationError(f"{path} must be a mapping")
    _check_keys(raw, _SIM_KEYS, f"{path}.")
    family = raw.get("family", "poisson")
    if family not in FAMILY_KINDS:
        raise SpecificationError(f"{path}.family must be one of {sorted(FAMILY_KINDS)}")
    beta = raw.get("beta", [0.5, 0.5, -0.5, 0.5])
    if not isinstance(beta, list) or len(beta) != 4:
        raise SpecificationError(f"{path}.beta must be a list of 4 values")
    return ExperimentConfig(
        family=family,
        phi=raw.get("phi"),
        beta=tuple(float(b) for b in beta),
        sigma_sq=float(raw.get("sigma_sq", 1.0)),
        corr_range=float(raw.get("range", 1.0)),
        nugget_sq=float(raw.get("nugget_sq", 1e-4)),
        n_obs=int(raw.get("n_obs", 200)),
        n_pred=int(raw.get("n_pred", 100)),
        n_replicates=int(raw.get("n_replicates", 500)),
        seed=int(raw.get("seed", 0)),
        level=float(raw.get("level", 0.90)),
        mode=str(raw.get("mode", "reml")),
    )


def load_config(path) -> ModelConfig:
    path = Path(path)
    try:
        raw_bytes = path.read_bytes()
    except OSError as exc:
        raise SpecificationError(f"cannot read config file {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(raw_bytes)
    except yaml.YAMLError as exc:
        raise SpecificationError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise SpecificationError("config must be a YAML mapping at top level")
    _check_keys(raw, _TOP_KEYS, "")

    family = raw.get("family")
    if family is not None and family not in FAMILY_KINDS:
        raise SpecificationError(f"family must be one of {sorted(FAMILY_KINDS)}, got {family!r}")
    mode = str(raw.get("mode", "reml")).lower()
    if mode not in ("ml", "reml"):
        raise SpecificationError(f"mode must be 'ml' or 'reml', got {mode!r}")
    level = float(raw.get("level", 0.90))
    if not 0 < level < 1:
        raise SpecificationError(f"level must lie in (0, 1), got {level}")

    bounds = raw.get("bounds")
    if bounds is not None:
        if not isinstance(bounds, dict):
            raise SpecificationError("bounds must be a mapping")
        _check_keys(bounds, _BOUND_KEYS, "bounds.")
        bounds = {k: float(v) for k, v in bounds.items()}

    cov_raw = raw.get("covariance", [])
    if not isinstance(cov_raw, list):
        raise SpecificationError("covariance must be a list of component mappings")
    covariance = [_parse_cov_term(c, f"covariance[{i}]") for i, c in enumerate(cov_raw)]

    predict = None
    if raw.get("predict") is not None:
        p = raw["predict"]
        if not isinstance(p, dict):
            raise SpecificationError("predict must be a mapping")
        _check_keys(p, _PREDICT_KEYS, "predict.")
        predict = PredictSpec(
            file=str(_require(p, "file", "predict.")),
            id_column=p.get("id"),
            joint_edges=p.get("joint_edges"),
        )

    simulate = None
    if raw.get("simulate") is not None:
        simulate = _parse_simulate(raw["simulate"], "simulate")

    fixed = _parse_fixed(raw["fixed"], "fixed") if raw.get("fixed") is not None else None

    return ModelConfig(
        path=path,
        raw_bytes=raw_bytes,
        data=raw.get("data"),
        response=raw.get("response"),
        trials=raw.get("trials"),
        family=family,
        phi=None if raw.get("phi") is None else float(raw["phi"]),
        estimate_phi=bool(raw.get("estimate_phi", True)),
        mode=mode,
        seed=int(raw.get("seed", 0)),
        level=level,
        fixed=fixed,
        covariance=covariance,
        bounds=bounds,
        predict=predict,
        simulate=simulate,
    )


def read_table(path, label: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError as exc:
        raise DataError(f"{label} file {path} not found") from exc
    except Exception as exc:
        raise DataError(f"{label} file {path} is unreadable: {exc}") from exc
    if frame.shape[0] == 0:
        raise DataError(f"{label} file {path} has no rows")
    return frame


def _column(frame: pd.DataFrame, name: str, label: str) -> np.ndarray:
    if name not in frame.columns:
        raise SpecificationError(f"column {name!r} named in the config is missing from {label}")
    col = frame[name]
    if col.isna().any():
        row = int(col.isna().idxmax())
        raise DataError(f"column {name!r} in {label} has a missing value at row {row}")
    return col.to_numpy()


def _numeric_column(frame, name, label) -> np.ndarray:
    values = _column(frame, name, label)
    try:
        return np.asarray(values, dtype=float)
    except (TypeError, ValueError) as exc:
        raise DataError(f"column {name!r} in {label} is not numeric") from exc


def design_matrix(frame: pd.DataFrame, fixed: FixedSpec, label: str) -> tuple[np.ndarray, list[str]]:
    """Build the fixed-effects design from column expressions.

    Supported syntax: ``col`` for a column, ``a:b`` for a product, and
    ``a^2`` for a square; interactions and powers are precomputed here so
    the numerical core stays formula-free.
    """
    columns, names = [], []
    if fixed.intercept:
        columns.append(np.ones(frame.shape[0]))
        names.append("Intercept")
    for expr in fixed.columns:
        if ":" in expr:
            a, b = expr.split(":", 1)
            columns.append(_numeric_column(frame, a.strip(), label) * _numeric_column(frame, b.strip(), label))
        elif expr.endswith("^2"):
            base = expr[:-2].strip()
            columns.append(_numeric_column(frame, base, label) ** 2)
        else:
            columns.append(_numeric_column(frame, expr.strip(), label))
        names.append(expr)
    if not columns:
        raise SpecificationError("fixed-effects design is empty (no intercept, no columns)")
    return np.column_stack(columns), names


def read_edge_list(path, n: int, index_base: int) -> np.ndarray:
    """Neighbor matrix from a CSV edge list with one i,j pair per row."""
    try:
        pairs = pd.read_csv(path, header=None).to_numpy()
    except FileNotFoundError as exc:
        raise DataError(f"edge file {path} not found") from exc
    except Exception as exc:
        raise DataError(f"edge file {path} is unreadable: {exc}") from exc
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise DataError(f"edge file {path} must have two columns (i, j)")
    idx = np.asarray(pairs, dtype=float)
    if np.any(idx != np.floor(idx)):
        raise DataError(f"edge file {path} contains non-integer indices")
    idx = idx.astype(int) - index_base
    if np.any(idx < 0) or np.any(idx >= n):
        raise DataError(
            f"edge file {path} has an index outside [{index_base}, {n - 1 + index_base}]"
        )
    if np.any(idx[:, 0] == idx[:, 1]):
        raise DataError(f"edge file {path} contains a self-loop")
    W = np.zeros((n, n))
    W[idx[:, 0], idx[:, 1]] = 1.0
    W[idx[:, 1], idx[:, 0]] = 1.0
    return W


def _term_meta(term: CovTermConfig, frame: pd.DataFrame, index: int, label: str,
               n_for_edges: int | None = None, edges_override: str | None = None) -> tuple[CovTerm, dict]:
    """Bind one config covariance term to metadata arrays; returns the
    declarative CovTerm plus the meta entries it references."""
    meta: dict = {}
    prefix = f"__t{index}_"
    kwargs: dict = {"kind": term.kind, "nugget": term.nugget,
                    "allow_negative_rho": term.allow_negative_rho}
    if term.kind == "exponential_geo":
        if not term.coords:
            raise SpecificationError(f"covariance[{index}] (exponential_geo) needs coords columns")
        cols = [_numeric_column(frame, c, label) for c in term.coords]
        meta[prefix + "coords"] = np.column_stack(cols)
        kwargs["coords"] = prefix + "coords"
    elif term.kind == "ar1":
        if not term.time:
            raise SpecificationError(f"covariance[{index}] (ar1) needs a time column")
        meta[prefix + "time"] = _numeric_column(frame, term.time, label)
        kwargs["time"] = prefix + "time"
        if term.group:
            meta[prefix + "group"] = _column(frame, term.group, label)
            kwargs["group"] = prefix + "group"
    elif term.kind == "random_effect":
        if term.design:
            cols = [_numeric_column(frame, c, label) for c in term.design]
            meta[prefix + "design"] = np.column_stack(cols)
            kwargs["design"] = prefix + "design"
        elif term.group:
            meta[prefix + "group"] = _column(frame, term.group, label)
            kwargs["group"] = prefix + "group"
        else:
            raise SpecificationError(
                f"covariance[{index}] (random_effect) needs a group or design entry"
            )
    elif term.kind in ("car", "sar"):
        edges = edges_override if edges_override is not None else term.edges
        if not edges:
            raise SpecificationError(f"covariance[{index}] ({term.kind}) needs an edges file")
        n = n_for_edges if n_for_edges is not None else frame.shape[0]
        meta[prefix + "neighbors"] = read_edge_list(edges, n, term.index_base)
        kwargs["neighbors"] = prefix + "neighbors"
    return CovTerm(**kwargs), meta


@dataclass
class ModelData:
    """Everything the fit subcommand needs, bound from config plus data."""

    y: np.ndarray
    X: np.ndarray
    effect_names: list[str]
    family: object
    cov_spec: CovarianceSpec
    terms: list[CovTerm]
    meta: dict
    trials: np.ndarray | None
    data_hash: str
    frame: pd.DataFrame


def build_model_data(config: ModelConfig) -> ModelData:
    if config.data is None:
        raise SpecificationError("config key 'data' is required for this command")
    if config.response is None:
        raise SpecificationError("config key 'response' is required for this command")
    if config.family is None:
        raise SpecificationError("config key 'family' is required for this command")
    if config.fixed is None:
        raise SpecificationError("config key 'fixed' is required for this command")
    if not config.covariance:
        raise SpecificationError("config key 'covariance' must list at least one component")

    data_path = Path(config.data)
    if not data_path.is_absolute():
        data_path = config.path.parent / data_path
    frame = read_table(data_path, "data")
    y = _numeric_column(frame, config.response, "data")
    trials = None
    if config.trials is not None:
        trials = _numeric_column(frame, config.trials, "data")
    X, names = design_matrix(frame, config.fixed, "data")

    family = get_family(config.family, phi=config.phi, trials=trials)

    terms, meta = [], {}
    for i, term_cfg in enumerate(config.covariance):
        term, term_meta = _term_meta(
            term_cfg, frame, i, "data",
            edges_override=self_path(config, term_cfg.edges),
        )
        terms.append(term)
        meta.update(term_meta)
    components = [bind_component(t, meta, frame.shape[0]) for t in terms]
    spec = CovarianceSpec(components=components)
    return ModelData(
        y=y,
        X=X,
        effect_names=names,
        family=family,
        cov_spec=spec,
        terms=terms,
        meta=meta,
        trials=trials,
        data_hash=hashlib.sha256(data_path.read_bytes()).hexdigest(),
        frame=frame,
    )


def self_path(config: ModelConfig, rel: str | None) -> str | None:
    """Resolve a file path from the config relative to the config file."""
    if rel is None:
        return None
    p = Path(rel)
    return str(p if p.is_absolute() else config.path.parent / p)


def build_prediction_meta(
    config: ModelConfig, model: ModelData, pred_frame: pd.DataFrame
) -> PredictionMeta:
    """Prediction metadata for the sites in the prediction file; car/sar
    terms read the joint edge list over data rows followed by prediction
    rows."""
    m = pred_frame.shape[0]
    n = model.frame.shape[0]
    entries = []
    for i, (term_cfg, term) in enumerate(zip(config.covariance, model.terms)):
        if term_cfg.kind in ("car", "sar"):
            if config.predict is None or config.predict.joint_edges is None:
                raise SpecificationError(
                    f"covariance[{i}] ({term_cfg.kind}) prediction needs predict.joint_edges"
                )
            W_joint = read_edge_list(
                self_path(config, config.predict.joint_edges), n + m, term_cfg.index_base
            )
            entries.append({"W_joint": W_joint})
            continue
        bound_term, term_meta = _term_meta(term_cfg, pred_frame, i, "prediction file")
        entries.append(prediction_entry(bound_term, term_meta))
    return PredictionMeta(m=m, per_component=entries)
