"""Command-line front end: fit, predict, simulate and compare subcommands.

All outputs are a pure function of the config bytes, input files and seed.
Exit codes: 2 for configuration errors, 3 for data errors, 4 for
convergence failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ModelConfig,
    build_model_data,
    build_prediction_meta,
    load_config,
    read_table,
    self_path,
)
from .errors import (
    ConvergenceError,
    DataError,
    NotPositiveDefiniteError,
    SpecificationError,
    SupportError,
)
from .fitting import FitOptions, FitResult, evaluate_at, fit_model
from .inference import fixed_effects, predict as predict_latent
from .simulate import run_experiment

SCHEMA_VERSION = 1

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4

logger = logging.getLogger("glmmlap")


def _fmt(x: float) -> str:
    """Six significant digits for display tables; full precision lives in
    the JSON artifact."""
    return f"{float(x):.6g}"


def _array_hash(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=float).tobytes()).hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _effects_table_lines(table) -> list[str]:
    header = f"{'Effect':<24}{'Est.':>12}{'s.e._u':>12}{'s.e._c':>12}{'t-val.':>12}{'p-val.':>12}"
    lines = [header, "-" * len(header)]
    for name, est, se_u, se_c, t, p in table.rows():
        lines.append(
            f"{name:<24}{_fmt(est):>12}{_fmt(se_u):>12}{_fmt(se_c):>12}{_fmt(t):>12}{_fmt(p):>12}"
        )
    return lines


def _param_table_lines(fit: FitResult) -> list[str]:
    lines = [f"{'Parameter':<40}{'Estimate':>14}", "-" * 54]
    values = list(fit.theta) + ([fit.phi] if fit.param_space.has_phi else [])
    for name, value in zip(fit.param_names, values):
        flag = "  (at bound)" if name in fit.bound_flags else ""
        lines.append(f"{name:<40}{_fmt(value):>14}{flag}")
    return lines


def _fit_artifact(config: ModelConfig, model, fit: FitResult, table, seed: int, level: float) -> dict:
    values = list(map(float, fit.theta)) + ([float(fit.phi)] if fit.param_space.has_phi else [])
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "fit",
        "config_hash": config.config_hash,
        "data_hash": model.data_hash,
        "x_hash": _array_hash(model.X),
        "y_hash": _array_hash(model.y),
        "family": {
            "kind": model.family.name,
            "phi": None if fit.phi is None else float(fit.phi),
            "estimate_phi": bool(config.estimate_phi),
        },
        "mode": fit.mode,
        "seed": seed,
        "level": level,
        "n": int(model.y.shape[0]),
        "p": int(model.X.shape[1]),
        "loglik": float(fit.loglik),
        "minus2ll": float(fit.minus2ll),
        "aic": float(fit.aic),
        "n_free_params": int(fit.n_free_params),
        "parameters": [
            {"name": name, "value": float(value)}
            for name, value in zip(fit.param_names, values)
        ],
        "fixed_effects": [
            {
                "effect": name,
                "est": float(est),
                "se_u": float(se_u),
                "se_c": float(se_c),
                "t": float(t),
                "p": float(p),
            }
            for name, est, se_u, se_c, t, p in table.rows()
        ],
        "convergence": {
            "status": fit.status,
            "n_evals": int(fit.n_evals),
            "newton_iterations": int(fit.mode_result.iterations),
            "max_gradient": float(fit.max_grad),
            "bound_flags": list(fit.bound_flags),
        },
        # the fitted latent mode travels with the artifact so prediction can
        # rehydrate the fit exactly (warm-started Newton re-converges in place)
        "w_hat": [float(w) for w in fit.a],
    }


def cmd_fit(args) -> int:
    config = load_config(args.config)
    model = build_model_data(config)
    mode = args.mode or config.mode
    seed = config.seed if args.seed is None else args.seed
    level = config.level if args.level is None else args.level
    options = FitOptions(
        mode=mode,
        estimate_phi=config.estimate_phi,
        bounds=config.bounds,
        verbose=1 if args.verbose else 0,
    )
    fit = fit_model(model.y, model.family, model.X, model.cov_spec, options)
    table = fixed_effects(fit, names=model.effect_names)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifact = _fit_artifact(config, model, fit, table, seed, level)
    _write_json(out_dir / "fit.json", artifact)

    lines = [f"glmmlap fit ({mode.upper()})", ""]
    lines += _param_table_lines(fit)
    lines += ["", f"-2 log-likelihood: {_fmt(fit.minus2ll)}", f"AIC: {_fmt(fit.aic)}", ""]
    lines += _effects_table_lines(table)
    summary = "\n".join(lines) + "\n"
    (out_dir / "fit_summary.txt").write_text(summary)

    w_lines = ["row,w_hat"] + [f"{i},{w!r}" for i, w in enumerate(map(float, fit.a))]
    (out_dir / "w.csv").write_text("\n".join(w_lines) + "\n")
    sys.stdout.write(summary)
    return 0


def _rehydrate(config: ModelConfig, model, artifact: dict) -> FitResult:
    names = [p["name"] for p in artifact["parameters"]]
    values = [p["value"] for p in artifact["parameters"]]
    has_phi = artifact["family"]["estimate_phi"] and names and names[-1] == "phi"
    theta = np.array(values[:-1] if has_phi else values)
    phi = values[-1] if has_phi else artifact["family"]["phi"]
    warm = artifact.get("w_hat")
    return evaluate_at(
        model.y, model.family, model.X, model.cov_spec, theta, phi,
        mode=artifact["mode"], warm_start=warm,
        estimate_phi=artifact["family"]["estimate_phi"],
    )


def cmd_predict(args) -> int:
    config = load_config(args.config)
    if config.predict is None:
        raise SpecificationError("config has no 'predict' section")
    model = build_model_data(config)
    fit_path = Path(args.fit)
    try:
        artifact = json.loads(fit_path.read_text())
    except OSError as exc:
        raise SpecificationError(f"cannot read fit artifact {fit_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SpecificationError(f"fit artifact {fit_path} is not valid JSON") from exc
    if artifact.get("schema_version") != SCHEMA_VERSION:
        raise SpecificationError("fit artifact has an unsupported schema_version")
    if artifact.get("config_hash") != config.config_hash:
        raise SpecificationError(
            "fit artifact is stale: config_hash does not match the current config"
        )
    if artifact.get("data_hash") != model.data_hash:
        raise SpecificationError("fit artifact is stale: data file has changed")

    fit = _rehydrate(config, model, artifact)
    pred_frame = read_table(self_path(config, config.predict.file), "prediction")
    X_u, _ = _prediction_design(config, pred_frame)
    meta = build_prediction_meta(config, model, pred_frame)
    level = config.level if args.level is None else args.level
    result = predict_latent(fit, X_u, meta, level=level)

    u, se = result.u_hat, result.se
    lower, upper = result.intervals(level)
    if args.exp:
        u, lower, upper = np.exp(u), np.exp(lower), np.exp(upper)
    ids = _prediction_ids(config, pred_frame)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = ["id,u_hat,se,lower,upper"]
    for i in range(len(u)):
        rows.append(f"{ids[i]},{float(u[i])!r},{float(se[i])!r},{float(lower[i])!r},{float(upper[i])!r}")
    (out_dir / "predictions.csv").write_text("\n".join(rows) + "\n")
    sys.stdout.write(f"wrote {len(u)} predictions to {out_dir / 'predictions.csv'}\n")
    return 0


def _prediction_design(config: ModelConfig, pred_frame):
    from .config import design_matrix

    return design_matrix(pred_frame, config.fixed, "prediction file")


def _prediction_ids(config: ModelConfig, pred_frame):
    if config.predict.id_column is not None:
        if config.predict.id_column not in pred_frame.columns:
            raise SpecificationError(
                f"id column {config.predict.id_column!r} missing from the prediction file"
            )
        return pred_frame[config.predict.id_column].tolist()
    return list(range(pred_frame.shape[0]))


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    if config.simulate is None:
        raise SpecificationError("config has no 'simulate' section")
    exp = config.simulate
    if args.seed is not None:
        exp.seed = args.seed
    if args.threads is not None:
        exp.n_jobs = args.threads
    report = run_experiment(exp)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = ["effect,bias,mse,ratio,coverage_uncorrected,coverage_corrected"]
    for name, bias, mse, ratio, cov_u, cov_c in report.rows():
        rows.append(f"{name},{bias!r},{mse!r},{ratio!r},{cov_u!r},{cov_c!r}")
    (out_dir / "report.csv").write_text("\n".join(rows) + "\n")

    header = f"{'effect':<10}{'bias':>10}{'MSE':>10}{'ratio':>10}{'CI_u':>10}{'CI_c':>10}"
    lines = [
        f"glmmlap simulate: family={exp.family} replicates={exp.n_replicates} "
        f"n_obs={exp.n_obs} n_pred={exp.n_pred} seed={exp.seed}",
        f"failed replicates: {report.n_failed}",
        "",
        header,
        "-" * len(header),
    ]
    for name, bias, mse, ratio, cov_u, cov_c in report.rows():
        lines.append(
            f"{name:<10}{_fmt(bias):>10}{_fmt(mse):>10}{_fmt(ratio):>10}"
            f"{_fmt(cov_u):>10}{_fmt(cov_c):>10}"
        )
    text = "\n".join(lines) + "\n"
    (out_dir / "report.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_compare(args) -> int:
    artifacts = []
    for path in args.artifacts:
        try:
            artifacts.append(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise SpecificationError(f"cannot read fit artifact {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise SpecificationError(f"fit artifact {path} is not valid JSON") from exc
    first = artifacts[0]
    for path, art in zip(args.artifacts[1:], artifacts[1:]):
        if art.get("data_hash") != first.get("data_hash"):
            raise SpecificationError(f"artifact {path} was fitted on different data")
        if art.get("mode") != first.get("mode"):
            raise SpecificationError(f"artifact {path} uses a different estimation mode")
    if first.get("mode") == "reml":
        for path, art in zip(args.artifacts[1:], artifacts[1:]):
            if art.get("x_hash") != first.get("x_hash"):
                raise SpecificationError(
                    f"REML comparison requires identical fixed effects; {path} differs"
                )

    order = sorted(range(len(artifacts)), key=lambda i: (artifacts[i]["minus2ll"], i))
    header = f"{'rank':<6}{'model':<28}{'-2LL':>14}{'AIC':>14}{'params':>8}"
    lines = [header, "-" * len(header)]
    rows = ["rank,model,minus2ll,aic,n_params"]
    for rank, i in enumerate(order, start=1):
        name = Path(args.artifacts[i]).name
        art = artifacts[i]
        lines.append(
            f"{rank:<6}{name:<28}{_fmt(art['minus2ll']):>14}{_fmt(art['aic']):>14}"
            f"{art['n_free_params']:>8}"
        )
        rows.append(f"{rank},{name},{art['minus2ll']!r},{art['aic']!r},{art['n_free_params']}")
    text = "\n".join(lines) + "\n"
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "compare.csv").write_text("\n".join(rows) + "\n")
    (out_dir / "compare.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glmmlap",
        description="Fit, predict, simulate and compare GLMMs with patterned covariance",
    )
    parser.add_argument("--version", action="version", version=f"glmmlap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default=".", help="directory for output artifacts")
    common.add_argument("--verbose", action="store_true", help="stream fit diagnostics")
    common.add_argument("--threads", type=int, default=None,
                        help="worker pool size for replicated experiments")

    p_fit = sub.add_parser("fit", parents=[common], help="fit a model from a config file")
    p_fit.add_argument("--config", required=True)
    p_fit.add_argument("--mode", choices=["ml", "reml"], default=None)
    p_fit.add_argument("--seed", type=int, default=None)
    p_fit.add_argument("--level", type=float, default=None)
    p_fit.set_defaults(func=cmd_fit)

    p_pred = sub.add_parser("predict", parents=[common], help="predict at new sites")
    p_pred.add_argument("--config", required=True)
    p_pred.add_argument("--fit", required=True, help="fit.json artifact from the fit subcommand")
    p_pred.add_argument("--level", type=float, default=None)
    p_pred.add_argument("--exp", action="store_true",
                        help="exponentiate predictions and interval bounds for display")
    p_pred.set_defaults(func=cmd_predict)

    p_sim = sub.add_parser("simulate", parents=[common], help="run a coverage experiment")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_cmp = sub.add_parser("compare", parents=[common], help="rank fit artifacts by -2LL")
    p_cmp.add_argument("artifacts", nargs="+")
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "verbose", False):
        logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SupportError, DataError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except SpecificationError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except (ConvergenceError, NotPositiveDefiniteError) as exc:
        sys.stderr.write(f"convergence failure: {exc}\n")
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
