import json
import re
from pathlib import Path

import numpy as np
import numpy.testing as npt
import pytest

from glmmlap import cli
from glmmlap.config import load_config
from glmmlap.errors import SpecificationError


def write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


CONFIG_TEMPLATE = """\
data: data.csv
response: y
family: poisson
mode: reml
seed: 7
level: 0.90
fixed:
  intercept: true
  columns: [x1]
covariance:
  - kind: exponential_geo
    coords: [xc, yc]
    nugget: true
predict:
  file: pred.csv
  id: site
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(42)
    n = 40
    xc, yc = rng.uniform(size=n), rng.uniform(size=n)
    x1 = rng.standard_normal(n)
    w = 0.5 + 0.5 * x1 + 0.3 * rng.standard_normal(n)
    y = rng.poisson(np.exp(w))
    rows = ["y,x1,xc,yc"] + [
        f"{int(y[i])},{float(x1[i])!r},{float(xc[i])!r},{float(yc[i])!r}" for i in range(n)
    ]
    write(root / "data.csv", "\n".join(rows) + "\n")
    pred_rows = ["site,x1,xc,yc"] + [
        f"s{j},{float(rng.standard_normal())!r},{float(rng.uniform())!r},{float(rng.uniform())!r}"
        for j in range(3)
    ]
    write(root / "pred.csv", "\n".join(pred_rows) + "\n")
    write(root / "config.yaml", CONFIG_TEMPLATE)
    return root


def run_cli(args):
    return cli.main(args)


class TestConfigParsing:
    def test_golden_config_fields(self, workspace):
        config = load_config(workspace / "config.yaml")
        assert config.family == "poisson"
        assert config.mode == "reml"
        assert config.seed == 7
        assert config.fixed.intercept is True
        assert config.fixed.columns == ["x1"]
        assert config.covariance[0].kind == "exponential_geo"
        assert config.covariance[0].coords == ["xc", "yc"]
        assert config.covariance[0].nugget is True
        assert config.predict.file == "pred.csv"
        assert config.predict.id_column == "site"

    def test_unknown_key_rejected_with_path(self, tmp_path):
        path = write(tmp_path / "bad.yaml", "family: poisson\nbogus_key: 1\n")
        with pytest.raises(SpecificationError, match="bogus_key"):
            load_config(path)

    def test_unknown_nested_key_rejected(self, tmp_path):
        path = write(
            tmp_path / "bad.yaml",
            "covariance:\n  - kind: ar1\n    tme: year\n",
        )
        with pytest.raises(SpecificationError, match=re.escape("covariance[0].'tme'")):
            load_config(path)

    def test_bad_family_rejected(self, tmp_path):
        path = write(tmp_path / "bad.yaml", "family: pois\n")
        with pytest.raises(SpecificationError, match="pois"):
            load_config(path)

    def test_interaction_and_power_columns(self, tmp_path):
        import pandas as pd

        from glmmlap.config import FixedSpec, design_matrix

        frame = pd.DataFrame({"a": [1.0, 2.0], "b": [3.0, 4.0]})
        X, names = design_matrix(frame, FixedSpec(True, ["a", "a:b", "b^2"]), "test")
        npt.assert_array_equal(X, [[1, 1, 3, 9], [1, 2, 8, 16]])
        assert names == ["Intercept", "a", "a:b", "b^2"]


@pytest.fixture(scope="module")
def fit_dir(workspace):
    out = workspace / "out_fit"
    code = run_cli(["fit", "--config", str(workspace / "config.yaml"),
                    "--out-dir", str(out)])
    assert code == 0
    return out


class TestFitCommand:
    def test_artifacts_exist(self, fit_dir):
        assert (fit_dir / "fit.json").exists()
        assert (fit_dir / "fit_summary.txt").exists()
        assert (fit_dir / "w.csv").exists()

    def test_table_headers_exact(self, fit_dir):
        text = (fit_dir / "fit_summary.txt").read_text()
        assert "Effect" in text
        for col in ["Est.", "s.e._u", "s.e._c", "t-val.", "p-val."]:
            assert col in text

    def test_table_numbers_round_trip_through_json(self, fit_dir):
        artifact = json.loads((fit_dir / "fit.json").read_text())
        text = (fit_dir / "fit_summary.txt").read_text()
        for row in artifact["fixed_effects"]:
            line = next(l for l in text.splitlines() if l.startswith(row["effect"]))
            shown = line.split()[1:]
            for label, value in zip(["est", "se_u", "se_c", "t", "p"], shown):
                assert float(value) == pytest.approx(row[label], rel=1e-5)

    def test_schema_and_hashes(self, fit_dir, workspace):
        artifact = json.loads((fit_dir / "fit.json").read_text())
        assert artifact["schema_version"] == 1
        assert artifact["mode"] == "reml"
        assert len(artifact["config_hash"]) == 64
        assert artifact["convergence"]["max_gradient"] < 1e-8

    def test_w_csv_has_all_rows(self, fit_dir):
        lines = (fit_dir / "w.csv").read_text().strip().splitlines()
        assert lines[0] == "row,w_hat"
        assert len(lines) == 41

    def test_deterministic_artifacts(self, workspace, fit_dir):
        out2 = workspace / "out_fit2"
        assert run_cli(["fit", "--config", str(workspace / "config.yaml"),
                        "--out-dir", str(out2)]) == 0
        for name in ["fit.json", "fit_summary.txt", "w.csv"]:
            assert (out2 / name).read_bytes() == (fit_dir / name).read_bytes()

    def test_missing_response_column_exit_2(self, workspace, tmp_path, capsys):
        bad = CONFIG_TEMPLATE.replace("response: y", "response: zz")
        cfg = write(tmp_path / "bad.yaml", bad)
        (tmp_path / "data.csv").write_bytes((workspace / "data.csv").read_bytes())
        code = run_cli(["fit", "--config", str(cfg), "--out-dir", str(tmp_path / "o")])
        assert code == 2
        assert "zz" in capsys.readouterr().err

    def test_missing_value_exit_3(self, workspace, tmp_path, capsys):
        data = (workspace / "data.csv").read_text().splitlines()
        data[1] = "," + data[1].split(",", 1)[1]
        write(tmp_path / "data.csv", "\n".join(data) + "\n")
        write(tmp_path / "cfg.yaml", CONFIG_TEMPLATE)
        code = run_cli(["fit", "--config", str(tmp_path / "cfg.yaml"),
                        "--out-dir", str(tmp_path / "o")])
        assert code == 3
        assert "missing" in capsys.readouterr().err


@pytest.fixture(scope="module")
def fitted(workspace):
    out = workspace / "out_pred"
    assert run_cli(["fit", "--config", str(workspace / "config.yaml"),
                    "--out-dir", str(out)]) == 0
    return out


class TestPredictCommand:
    def test_predictions_match_library(self, workspace, fitted):
        import pandas as pd

        assert run_cli(["predict", "--config", str(workspace / "config.yaml"),
                        "--fit", str(fitted / "fit.json"),
                        "--out-dir", str(fitted)]) == 0
        pred = pd.read_csv(fitted / "predictions.csv")
        assert list(pred.columns) == ["id", "u_hat", "se", "lower", "upper"]
        assert list(pred["id"]) == ["s0", "s1", "s2"]

        from glmmlap import (
            CovarianceSpec, ExponentialGeo, PredictionMeta, evaluate_at,
            get_family, predict as predict_latent,
        )

        artifact = json.loads((fitted / "fit.json").read_text())
        data = pd.read_csv(workspace / "data.csv")
        pf = pd.read_csv(workspace / "pred.csv")
        spec = CovarianceSpec(components=[
            ExponentialGeo(data[["xc", "yc"]].to_numpy(), nugget=True)
        ])
        X = np.column_stack([np.ones(len(data)), data["x1"]])
        theta = [p["value"] for p in artifact["parameters"]]
        fit = evaluate_at(data["y"].to_numpy(float), get_family("poisson"), X, spec,
                          theta, mode="reml")
        meta = PredictionMeta(m=3, per_component=[{"coords": pf[["xc", "yc"]].to_numpy()}])
        lib = predict_latent(fit, np.column_stack([np.ones(3), pf["x1"]]), meta, level=0.9)
        npt.assert_allclose(pred["u_hat"].to_numpy(), lib.u_hat, rtol=1e-9)
        npt.assert_allclose(pred["se"].to_numpy(), lib.se, rtol=1e-9)

    def test_exp_flag_transforms_monotonically(self, workspace, fitted):
        out = workspace / "out_exp"
        assert run_cli(["predict", "--config", str(workspace / "config.yaml"),
                        "--fit", str(fitted / "fit.json"),
                        "--out-dir", str(out), "--exp"]) == 0
        import pandas as pd

        plain = pd.read_csv(fitted / "predictions.csv")
        exped = pd.read_csv(out / "predictions.csv")
        npt.assert_allclose(exped["u_hat"], np.exp(plain["u_hat"]), rtol=1e-12)
        npt.assert_allclose(exped["lower"], np.exp(plain["lower"]), rtol=1e-12)
        npt.assert_allclose(exped["upper"], np.exp(plain["upper"]), rtol=1e-12)

    def test_stale_artifact_exit_2(self, workspace, fitted, tmp_path, capsys):
        changed = CONFIG_TEMPLATE.replace("seed: 7", "seed: 8")
        cfg = write(tmp_path / "config.yaml", changed)
        for name in ["data.csv", "pred.csv"]:
            (tmp_path / name).write_bytes((workspace / name).read_bytes())
        code = run_cli(["predict", "--config", str(cfg),
                        "--fit", str(fitted / "fit.json"),
                        "--out-dir", str(tmp_path / "o")])
        assert code == 2
        assert "stale" in capsys.readouterr().err


SIM_CONFIG = """\
simulate:
  family: poisson
  beta: [0.5, 0.5, -0.5, 0.5]
  sigma_sq: 1.0
  range: 1.0
  nugget_sq: 1.0e-4
  n_obs: 30
  n_pred: 4
  n_replicates: 2
  seed: 5
"""


class TestSimulateCommand:
    def test_report_structure_and_determinism(self, tmp_path):
        cfg = write(tmp_path / "sim.yaml", SIM_CONFIG)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert run_cli(["simulate", "--config", str(cfg), "--out-dir", str(out1)]) == 0
        assert run_cli(["simulate", "--config", str(cfg), "--out-dir", str(out2)]) == 0
        report = (out1 / "report.csv").read_text().strip().splitlines()
        assert report[0] == "effect,bias,mse,ratio,coverage_uncorrected,coverage_corrected"
        assert [line.split(",")[0] for line in report[1:]] == [
            "beta_0", "beta_1", "beta_2", "beta_3", "u_pred"
        ]
        assert (out1 / "report.csv").read_bytes() == (out2 / "report.csv").read_bytes()
        assert (out1 / "report.txt").read_bytes() == (out2 / "report.txt").read_bytes()

    def test_missing_simulate_section_exit_2(self, tmp_path, capsys):
        cfg = write(tmp_path / "euro.yaml", "family: poisson\n")
        assert run_cli(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2


@pytest.fixture(scope="module")
def artifacts(workspace):
    nugget_cfg = CONFIG_TEMPLATE.replace(
        "covariance:\n  - kind: exponential_geo\n    coords: [xc, yc]\n    nugget: true",
        "covariance:\n  - kind: iid_nugget",
    )
    write(workspace / "config_nugget.yaml", nugget_cfg)
    out_a = workspace / "cmp_a"
    out_b = workspace / "cmp_b"
    assert run_cli(["fit", "--config", str(workspace / "config.yaml"),
                    "--out-dir", str(out_a)]) == 0
    assert run_cli(["fit", "--config", str(workspace / "config_nugget.yaml"),
                    "--out-dir", str(out_b)]) == 0
    return out_a / "fit.json", out_b / "fit.json"


class TestCompareCommand:
    def test_ranking_by_deviance(self, workspace, artifacts, capsys):
        a, b = artifacts
        out = workspace / "cmp_out"
        assert run_cli(["compare", str(a), str(b), "--out-dir", str(out)]) == 0
        rows = (out / "compare.csv").read_text().strip().splitlines()
        assert rows[0] == "rank,model,minus2ll,aic,n_params"
        m2 = [float(r.split(",")[2]) for r in rows[1:]]
        assert m2 == sorted(m2)

    def test_single_artifact(self, workspace, artifacts):
        a, _ = artifacts
        out = workspace / "cmp_single"
        assert run_cli(["compare", str(a), "--out-dir", str(out)]) == 0
        rows = (out / "compare.csv").read_text().strip().splitlines()
        assert len(rows) == 2

    def test_reml_different_design_exit_2(self, workspace, artifacts, tmp_path, capsys):
        other_cfg = CONFIG_TEMPLATE.replace("columns: [x1]", "columns: []")
        write(workspace / "config_nox.yaml", other_cfg)
        out = workspace / "cmp_nox"
        assert run_cli(["fit", "--config", str(workspace / "config_nox.yaml"),
                        "--out-dir", str(out)]) == 0
        a, _ = artifacts
        code = run_cli(["compare", str(a), str(out / "fit.json"),
                        "--out-dir", str(tmp_path)])
        assert code == 2
        assert "REML" in capsys.readouterr().err


class TestExitCodesAndOverrides:
    def test_support_violation_exit_3(self, workspace, tmp_path, capsys):
        data = (workspace / "data.csv").read_text().splitlines()
        data[1] = "-3" + data[1][data[1].index(","):]
        write(tmp_path / "data.csv", "\n".join(data) + "\n")
        write(tmp_path / "cfg.yaml", CONFIG_TEMPLATE)
        code = run_cli(["fit", "--config", str(tmp_path / "cfg.yaml"),
                        "--out-dir", str(tmp_path / "o")])
        assert code == 3
        assert "negative" in capsys.readouterr().err

    def test_mode_flag_overrides_config(self, workspace, tmp_path):
        out = tmp_path / "ml_out"
        assert run_cli(["fit", "--config", str(workspace / "config.yaml"),
                        "--mode", "ml", "--out-dir", str(out)]) == 0
        artifact = json.loads((out / "fit.json").read_text())
        assert artifact["mode"] == "ml"
        # ML counts the fixed effects in the AIC parameter count
        assert artifact["n_free_params"] == 3 + 2
