import numpy as np
import numpy.testing as npt
import pytest

from glmmlap import ExperimentConfig, SpecificationError, run_experiment, sim_mvn


class TestSimMvn:
    def test_standard_normal_moments(self, rng):
        draws = np.array([sim_mvn(np.zeros(2), np.eye(2), rng) for _ in range(20_000)])
        se = 1.0 / np.sqrt(draws.shape[0])
        npt.assert_allclose(draws.mean(axis=0), 0.0, atol=3 * se)
        cov = np.cov(draws.T)
        npt.assert_allclose(cov, np.eye(2), atol=4 * np.sqrt(2.0 / draws.shape[0]))

    def test_scaled_mean_and_sd(self, rng):
        draws = np.array([sim_mvn([7.0], [[4.0]], rng)[0] for _ in range(20_000)])
        assert abs(draws.mean() - 7.0) < 3 * 2.0 / np.sqrt(draws.size)
        assert abs(draws.std() - 2.0) < 0.05

    def test_zero_variance_limit_returns_mean(self, rng):
        mean = np.array([1.0, -2.0, 3.0])
        draw = sim_mvn(mean, 1e-12 * np.eye(3), rng)
        npt.assert_allclose(draw, mean, atol=1e-5)

    def test_correlated_draw_uses_cholesky(self, rng):
        sigma = np.array([[1.0, 0.9], [0.9, 1.0]])
        draws = np.array([sim_mvn(np.zeros(2), sigma, rng) for _ in range(20_000)])
        corr = np.corrcoef(draws.T)[0, 1]
        assert abs(corr - 0.9) < 0.02


class TestExperimentConfig:
    def test_rejects_zero_replicates(self):
        with pytest.raises(SpecificationError):
            ExperimentConfig(n_replicates=0)

    def test_rejects_non_square_prediction_grid(self):
        with pytest.raises(SpecificationError, match="square"):
            ExperimentConfig(n_pred=24)


@pytest.fixture(scope="module")
def tiny_report():
    cfg = ExperimentConfig(
        family="poisson", n_obs=40, n_pred=4, n_replicates=2, seed=7
    )
    return cfg, run_experiment(cfg)


class TestRunExperiment:
    def test_single_replicate_coverage_is_binary(self):
        cfg = ExperimentConfig(family="poisson", n_obs=40, n_pred=4, n_replicates=1, seed=3)
        report = run_experiment(cfg)
        assert set(np.round(report.coverage_corrected[:4], 10)) <= {0.0, 1.0}
        assert set(np.round(report.coverage_uncorrected[:4], 10)) <= {0.0, 1.0}

    def test_report_rows_and_ranges(self, tiny_report):
        _, report = tiny_report
        assert report.effects == ["beta_0", "beta_1", "beta_2", "beta_3", "u_pred"]
        assert np.all(report.coverage_corrected >= 0) and np.all(report.coverage_corrected <= 1)
        assert np.all(report.mse >= report.bias**2 - 1e-12)
        assert report.n_failed == 0

    def test_reproducibility(self, tiny_report):
        cfg, report = tiny_report
        again = run_experiment(cfg)
        npt.assert_array_equal(report.bias, again.bias)
        npt.assert_array_equal(report.mse, again.mse)
        npt.assert_array_equal(report.coverage_corrected, again.coverage_corrected)

    def test_parallel_equals_serial(self):
        cfg_serial = ExperimentConfig(family="poisson", n_obs=40, n_pred=4,
                                      n_replicates=4, seed=11, n_jobs=1)
        cfg_par = ExperimentConfig(family="poisson", n_obs=40, n_pred=4,
                                   n_replicates=4, seed=11, n_jobs=2)
        r1, r2 = run_experiment(cfg_serial), run_experiment(cfg_par)
        npt.assert_array_equal(r1.bias, r2.bias)
        npt.assert_array_equal(r1.coverage_corrected, r2.coverage_corrected)
