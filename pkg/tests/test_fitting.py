import numpy as np
import numpy.testing as npt
import pytest

from glmmlap import (
    CovarianceSpec,
    ExponentialGeo,
    FitOptions,
    Nugget,
    SpecificationError,
    build_param_space,
    build_sigma,
    compare,
    evaluate_at,
    fit_model,
    get_family,
    gls_beta,
    initial_params,
    sim_mvn,
)


def unit_square_grid(g):
    ticks = np.linspace(0.0, 1.0, g)
    xx, yy = np.meshgrid(ticks, ticks)
    return np.column_stack([xx.ravel(), yy.ravel()])


class TestParamSpace:
    def test_transform_round_trip(self, rng):
        coords = rng.uniform(size=(10, 2))
        spec = CovarianceSpec(components=[ExponentialGeo(coords, nugget=True), Nugget(10)])
        fam = get_family("gamma", phi=2.0)
        y = rng.uniform(0.5, 3.0, 10)
        space = build_param_space(y, fam, spec)
        assert space.has_phi and space.theta_len == 4
        values = np.array([0.2, 0.7, 1e-9, 0.4, 3.3])
        npt.assert_allclose(space.untransform(space.transform(values)), values, rtol=1e-12)

    def test_tiny_variances_reachable(self, rng):
        spec = CovarianceSpec(components=[Nugget(5)])
        fam = get_family("poisson")
        space = build_param_space(np.array([1.0, 2, 3, 4, 5.0]), fam, spec)
        x = space.transform([1.39e-11])
        npt.assert_allclose(space.untransform(x), [1.39e-11], rtol=1e-12)

    def test_bound_flags(self, rng):
        spec = CovarianceSpec(components=[Nugget(5)])
        fam = get_family("poisson")
        y = np.array([1.0, 2, 3, 4, 5.0])
        space = build_param_space(y, fam, spec)
        upper = space.entries[0].upper
        at_bound = space.transform([upper * (1 - 1e-9)])
        assert space.bound_flags(at_bound) == [space.entries[0].name]
        assert space.bound_flags(space.transform([upper / 2])) == []


class TestInitialParams:
    def test_equal_apportionment_two_components(self):
        fam = get_family("poisson")
        y = np.array([1.0, 3.0, 8.0, 20.0, 2.0, 7.0])
        spec = CovarianceSpec(
            components=[ExponentialGeo(np.random.default_rng(0).uniform(size=(6, 2))), Nugget(6)]
        )
        values = initial_params(y, fam, spec)
        g = np.log(y)
        npt.assert_allclose(values[0], np.var(g) / 2)
        npt.assert_allclose(values[2], np.var(g) / 2)

    def test_range_starts_at_quarter_max_distance(self):
        coords = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        spec = CovarianceSpec(components=[ExponentialGeo(coords)])
        values = initial_params(np.array([1.0, 2.0, 3.0]), get_family("poisson"), spec)
        npt.assert_allclose(values[1], np.sqrt(2.0) / 4.0)

    def test_nugget_only_gets_full_variance(self):
        y = np.array([1.0, 2.0, 5.0, 9.0])
        spec = CovarianceSpec(components=[Nugget(4)])
        values = initial_params(y, get_family("poisson"), spec)
        npt.assert_allclose(values[0], np.var(np.log(y)))

    def test_correlation_and_dispersion_defaults(self, rng):
        from glmmlap import AR1

        spec = CovarianceSpec(components=[AR1(times=np.arange(6))])
        fam = get_family("negative_binomial", phi=3.5)
        values = initial_params(rng.integers(0, 9, 6).astype(float), fam, spec)
        assert values[1] == 0.5
        assert values[-1] == 3.5


@pytest.fixture(scope="module")
def grid_poisson_fit():
    """The single-simulation analogue: 20 x 20 unit-square grid, Poisson
    responses over an exponential-plus-nugget latent field, REML."""
    coords = unit_square_grid(20)
    spec = CovarianceSpec(components=[ExponentialGeo(coords, nugget=True)])
    sigma = build_sigma(spec, [1.0, 1.0, 0.0001])
    rng = np.random.default_rng(20240403)
    X = np.ones((400, 1))
    w = sim_mvn(X @ np.array([2.0]), sigma, rng)
    fam = get_family("poisson")
    y = fam.sample(w, rng)
    fit = fit_model(y, fam, X, spec, FitOptions(mode="reml"))
    return fit


@pytest.mark.slow
class TestGridPoissonFit:
    def test_regression_values(self, grid_poisson_fit):
        # frozen from the first run of this fixture; guards refactors
        fit = grid_poisson_fit
        npt.assert_allclose(fit.theta[0], 3.4632779, rtol=1e-4)
        npt.assert_allclose(fit.theta[1], 3.6582896, rtol=1e-4)
        npt.assert_allclose(fit.loglik, -1184.2692258, rtol=1e-8)
        npt.assert_allclose(fit.beta[0], 1.1925606, rtol=1e-4)

    def test_ridge_property(self, grid_poisson_fit):
        # partial sill and range ride a flat ridge; their ratio stays near
        # the generating ratio even when both run large
        fit = grid_poisson_fit
        ratio = fit.theta[0] / fit.theta[1]
        assert 0.5 < ratio < 2.0

    def test_stationarity_and_newton_budget(self, grid_poisson_fit):
        fit = grid_poisson_fit
        assert fit.max_grad < 1e-8
        assert fit.max_newton_iterations <= 50

    def test_evaluation_budget(self, grid_poisson_fit):
        assert grid_poisson_fit.n_evals < 10_000

    def test_monotone_best_so_far(self, grid_poisson_fit):
        trace = np.array(grid_poisson_fit.best_trace)
        assert np.all(np.diff(trace) >= 0)


class TestFitModel:
    def test_gamma_high_dispersion_matches_gls(self, rng):
        # with huge phi the data model pins w ~ log y, so the fit reduces to
        # generalized least squares on the link scale
        n = 60
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        fam = get_family("gamma", phi=1e6)
        w = X @ np.array([1.0, 0.6]) + 0.4 * rng.standard_normal(n)
        y = fam.sample(w, rng)
        spec = CovarianceSpec(components=[Nugget(n)])
        fit = fit_model(y, fam, X, spec, FitOptions(mode="reml", estimate_phi=False))
        gls = gls_beta(np.eye(n), X, np.log(y))
        npt.assert_allclose(fit.beta, gls, atol=1e-3)

    def test_determinism(self, rng):
        n = 40
        coords = rng.uniform(size=(n, 2))
        spec = CovarianceSpec(components=[ExponentialGeo(coords, nugget=True)])
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        fam = get_family("poisson")
        y = fam.sample(0.5 * rng.standard_normal(n) + 0.5, rng)
        fit1 = fit_model(y, fam, X, spec, FitOptions())
        fit2 = fit_model(y, fam, X, spec, FitOptions())
        npt.assert_array_equal(fit1.theta, fit2.theta)
        npt.assert_array_equal(fit1.beta, fit2.beta)
        assert fit1.loglik == fit2.loglik
        assert fit1.n_evals == fit2.n_evals

    def test_rank_deficient_design_rejected(self, rng):
        n = 20
        X = np.column_stack([np.ones(n), np.ones(n)])
        spec = CovarianceSpec(components=[Nugget(n)])
        with pytest.raises(SpecificationError, match="rank"):
            fit_model(np.ones(n), get_family("poisson"), X, spec, FitOptions())

    def test_evaluate_at_matches_laplace_value(self, rng):
        from glmmlap import laplace_loglik

        n = 30
        coords = rng.uniform(size=(n, 2))
        spec = CovarianceSpec(components=[ExponentialGeo(coords, nugget=True)])
        X = np.ones((n, 1))
        fam = get_family("poisson")
        y = fam.sample(np.zeros(n), rng)
        theta = [0.8, 0.3, 0.05]
        fit = evaluate_at(y, fam, X, spec, theta, mode="reml")
        value, _ = laplace_loglik(y, fam, X, spec, theta, mode="reml")
        assert fit.loglik == pytest.approx(value.loglik, rel=1e-10)
        assert fit.max_grad < 1e-8


def _stub_fits(rng, n=12):
    spec = CovarianceSpec(components=[Nugget(n)])
    X = np.ones((n, 1))
    fam = get_family("poisson")
    y = fam.sample(np.zeros(n), np.random.default_rng(5))
    fit_a = evaluate_at(y, fam, X, spec, [0.5], mode="reml")
    fit_b = evaluate_at(y, fam, X, spec, [0.6], mode="reml")
    return fit_a, fit_b


class TestCompare:
    def test_reported_deviance_ranking(self, rng):
        # the comparison rule: smaller -2LL ranks first
        fit_car, fit_sar = _stub_fits(rng)
        fit_car.minus2ll = 298.14
        fit_sar.minus2ll = 279.15
        table = compare([fit_car, fit_sar], labels=["car", "sar"])
        assert [r.label for r in table.rows] == ["sar", "car"]
        assert table.rows[0].rank == 1

    def test_tie_is_stable_by_position(self, rng):
        fit_a, fit_b = _stub_fits(rng)
        fit_b.minus2ll = fit_a.minus2ll
        table = compare([fit_a, fit_b], labels=["first", "second"])
        assert [r.label for r in table.rows] == ["first", "second"]

    def test_reml_with_different_designs_refused(self, rng):
        fit_a, fit_b = _stub_fits(rng)
        fit_b.X = np.column_stack([fit_b.X, np.arange(len(fit_b.y))])
        with pytest.raises(SpecificationError, match="REML"):
            compare([fit_a, fit_b])

    def test_different_data_refused(self, rng):
        fit_a, fit_b = _stub_fits(rng)
        fit_b.y = fit_b.y + 1.0
        with pytest.raises(SpecificationError, match="data"):
            compare([fit_a, fit_b])

    def test_aic_counts_fixed_effects_for_ml_only(self, rng):
        n = 12
        spec = CovarianceSpec(components=[Nugget(n)])
        X = np.ones((n, 1))
        fam = get_family("poisson")
        y = fam.sample(np.zeros(n), np.random.default_rng(5))
        reml = evaluate_at(y, fam, X, spec, [0.5], mode="reml")
        ml = evaluate_at(y, fam, X, spec, [0.5], mode="ml")
        assert reml.n_free_params == 1
        assert ml.n_free_params == 2
        assert ml.aic == pytest.approx(ml.minus2ll + 4.0)
