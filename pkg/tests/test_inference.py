# File: tests/test_inference.py

"""Tests for maximum-likelihood fitting and the forecast scores."""

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from mragp.errors import DataError, MRAError
from mragp.inference import (
    FitOptions,
    MethodScore,
    ParameterVector,
    close_thresholds,
    compare_log_scores,
    crps_gaussian,
    fit_ml,
    is_close,
    log_score,
    log_score_gap,
    model_loglik,
    rmspe,
    score_predictions,
)
from mragp.mra import Observations, assemble_posterior, build_prior, loglikelihood
from tests.helpers.components import (
    KAPPA,
    SIGMA2,
    TAU2,
    block_setup,
    exponential_model,
    grid_points,
    random_points,
    simulated_observations,
)

TARGET = {"sigma2": 2.0, "kappa": 0.05, "tau2": 0.2}


def quadratic_objective(params: ParameterVector) -> float:
    """Concave in log-parameters with its maximum at TARGET."""
    return -sum(math.log(getattr(params, k) / v) ** 2 for k, v in TARGET.items())


class TestParameterVector:
    """Parameter bookkeeping for the optimizer."""

    def test_free_names(self):
        """tau2 = 0 is held fixed and nu is only free on request."""
        assert ParameterVector().free_names == ["sigma2", "kappa", "tau2"]
        assert ParameterVector(tau2=0.0).free_names == ["sigma2", "kappa"]
        params = ParameterVector(family="matern", nu=1.5, free_nu=True)
        assert params.free_names == ["sigma2", "kappa", "tau2", "nu"]

    def test_log_round_trip(self):
        """from_log(to_log()) returns the same parameters."""
        params = ParameterVector(sigma2=1.7, kappa=0.2, tau2=0.01)
        restored = params.from_log(params.to_log())
        assert restored.sigma2 == pytest.approx(1.7)
        assert restored.kappa == pytest.approx(0.2)
        assert restored.tau2 == pytest.approx(0.01)

    def test_from_log_is_clipped(self):
        """Huge log values are clipped to the parameter box."""
        params = ParameterVector().from_log([1000.0, 0.0, 0.0])
        assert params.sigma2 == 1e8

    def test_invalid(self):
        """Non-positive parameters and a free nu without Matern are rejected."""
        with pytest.raises(DataError):
            ParameterVector(kappa=0.0)
        with pytest.raises(DataError):
            ParameterVector(tau2=-1.0)
        with pytest.raises(DataError):
            ParameterVector(free_nu=True)


class TestFit:
    """Nelder-Mead maximum likelihood."""

    def test_recovers_maximum_of_mocked_objective(self):
        """With a known objective the optimizer finds its maximum."""
        knots, mod = block_setup()
        obs = simulated_observations(exponential_model(), grid_points(8))
        init = ParameterVector(sigma2=1.0, kappa=0.1, tau2=0.1)
        opts = FitOptions(max_evals=2000, rel_tol=1e-10)
        result = fit_ml(obs, knots, mod, init, opts, objective=quadratic_objective)
        for name, value in TARGET.items():
            assert getattr(result.params, name) == pytest.approx(value, rel=1e-3)
        assert result.converged
        assert result.trace[0].sigma2 == 1.0
        best = [row.best_loglik for row in result.trace]
        assert best == sorted(best)
        assert result.loglik == best[-1]

    def test_single_evaluation_budget(self):
        """max_evals = 1 evaluates the start only."""
        knots, mod = block_setup()
        obs = simulated_observations(exponential_model(), grid_points(8))
        init = ParameterVector()
        result = fit_ml(obs, knots, mod, init, FitOptions(max_evals=1), quadratic_objective)
        assert result.n_evals == 1
        assert result.params == init
        assert result.message == "no iterations"

    def test_failed_evaluations_are_skipped(self):
        """Evaluations that raise count as -inf and the fit carries on."""
        knots, mod = block_setup()
        obs = simulated_observations(exponential_model(), grid_points(8))

        def fragile(params):
            if params.kappa < 0.07:
                raise MRAError("simulated failure")
            return quadratic_objective(params)

        init = ParameterVector(sigma2=1.0, kappa=0.1, tau2=0.1)
        result = fit_ml(obs, knots, mod, init, FitOptions(max_evals=300), fragile)
        assert any(row.loglik == -math.inf for row in result.trace)
        assert result.loglik > quadratic_objective(init)

    def test_non_finite_start(self):
        """A non-finite log-likelihood at the start is an error."""
        knots, mod = block_setup()
        obs = simulated_observations(exponential_model(), grid_points(8))
        with pytest.raises(MRAError):
            fit_ml(obs, knots, mod, ParameterVector(), objective=lambda p: float("nan"))

    def test_model_loglik_replaces_noise(self):
        """model_loglik uses tau2 from the parameters, not the observation noise."""
        knots, mod = block_setup()
        pts = random_points(20)
        obs = simulated_observations(exponential_model(), pts, tau2=0.5)
        params = ParameterVector(sigma2=SIGMA2, kappa=KAPPA, tau2=TAU2)
        value, prior = model_loglik(obs, knots, mod, params)
        relabelled = Observations(pts, obs.values, TAU2)
        direct = build_prior(exponential_model(), knots, mod, pts)
        post = assemble_posterior(direct, relabelled)
        assert value == pytest.approx(loglikelihood(direct, post, relabelled), rel=1e-12)
        assert prior.n == 20

    @pytest.mark.slow
    def test_real_fit_improves_likelihood(self):
        """Starting from doubled parameters the fit climbs back to the truth's likelihood."""
        knots, mod = block_setup(r0=4, J=2, M=4)
        model = exponential_model()
        obs = simulated_observations(model, random_points(400, seed=21), TAU2, seed=22)
        truth = ParameterVector(sigma2=SIGMA2, kappa=KAPPA, tau2=TAU2)
        truth_value, _ = model_loglik(obs, knots, mod, truth)
        result = fit_ml(obs, knots, mod, truth.scaled(2.0), FitOptions(max_evals=300))
        assert result.loglik >= truth_value - 1e-3
        ratio = (result.params.sigma2 / result.params.kappa) / (SIGMA2 / KAPPA)
        assert 0.5 < ratio < 2.0

    @pytest.mark.slow
    def test_fit_independent_of_start(self):
        """Starts at 1.5 times and 1/1.5 times the truth end within 0.1 log-likelihood units."""
        knots, mod = block_setup(r0=4, J=2, M=5)
        model = exponential_model()
        obs = simulated_observations(model, random_points(512, seed=23), TAU2, seed=24)
        truth = ParameterVector(sigma2=SIGMA2, kappa=KAPPA, tau2=TAU2)
        opts = FitOptions(max_evals=600)
        above = fit_ml(obs, knots, mod, truth.scaled(1.5), opts)
        below = fit_ml(obs, knots, mod, truth.scaled(1.0 / 1.5), opts)
        assert abs(above.loglik - below.loglik) <= 0.1


class TestScores:
    """Log-score, RMSPE and CRPS."""

    def test_crps_matches_integral(self):
        """The closed form equals the integral of (F(x) - 1{x >= y})^2."""
        mu, sd, y = 0.3, 1.2, 1.0
        below, _ = quad(lambda x: norm.cdf(x, mu, sd) ** 2, -np.inf, y)
        above, _ = quad(lambda x: (1.0 - norm.cdf(x, mu, sd)) ** 2, y, np.inf)
        assert crps_gaussian(mu, sd, y) == pytest.approx(below + above, rel=1e-7)

    def test_crps_degenerate(self):
        """A zero sd gives the absolute error."""
        assert crps_gaussian(1.0, 0.0, 3.5) == 2.5
        np.testing.assert_allclose(crps_gaussian([0.0, 1.0], [0.0, 0.0], [1.0, 1.0]), [1.0, 0.0])

    def test_crps_rejects_negative_sd(self):
        """Negative sds are invalid."""
        with pytest.raises(DataError):
            crps_gaussian(0.0, -1.0, 0.0)

    def test_rmspe(self):
        """Root mean squared error of the predictions."""
        assert rmspe([1.0, 2.0], [1.0, 4.0]) == pytest.approx(math.sqrt(2.0))
        with pytest.raises(DataError):
            rmspe([1.0], [1.0, 2.0])
        with pytest.raises(DataError):
            rmspe([], [])

    def test_score_predictions(self):
        """The report combines RMSPE, mean CRPS and the log-score."""
        report = score_predictions([0.0, 0.0], [1.0, 1.0], [0.0, 0.0], log_score_value=-3.0)
        assert report.rmspe == 0.0
        assert report.crps_mean == pytest.approx(2.0 * norm.pdf(0.0) - 1.0 / math.sqrt(math.pi))
        assert report.to_dict()["log_score"] == -3.0
        assert report.n == 2

    def test_log_score_and_gap(self):
        """Per-n values and the closeness rule."""
        assert log_score(-50.0, 100) == (-50.0, -0.5)
        assert log_score_gap(-52.0, -50.0, 100) == (-2.0, -0.02)
        assert is_close(-50.2, -50.0, 100, 0.003)
        assert not is_close(-50.4, -50.0, 100, 0.003)
        assert close_thresholds(1) == (0.003, 0.005, 0.007)
        assert close_thresholds(2) == (0.008, 0.01, 0.012)
        with pytest.raises(DataError):
            log_score(1.0, 0)

    def test_compare_log_scores(self):
        """Gaps are taken against the reference or the best method."""
        params = ParameterVector()
        a = MethodScore("block", params, -100.0, 50)
        b = MethodScore("taper", params, -101.0, 50)
        rows = compare_log_scores([a, b])
        assert [r["gap"] for r in rows] == [0.0, -1.0]
        exact = MethodScore("exact", params, -99.0, 50)
        rows = compare_log_scores([a, b], reference=exact)
        assert rows[0]["gap_per_n"] == pytest.approx(-0.02)

    def test_compare_refuses_mixed_parameters(self):
        """Scores at different parameter values cannot be compared."""
        a = MethodScore("block", ParameterVector(), -100.0, 50)
        b = MethodScore("taper", ParameterVector(kappa=0.1), -101.0, 50)
        with pytest.raises(DataError):
            compare_log_scores([a, b])
        assert compare_log_scores([]) == []
