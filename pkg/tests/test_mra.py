# File: tests/test_mra.py

"""Tests for the sparse M-RA prior, posterior, likelihood and prediction."""

import logging
import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from mragp.covariance import Modulator, cov_matrix
from mragp.errors import DataError, GeometryError, PatternError
from mragp.geometry import KnotHierarchy, build_partition_tree
from mragp.mra import (
    Observations,
    assemble_noiseless_posterior,
    assemble_posterior,
    basis_at,
    build_prior,
    loglikelihood,
    loglikelihood_noiseless,
    mra_cov,
    mra_cov_matrix,
    posterior_pattern,
    predict,
)
from mragp.oracle import dense_gp_loglik, dense_mra, dense_mra_krige, sample_gp
from mragp.sparse import SparsePattern
from tests.helpers.components import (
    TAU2,
    block_setup,
    exactness_setup,
    exponential_model,
    grid_points,
    matern_model,
    random_points,
    simulated_observations,
    taper_setup,
    unit_domain,
)
from tests.test_utils import assert_matrix_close

SETUPS = {
    "block-1d": lambda: block_setup(r0=2, J=2, M=2),
    "taper-1d": lambda: taper_setup(r0=2, J=2, M=2, d0=0.4),
    "block-2d": lambda: block_setup(r0=4, J=4, M=2, dim=2),
    "taper-2d": lambda: taper_setup(r0=4, J=4, M=2, dim=2, d0=0.5),
}


def dense_mra_loglik(model, knots, mod, obs):
    joint = dense_mra(model, knots, mod, obs.locations).C_M + np.diag(obs.noise)
    return float(multivariate_normal(mean=np.zeros(obs.n), cov=joint).logpdf(obs.values))


class TestPrior:
    """Basis and prior precision blocks against the dense recursion."""

    @pytest.mark.parametrize("setup", sorted(SETUPS))
    def test_matches_dense_recursion(self, setup):
        """B and Lambda agree with the literal dense evaluation."""
        knots, mod = SETUPS[setup]()
        dim = knots.domain.dim
        model = matern_model()
        pts = random_points(40, dim, seed=2)
        prior = build_prior(model, knots, mod, pts)
        dense = dense_mra(model, knots, mod, pts)
        assert_matrix_close(prior.B, dense.B, 1e-10, "B")
        assert_matrix_close(prior.Lambda, dense.Lambda, 1e-10, "Lambda")

    def test_basis_replay_matches_build(self):
        """Replaying the stored stages at S reproduces B."""
        knots, mod = taper_setup()
        pts = random_points(25)
        prior = build_prior(exponential_model(), knots, mod, pts)
        assert_matrix_close(basis_at(prior, pts), prior.B, 1e-14, "b(S)")

    def test_thread_count_does_not_change_results(self):
        """Parallel stage updates give bit-identical factors."""
        knots, mod = block_setup(r0=4, J=4, M=2, dim=2)
        pts = random_points(50, 2)
        serial = build_prior(matern_model(), knots, mod, pts)
        threaded = build_prior(matern_model(), knots, mod, pts, max_workers=4)
        np.testing.assert_array_equal(serial.B.toarray(), threaded.B.toarray())
        assert serial.logdet_lambda == threaded.logdet_lambda

    @pytest.mark.parametrize("setup", ["taper-1d", "taper-2d"])
    def test_selected_inverse_matches_full(self, setup):
        """Selected inversion on the widened pattern gives the same prior."""
        knots, mod = SETUPS[setup]()
        model = exponential_model(sigma2=1.0, kappa=0.1)
        pts = random_points(30, knots.domain.dim, seed=5)
        full = build_prior(model, knots, mod, pts, inverse_mode="full")
        selected = build_prior(model, knots, mod, pts, inverse_mode="selected")
        assert_matrix_close(selected.B, full.B, 1e-10, "B")
        assert_matrix_close(selected.Lambda, full.Lambda, 1e-10, "Lambda")

    def test_invalid_inverse_modes(self):
        """Selected inversion needs the taper; unknown modes are rejected."""
        knots, mod = block_setup()
        pts = grid_points(5)
        with pytest.raises(PatternError):
            build_prior(exponential_model(), knots, mod, pts, inverse_mode="selected")
        with pytest.raises(PatternError):
            build_prior(exponential_model(), knots, mod, pts, inverse_mode="approximate")

    def test_outside_domain(self):
        """Observation locations must lie in the domain."""
        knots, mod = block_setup()
        with pytest.raises(GeometryError):
            build_prior(exponential_model(), knots, mod, [[0.5], [1.2]])

    def test_summary(self):
        """The summary reports sizes and structural counts."""
        knots, mod = block_setup()
        prior = build_prior(exponential_model(), knots, mod, grid_points(10))
        info = prior.summary()
        assert info["knots"]["sizes"] == [2, 4, 8]
        assert info["n"] == 10
        assert info["nnz_Lambda"] == prior.Lambda.nnz
        assert info["jitter"] == [0.0, 0.0, 0.0]


class TestCovarianceProperties:
    """Structural properties of the approximate covariance C_M."""

    @pytest.mark.parametrize("setup", sorted(SETUPS))
    def test_exact_variance_at_knots(self, setup):
        """C_M(q, q) = C_0(q, q) at every knot."""
        knots, mod = SETUPS[setup]()
        model = matern_model(sigma2=1.3)
        q = knots.stacked()
        prior = build_prior(model, knots, mod, q)
        variances = np.diag(mra_cov_matrix(prior, q, q))
        np.testing.assert_allclose(variances, 1.3, atol=1e-10)

    def test_block_exact_for_exponential(self):
        """Boundary knots make the block approximation exact at all knot pairs."""
        model = exponential_model()
        knots, mod = exactness_setup(M=6)
        q = knots.stacked()
        prior = build_prior(model, knots, mod, q)
        approx = mra_cov_matrix(prior, q, q)
        assert_matrix_close(approx, cov_matrix(model, q), 1e-9 * model.sigma2, "C_M")

        obs = simulated_observations(model, q, TAU2, seed=4)
        post = assemble_posterior(prior, obs)
        assert loglikelihood(prior, post, obs) == pytest.approx(
            dense_gp_loglik(model, obs), rel=1e-9
        )

    def test_repeated_knot_adds_nothing(self, caplog):
        """A knot repeated at a finer level gets a zero basis column and leaves C_M unchanged."""
        domain = unit_domain()
        mod = Modulator.block(build_partition_tree(domain, J=2, M=1))
        model = exponential_model()
        with_dup = KnotHierarchy(
            domain,
            (np.array([[0.5]]), np.array([[0.25], [0.5]])),
            r0=1,
            J=2,
            allow_duplicates=True,
        )
        without = KnotHierarchy(domain, (np.array([[0.5]]), np.array([[0.25]])), r0=1, J=2)
        pts = grid_points(12)
        with caplog.at_level(logging.WARNING):
            prior = build_prior(model, with_dup, mod, pts)
        assert "repeating coarser knots" in caplog.text
        assert np.all(prior.B.toarray()[:, 2] == 0.0)
        assert prior.Lambda_blocks[1].to_dense()[1].tolist() == [0.0, 1.0]
        reference = build_prior(model, without, mod, pts)
        assert_matrix_close(
            mra_cov_matrix(prior, pts, pts), mra_cov_matrix(reference, pts, pts), 1e-12, "C_M"
        )

    def test_block_discontinuous_taper_continuous(self):
        """Across a region boundary the block covariance jumps, the taper's does not."""
        model = matern_model()
        pts = grid_points(8)
        eps = 1e-9
        block = build_prior(model, *block_setup(r0=2, J=2, M=2), pts)
        taper = build_prior(model, *taper_setup(r0=2, J=2, M=2, d0=0.4), pts)
        block_jump = abs(mra_cov(block, [0.45], [0.5 - eps]) - mra_cov(block, [0.45], [0.5]))
        taper_jump = abs(mra_cov(taper, [0.45], [0.5 - eps]) - mra_cov(taper, [0.45], [0.5]))
        assert block_jump > 1e-2
        assert taper_jump < 1e-6

    def test_symmetric(self):
        """C_M(s1, s2) = C_M(s2, s1)."""
        knots, mod = taper_setup()
        prior = build_prior(matern_model(), knots, mod, grid_points(6))
        assert mra_cov(prior, [0.1], [0.35]) == pytest.approx(
            mra_cov(prior, [0.35], [0.1]), rel=1e-12
        )


class TestPosterior:
    """Posterior assembly and the likelihood."""

    @pytest.mark.parametrize("setup", sorted(SETUPS))
    def test_loglik_matches_dense(self, setup):
        """The sparse log-likelihood equals the dense Gaussian density under C_M."""
        knots, mod = SETUPS[setup]()
        model = exponential_model(sigma2=1.0, kappa=0.1)
        pts = random_points(60, knots.domain.dim, seed=8)
        obs = simulated_observations(model, pts, TAU2, seed=9)
        prior = build_prior(model, knots, mod, pts)
        post = assemble_posterior(prior, obs)
        expected = dense_mra_loglik(model, knots, mod, obs)
        assert loglikelihood(prior, post, obs) == pytest.approx(expected, rel=1e-10)

    @pytest.mark.parametrize("setup", sorted(SETUPS))
    def test_posterior_matches_dense_forms(self, setup):
        """Lambda_tilde = Lambda + B' V^-1 B and Lambda_tilde nu_tilde = B' V^-1 z."""
        knots, mod = SETUPS[setup]()
        model = exponential_model(sigma2=1.0, kappa=0.1)
        pts = random_points(60, knots.domain.dim, seed=10)
        obs = simulated_observations(model, pts, TAU2, seed=11)
        post = assemble_posterior(build_prior(model, knots, mod, pts), obs)

        dense = dense_mra(model, knots, mod, pts)
        lam_tilde = dense.Lambda + dense.B.T @ np.diag(1.0 / obs.noise) @ dense.B
        scale = max(1.0, float(np.max(np.abs(lam_tilde))))
        assert_matrix_close(post.Lambda_tilde, lam_tilde, 1e-8 * scale, "Lambda_tilde")

        nu = np.linalg.solve(lam_tilde, dense.B.T @ (obs.values / obs.noise))
        np.testing.assert_allclose(post.nu_tilde, nu, rtol=1e-8, atol=1e-8 * np.max(np.abs(nu)))

    def test_zero_data_gives_zero_weights(self):
        """z = 0 gives nu_tilde = 0 exactly."""
        knots, mod = taper_setup()
        pts = random_points(25, seed=12)
        prior = build_prior(exponential_model(), knots, mod, pts)
        post = assemble_posterior(prior, Observations(pts, np.zeros(25), TAU2))
        assert np.all(post.nu_tilde == 0.0)

    def test_huge_noise_shrinks_weights(self):
        """With noise variances of 1e12 the prior dominates and nu_tilde vanishes."""
        knots, mod = block_setup(r0=2, J=2, M=3)
        model = exponential_model()
        pts = random_points(40, seed=13)
        values = sample_gp(model, pts, TAU2, seed=14)
        prior = build_prior(model, knots, mod, pts)
        post = assemble_posterior(prior, Observations(pts, values, np.full(40, 1e12)))
        assert np.max(np.abs(post.nu_tilde)) < 1e-6

    def test_single_observation(self):
        """With n = 1 the likelihood is a univariate normal density."""
        knots, mod = block_setup()
        model = exponential_model()
        prior = build_prior(model, knots, mod, [[0.3]])
        obs = Observations([[0.3]], [0.7], [TAU2])
        var = mra_cov(prior, [0.3], [0.3]) + TAU2
        expected = -0.5 * (math.log(2.0 * math.pi * var) + 0.49 / var)
        post = assemble_posterior(prior, obs)
        assert loglikelihood(prior, post, obs) == pytest.approx(expected, rel=1e-12)

    def test_posterior_pattern_covers_gram(self):
        """The structural pattern holds Lambda plus the pattern of B'B."""
        knots, mod = taper_setup()
        prior = build_prior(exponential_model(), knots, mod, random_points(30))
        B = abs(prior.B)
        pattern = posterior_pattern(prior)
        assert pattern.contains(SparsePattern.from_scipy(B.T @ B))
        assert pattern.contains(prior.Lambda.pattern)

    def test_requires_positive_noise(self):
        """Zero noise variances belong on the noiseless path."""
        knots, mod = block_setup()
        pts = grid_points(5)
        prior = build_prior(exponential_model(), knots, mod, pts)
        with pytest.raises(DataError):
            assemble_posterior(prior, Observations(pts, np.ones(5), np.zeros(5)))

    def test_locations_must_match_prior(self):
        """The posterior is only defined at the locations the prior was built on."""
        knots, mod = block_setup()
        prior = build_prior(exponential_model(), knots, mod, grid_points(5))
        with pytest.raises(DataError):
            assemble_posterior(prior, Observations(grid_points(6), np.ones(6), TAU2))

    def test_observations_validation(self):
        """Empty, misaligned or non-finite observations raise DataError."""
        with pytest.raises(DataError):
            Observations(np.zeros((0, 1)), [], [])
        with pytest.raises(DataError):
            Observations([[0.1], [0.2]], [1.0], [0.1])
        with pytest.raises(DataError):
            Observations([[0.1]], [np.nan], [0.1])
        with pytest.raises(DataError):
            Observations([[0.1]], [1.0], [-0.1])


class TestNoiseless:
    """Noise-free data observed at the knots."""

    def test_interpolates_and_matches_exact_loglik(self):
        """The mean interpolates the data with zero sd; the likelihood is the exact one."""
        model = exponential_model()
        knots, mod = exactness_setup(M=4)
        q = knots.stacked()
        y = sample_gp(model, q, 0.0, seed=11)
        prior = build_prior(model, knots, mod, q)
        post = assemble_noiseless_posterior(prior, y)
        result = predict(prior, post, q)
        np.testing.assert_allclose(result.mean, y, atol=1e-10)
        assert np.all(result.sd == 0.0)
        expected = dense_gp_loglik(model, Observations(q, y, 0.0))
        assert loglikelihood_noiseless(prior, y) == pytest.approx(expected, rel=1e-9)
        obs = Observations(q, y, 0.0)
        assert loglikelihood(prior, post, obs) == pytest.approx(expected, rel=1e-9)

    def test_requires_locations_at_knots(self):
        """The noiseless path needs S to coincide with the knots."""
        knots, mod = block_setup()
        prior = build_prior(exponential_model(), knots, mod, grid_points(5))
        with pytest.raises(DataError):
            loglikelihood_noiseless(prior, np.ones(5))


class TestPredict:
    """Kriging means, standard deviations and linear combinations."""

    @pytest.mark.parametrize("setup", ["block-1d", "taper-1d", "taper-2d"])
    def test_matches_dense_kriging(self, setup):
        """Means and sds agree with dense conditioning under C_M."""
        knots, mod = SETUPS[setup]()
        dim = knots.domain.dim
        model = matern_model()
        pts = random_points(40, dim, seed=12)
        obs = simulated_observations(model, pts, TAU2, seed=13)
        prior = build_prior(model, knots, mod, pts)
        post = assemble_posterior(prior, obs)
        targets = random_points(15, dim, seed=14)
        result = predict(prior, post, targets)
        mean, cov = dense_mra_krige(model, knots, mod, obs, targets)
        np.testing.assert_allclose(result.mean, mean, atol=1e-8)
        np.testing.assert_allclose(result.sd, np.sqrt(np.diag(cov)), atol=1e-8)

    def test_linear_combinations(self):
        """The joint covariance of combinations matches the dense computation."""
        knots, mod = block_setup()
        model = exponential_model()
        pts = random_points(30)
        obs = simulated_observations(model, pts, TAU2)
        prior = build_prior(model, knots, mod, pts)
        post = assemble_posterior(prior, obs)
        targets = grid_points(6)
        combos = np.array([[1.0, 1.0, 0, 0, 0, 0], [0, 0, 0, 0.5, 0.5, 0]])
        result = predict(prior, post, targets, combos=combos)
        _, cov = dense_mra_krige(model, knots, mod, obs, targets)
        assert_matrix_close(result.combo_cov, combos @ cov @ combos.T, 1e-8, "combo cov")

    def test_combination_limits(self):
        """Combinations must match the targets and stay within 10 r rows."""
        knots, mod = block_setup()
        pts = grid_points(10)
        model = exponential_model()
        prior = build_prior(model, knots, mod, pts)
        post = assemble_posterior(prior, simulated_observations(model, pts))
        with pytest.raises(DataError):
            predict(prior, post, grid_points(3), combos=np.ones((1, 4)))
        with pytest.raises(DataError):
            predict(prior, post, grid_points(3), combos=np.ones((10 * knots.total + 1, 3)))

    def test_outside_domain(self):
        """Prediction locations outside the domain raise GeometryError."""
        knots, mod = block_setup()
        pts = grid_points(10)
        model = exponential_model()
        prior = build_prior(model, knots, mod, pts)
        post = assemble_posterior(prior, simulated_observations(model, pts))
        with pytest.raises(GeometryError, match="Prediction location"):
            predict(prior, post, [[1.5]])
