"""
proj-sglmm

tests for the Laplace approximation and LA-EM
"""

import numpy as np
import pytest

from projsglmm.basis import continuous_basis, moran_basis
from projsglmm.covkernels import MaternParams
from projsglmm.em.Config import EmConfig
from projsglmm.em.Laplace import (
	LaplaceState,
	fit_la_em,
	gaussian_approx,
	laplace_expectation,
	laplace_observed_information,
	laplace_stopping_check,
	likelihood_curvature,
)
from projsglmm.em.Mcmc import fit_mcmc_em
from projsglmm.em.State import ModelState, quadrature_loglik
from projsglmm.families import BernoulliLogit, PoissonLog

from .utils import poisson_lattice, poisson_points, poisson_rank_one

SMALL = EmConfig(max_em_iters=5, k0=100, max_mc_size=400, workers=1)


def test_bernoulli_curvature_at_zero() -> None:
	d1, d2 = likelihood_curvature(np.zeros(3), np.zeros(3), BernoulliLogit())
	assert np.allclose(d1, 0.5)
	assert np.allclose(d2, 0.25)


def test_poisson_curvature() -> None:
	d1, d2 = likelihood_curvature(np.array([0.0, 1.0]), np.zeros(2), PoissonLog())
	assert np.allclose(d1, [1.0, np.e])
	assert np.allclose(d2, d1)


def test_gaussian_approx_without_data() -> None:
	data = poisson_points(20)
	basis = continuous_basis(data.coords, data.X, MaternParams(1.0, 0.2), 3)
	lap = gaussian_approx(None, basis, ModelState(beta=[1.0, 0.5], sigma2=2.0, phi=0.2))
	assert np.array_equal(lap.mode, np.zeros(3))
	assert np.allclose(lap.precision, np.eye(3) / 2.0)
	assert lap.newton_iters == 0


def test_gaussian_approx_mode_is_stationary() -> None:
	data = poisson_points(50)
	basis = continuous_basis(data.coords, data.X, MaternParams(1.0, 0.2), 4)
	state = ModelState(beta=[1.0, 0.5], sigma2=0.5, phi=0.2)
	lap = gaussian_approx(data, basis, state)
	assert lap.converged
	eta = data.base_predictor(state.beta) + basis.M @ lap.mode
	gradient = basis.M.T @ (data.z - np.exp(eta)) - lap.mode / 0.5
	assert np.allclose(gradient, 0.0, atol=1e-5)
	assert np.allclose(lap.precision, basis.M.T @ (basis.M * np.exp(eta)[:, None]) + np.eye(4) / 0.5)
	assert np.allclose(lap.covariance @ lap.precision, np.eye(4), atol=1e-8)


def test_laplace_expectation_of_exponential() -> None:
	lap = LaplaceState(mode=np.zeros(1), precision=np.array([[4.0]]), converged=True, newton_iters=1)
	# h = exp at eta = 0 with predictor variance 1 / 4
	assert laplace_expectation(1.0, 1.0, np.array([1.0]), lap) == pytest.approx(1.0 + 0.125)


def test_fit_la_em_continuous() -> None:
	data = poisson_points(60)
	fit = fit_la_em(data, 4, SMALL)
	assert fit.algorithm == "la-em"
	assert fit.rank == 4
	assert 1 <= fit.iterations <= 5
	assert fit.stopped_by in ("ascent-threshold", "max-iters")
	assert fit.estimate.is_finite()
	assert fit.laplace is not None
	assert fit.observed_info.names == ("intercept", "x1", "sigma2")
	assert fit.config["family"] == "poisson-log"
	assert list(fit.trace_frame().columns[:6]) == ["iter", "k", "dq", "ase", "qhat", "accepted"]


def test_fit_la_em_lattice() -> None:
	data = poisson_lattice(6)
	fit = fit_la_em(data, 4, SMALL)
	assert fit.estimate.domain == "lattice"
	assert fit.estimate.tau > 0
	assert fit.basis.Qdelta is not None


def test_fit_la_em_stop_rule_none_runs_all_iterations() -> None:
	data = poisson_lattice(5)
	basis = moran_basis(data.graph, data.X, 3)
	fit = fit_la_em(data, 3, EmConfig(max_em_iters=3, stop_rule="none", workers=1), start=ModelState(beta=[1.0, 0.5], tau=1.0), basis=basis)
	assert fit.iterations == 3
	assert fit.stopped_by == "max-iters"


def test_laplace_observed_information_shape() -> None:
	data = poisson_points(50)
	basis = continuous_basis(data.coords, data.X, MaternParams(1.0, 0.2), 4)
	state = ModelState(beta=[1.0, 0.5], sigma2=0.5, phi=0.2)
	info = laplace_observed_information(data, basis, state, gaussian_approx(data, basis, state))
	assert info.names == ("intercept", "x1", "sigma2")
	assert info.matrix.shape == (3, 3)
	assert np.allclose(info.matrix, info.matrix.T)
	assert np.all(np.diag(info.score_cov) >= -1e-10)
	assert np.all(np.linalg.eigvalsh(info.complete_info[:2, :2]) > 0)


def test_laplace_expectation_rows_match_single_rows() -> None:
	data = poisson_points(30)
	basis = continuous_basis(data.coords, data.X, MaternParams(1.0, 0.2), 3)
	lap = gaussian_approx(data, basis, ModelState(beta=[1.0, 0.5], sigma2=0.5, phi=0.2))
	eta = np.linspace(-1.0, 1.0, 30)
	rows = laplace_expectation(np.exp(eta), np.exp(eta), basis.M, lap)
	assert rows.shape == (30,)
	for index in (0, 7, 29):
		assert rows[index] == pytest.approx(laplace_expectation(np.exp(eta[index]), np.exp(eta[index]), basis.M[index], lap))


def test_laplace_stopping_check_uses_successive_qhat() -> None:
	assert not laplace_stopping_check(None, -10.0, 0.0, 1e-3, 1e-6)
	assert laplace_stopping_check(-10.0, -10.0005, 1e-7, 1e-3, 1e-6)
	# Q-hat still moving although each step gains little
	assert not laplace_stopping_check(-10.0, -9.9, 1e-7, 1e-3, 1e-6)
	assert not laplace_stopping_check(-10.0, -10.0005, 1e-4, 1e-3, 1e-6)


def test_fit_la_em_stops_on_settled_qhat() -> None:
	data, basis, delta = poisson_rank_one()
	config = EmConfig(max_em_iters=500, phi_candidates=0, workers=1)
	fit = fit_la_em(data, 1, config, start=ModelState(beta=[1.0], sigma2=delta**2, phi=basis.phi), basis=basis)
	assert fit.stopped_by == "ascent-threshold"
	assert fit.iterations >= 2
	assert abs(fit.trace[-1].qhat - fit.trace[-2].qhat) < config.epsilon


def test_fit_la_em_is_deterministic() -> None:
	data = poisson_points(50)
	first = fit_la_em(data, 4, SMALL)
	second = fit_la_em(data, 4, SMALL)
	assert np.array_equal(first.estimate.vector(), second.estimate.vector())
	assert np.array_equal(first.observed_info.matrix, second.observed_info.matrix)
	assert np.array_equal(first.laplace.mode, second.laplace.mode)
	assert [record.qhat for record in first.trace] == [record.qhat for record in second.trace]


def test_em_fixed_points_match_quadrature_grid() -> None:
	data, basis, delta = poisson_rank_one()
	beta_grid = 1.0 + 0.1 * np.arange(-6, 7)
	sigma2_grid = delta**2 * 1.25 ** np.arange(-6, 7)
	surface = np.array(
		[[quadrature_loglik(data, basis, ModelState(beta=[b], sigma2=s2, phi=basis.phi)) for s2 in sigma2_grid] for b in beta_grid]
	)
	row, column = np.unravel_index(int(np.argmax(surface)), surface.shape)
	assert 0 < row < beta_grid.size - 1 and 0 < column < sigma2_grid.size - 1
	best_beta, best_sigma2 = beta_grid[row], sigma2_grid[column]

	start = ModelState(beta=[1.0], sigma2=delta**2, phi=basis.phi)
	laplace = fit_la_em(data, 1, EmConfig(max_em_iters=500, phi_candidates=0, workers=1), start=start, basis=basis)
	mcmc_config = EmConfig(max_em_iters=40, k0=1000, max_mc_size=20_000, mess_factor=2, phi_candidates=0, workers=1, seed=5)
	mcmc = fit_mcmc_em(data, 1, mcmc_config, start=start, basis=basis)

	for fit in (laplace, mcmc):
		assert fit.estimate.phi == basis.phi
		assert abs(fit.estimate.beta[0] - best_beta) <= 0.1 + 1e-9
		assert abs(np.log(fit.estimate.sigma2 / best_sigma2)) <= np.log(1.25) + 1e-9
	assert abs(laplace.estimate.beta[0] - mcmc.estimate.beta[0]) <= 0.1
	assert abs(np.log(laplace.estimate.sigma2 / mcmc.estimate.sigma2)) <= np.log(1.25)
