"""
proj-sglmm

tests for the Metropolis sampler and Monte Carlo error estimates
"""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from projsglmm.basis import continuous_basis
from projsglmm.covkernels import MaternParams
from projsglmm.em.State import ModelState
from projsglmm.exceptions import InsufficientSampleError, ParameterDomainError, SingularCovarianceError
from projsglmm.mcmc import adapt_proposal, batch_means_ase, log_target, multivariate_ess, run_chain, target_function, write_draws

from .utils import poisson_points


def _gaussian_target(precision: np.ndarray):
	def target(delta: np.ndarray) -> float:
		return float(-0.5 * delta @ precision @ delta)

	return target


def test_chain_is_deterministic() -> None:
	target = _gaussian_target(np.eye(2))
	first = run_chain(np.zeros(2), 200, np.eye(2), target, seed=3)
	second = run_chain(np.zeros(2), 200, np.eye(2), target, seed=3)
	assert np.array_equal(first.draws, second.draws)
	assert first.size == 200
	assert first.dimension == 2


def test_chain_targets_gaussian() -> None:
	cov = np.array([[1.0, 0.5], [0.5, 2.0]])
	target = _gaussian_target(np.linalg.inv(cov))
	batch = run_chain(np.zeros(2), 20000, adapt_proposal(cov, 2), target, seed=1)
	assert 0.1 < batch.accept_rate < 0.6
	assert np.allclose(batch.draws.mean(axis=0), 0.0, atol=0.15)
	assert np.allclose(batch.sample_cov(), cov, atol=0.25)


def test_chain_extend() -> None:
	target = _gaussian_target(np.eye(1))
	first = run_chain(np.zeros(1), 100, np.eye(1), target, seed=1)
	second = run_chain(first.last_state, 50, np.eye(1), target, seed=2)
	joined = first.extend(second)
	assert joined.size == 150
	assert np.array_equal(joined.last_state, second.last_state)
	assert joined.accept_rate == pytest.approx((first.accept_rate * 100 + second.accept_rate * 50) / 150)


def test_chain_rejects_bad_shapes() -> None:
	target = _gaussian_target(np.eye(2))
	with pytest.raises(ParameterDomainError):
		run_chain(np.zeros(2), 0, np.eye(2), target, seed=0)
	with pytest.raises(ParameterDomainError):
		run_chain(np.zeros(2), 10, np.eye(3), target, seed=0)


def test_adapt_proposal() -> None:
	proposal = adapt_proposal(np.eye(4), 4)
	expected = 0.95 * 2.38**2 / 4 + 0.05 * 0.01 / 4
	assert np.allclose(proposal, expected * np.eye(4))


def test_log_target_prior_only() -> None:
	data = poisson_points(20)
	basis = continuous_basis(data.coords, data.X, MaternParams(1.0, 0.2), 3)
	state = ModelState(beta=[1.0, 0.5], sigma2=2.0, phi=0.2)
	delta = np.array([1.0, 2.0, 2.0])
	assert log_target(delta, None, basis, state) == pytest.approx(-0.5 * 9.0 / 2.0)
	expected = float(np.sum(data.family.loglik(data.z, data.base_predictor(state.beta) + basis.M @ delta))) - 9.0 / 4.0
	assert target_function(data, basis, state)(delta) == pytest.approx(expected)


def test_batch_means_ase_iid() -> None:
	values = np.random.default_rng(0).normal(size=10000)
	assert batch_means_ase(values) == pytest.approx(0.01, rel=0.35)


def test_batch_means_ase_needs_100_values() -> None:
	with pytest.raises(InsufficientSampleError):
		batch_means_ase(np.zeros(99))


def test_multivariate_ess_iid() -> None:
	draws = np.random.default_rng(1).normal(size=(4000, 2))
	assert 2000 < multivariate_ess(draws) < 8000


def test_multivariate_ess_singular() -> None:
	column = np.random.default_rng(2).normal(size=500)
	with pytest.raises(SingularCovarianceError):
		multivariate_ess(np.column_stack((column, column)))


def test_write_draws(tmp_path: Path) -> None:
	batch = run_chain(np.zeros(2), 20, np.eye(2), _gaussian_target(np.eye(2)), seed=0)
	path = tmp_path / "draws.csv"
	write_draws(batch, path)
	frame = pd.read_csv(path)
	assert list(frame.columns) == ["log_target", "delta1", "delta2"]
	assert len(frame) == 20
