"""
proj-sglmm

tests for the parametric bootstrap
"""

import numpy as np
import pytest

from projsglmm.em.Bootstrap import BootstrapResult, bootstrap_se, bootstrap_summary, field_factor, simulate_replicate
from projsglmm.em.Config import EmConfig
from projsglmm.em.Laplace import fit_la_em
from projsglmm.exceptions import ParameterDomainError

from .utils import poisson_lattice, poisson_points

FAST = EmConfig(max_em_iters=2, workers=1)


def test_bootstrap_result_summary() -> None:
	estimates = np.array([[1.0, 0.5], [2.0, 0.7], [3.0, 0.6]])
	result = BootstrapResult(names=("a", "b"), estimates=estimates, failures=0, replicates=3)
	assert result.standard_errors == pytest.approx([1.0, 0.1])
	summary = bootstrap_summary(result, level=0.5)
	assert summary["a"]["lower"] == pytest.approx(1.5)
	assert summary["a"]["upper"] == pytest.approx(2.5)
	assert list(result.to_frame().columns) == ["a", "b"]


def test_field_factor() -> None:
	data = poisson_points(20)
	fit = fit_la_em(data, 3, FAST)
	factor = field_factor(data, fit.estimate, 1.5)
	assert np.allclose(np.diag(factor @ factor.T), fit.estimate.sigma2)


def test_simulate_replicate_keeps_design() -> None:
	data = poisson_lattice(5)
	fit = fit_la_em(data, 3, FAST)
	replicate = simulate_replicate(data, fit.estimate, fit.basis, None, np.random.default_rng(0))
	assert replicate.n == data.n
	assert np.array_equal(replicate.X, data.X)
	assert replicate.graph is data.graph
	with pytest.raises(ParameterDomainError):
		simulate_replicate(poisson_points(10), fit.estimate, fit.basis, None, np.random.default_rng(0))


def test_bootstrap_se_serial() -> None:
	data = poisson_lattice(5)
	fit = fit_la_em(data, 3, FAST)
	result = bootstrap_se(fit, data, 3, seed=1, workers=1)
	assert result.names == ("intercept", "x1", "tau")
	assert result.estimates.shape[1] == 3
	assert result.failures + result.estimates.shape[0] == 3
	again = bootstrap_se(fit, data, 3, seed=1, workers=1)
	assert np.array_equal(result.estimates, again.estimates)


def test_bootstrap_needs_two_replicates() -> None:
	data = poisson_lattice(5)
	fit = fit_la_em(data, 3, FAST)
	with pytest.raises(ParameterDomainError):
		bootstrap_se(fit, data, 1)
