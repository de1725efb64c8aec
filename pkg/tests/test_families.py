"""
proj-sglmm

tests for response families
"""

import numpy as np
import pytest
from scipy.stats import bernoulli, poisson

from projsglmm.exceptions import ParameterDomainError
from projsglmm.families import BernoulliLogit, PoissonLog, get_family


def test_bernoulli_curvature_at_zero() -> None:
	family = BernoulliLogit()
	assert family.mean(np.array([0.0]))[0] == pytest.approx(0.5)
	assert family.variance(np.array([0.0]))[0] == pytest.approx(0.25)
	assert family.mean_d2(np.array([0.0]))[0] == pytest.approx(0.0)


def test_full_loglik_matches_scipy() -> None:
	eta = np.array([-1.0, 0.3, 2.0])
	z = np.array([0.0, 2.0, 5.0])
	assert np.allclose(PoissonLog().loglik(z, eta, full=True), poisson.logpmf(z, np.exp(eta)))
	zb = np.array([0.0, 1.0, 1.0])
	assert np.allclose(BernoulliLogit().loglik(zb, eta, full=True), bernoulli.logpmf(zb, 1.0 / (1.0 + np.exp(-eta))))


def test_bernoulli_loglik_stable_for_large_eta() -> None:
	value = BernoulliLogit().loglik(np.array([1.0, 0.0]), np.array([800.0, -800.0]))
	assert np.all(np.isfinite(value))
	assert np.allclose(value, 0.0)


def test_support() -> None:
	assert PoissonLog().check_support(np.array([0.0, 1.5, -1.0, 3.0])).tolist() == [False, True, True, False]
	assert BernoulliLogit().check_support(np.array([0.0, 1.0, 2.0])).tolist() == [False, False, True]
	with pytest.raises(ParameterDomainError):
		PoissonLog().validate(np.array([1.0, -2.0]))


def test_get_family() -> None:
	assert get_family("Poisson-Log").name == "poisson-log"
	family = BernoulliLogit()
	assert get_family(family) is family
	with pytest.raises(ParameterDomainError):
		get_family("gamma")
