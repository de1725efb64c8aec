# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Canonical-link response families.

All functions take the linear predictor eta and work elementwise.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np
from scipy.special import expit, gammaln, logit, xlogy

from projsglmm.exceptions import ParameterDomainError

__all__ = ("ResponseFamily", "PoissonLog", "BernoulliLogit", "FAMILIES", "get_family")


class ResponseFamily(ABC):
	name: str = ""

	@abstractmethod
	def loglik(self, z: np.ndarray, eta: np.ndarray, full: bool = False) -> np.ndarray:
		"""
		Per-observation log-likelihood.

		With `full=False` terms that depend on z only are dropped.
		"""

	@abstractmethod
	def mean(self, eta: np.ndarray) -> np.ndarray: ...

	@abstractmethod
	def variance(self, eta: np.ndarray) -> np.ndarray: ...

	@abstractmethod
	def mean_d2(self, eta: np.ndarray) -> np.ndarray: ...

	@abstractmethod
	def variance_d2(self, eta: np.ndarray) -> np.ndarray: ...

	@abstractmethod
	def cumulant(self, eta: np.ndarray) -> np.ndarray: ...

	@abstractmethod
	def link(self, mu: np.ndarray) -> np.ndarray: ...

	@abstractmethod
	def check_support(self, z: np.ndarray) -> np.ndarray:
		"""Returns a boolean mask of observations outside the family support."""

	@abstractmethod
	def sample(self, rng: np.random.Generator, eta: np.ndarray) -> np.ndarray: ...

	@abstractmethod
	def start_mean(self, z: np.ndarray) -> np.ndarray: ...

	def cumulant_d2(self, eta: np.ndarray) -> np.ndarray:
		return self.variance(eta)

	@abstractmethod
	def deviance(self, z: np.ndarray, eta: np.ndarray) -> float: ...

	def validate(self, z: np.ndarray) -> None:
		bad = np.flatnonzero(self.check_support(np.asarray(z, dtype=float)))
		if bad.size:
			raise ParameterDomainError(f"Response at index {int(bad[0])} ({z[bad[0]]}) is outside the support of {self.name}")

	def __repr__(self) -> str:
		return f"<{self.__class__.__name__} {self.name}>"


class PoissonLog(ResponseFamily):
	name = "poisson-log"

	def loglik(self, z: np.ndarray, eta: np.ndarray, full: bool = False) -> np.ndarray:
		with np.errstate(over="ignore"):
			value = z * eta - np.exp(eta)
		if full:
			value = value - gammaln(z + 1.0)
		return value

	def mean(self, eta: np.ndarray) -> np.ndarray:
		with np.errstate(over="ignore"):
			return np.exp(eta)

	variance = mean
	mean_d2 = mean
	variance_d2 = mean
	cumulant = mean

	def link(self, mu: np.ndarray) -> np.ndarray:
		return np.log(mu)

	def deviance(self, z: np.ndarray, eta: np.ndarray) -> float:
		mu = self.mean(eta)
		return float(2.0 * np.sum(xlogy(z, z) - xlogy(z, mu) - (z - mu)))

	def check_support(self, z: np.ndarray) -> np.ndarray:
		return ~np.isfinite(z) | (z < 0) | (np.floor(z) != z)

	def sample(self, rng: np.random.Generator, eta: np.ndarray) -> np.ndarray:
		return rng.poisson(self.mean(eta)).astype(float)

	def start_mean(self, z: np.ndarray) -> np.ndarray:
		return (z + max(float(np.mean(z)), 0.1)) / 2.0


class BernoulliLogit(ResponseFamily):
	name = "bernoulli-logit"

	def loglik(self, z: np.ndarray, eta: np.ndarray, full: bool = False) -> np.ndarray:
		# no z-only terms, full and reduced forms coincide
		return z * eta - np.logaddexp(0.0, eta)

	def mean(self, eta: np.ndarray) -> np.ndarray:
		return expit(eta)

	def variance(self, eta: np.ndarray) -> np.ndarray:
		return expit(eta) * expit(-eta)

	def mean_d2(self, eta: np.ndarray) -> np.ndarray:
		p = expit(eta)
		return self.variance(eta) * (1.0 - 2.0 * p)

	def variance_d2(self, eta: np.ndarray) -> np.ndarray:
		p = expit(eta)
		return self.variance(eta) * (1.0 - 6.0 * p + 6.0 * p * p)

	def cumulant(self, eta: np.ndarray) -> np.ndarray:
		return np.logaddexp(0.0, eta)

	def link(self, mu: np.ndarray) -> np.ndarray:
		return logit(mu)

	def deviance(self, z: np.ndarray, eta: np.ndarray) -> float:
		return float(-2.0 * np.sum(self.loglik(z, eta)))

	def check_support(self, z: np.ndarray) -> np.ndarray:
		return ~np.isfinite(z) | ((z != 0) & (z != 1))

	def sample(self, rng: np.random.Generator, eta: np.ndarray) -> np.ndarray:
		return rng.binomial(1, self.mean(eta)).astype(float)

	def start_mean(self, z: np.ndarray) -> np.ndarray:
		return (z + 0.5) / 2.0


FAMILIES: dict[str, ResponseFamily] = {family.name: family for family in (PoissonLog(), BernoulliLogit())}


def get_family(name: str | ResponseFamily) -> ResponseFamily:
	if isinstance(name, ResponseFamily):
		return name
	try:
		return FAMILIES[str(name).strip().lower()]
	except KeyError as err:
		raise ParameterDomainError(f"Unknown family '{name}', choose one of {', '.join(FAMILIES)}") from err
