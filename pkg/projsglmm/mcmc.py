# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Random-walk Metropolis-Hastings for f(delta | Z, psi) and Monte Carlo error diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable

import numpy as np
import pandas as pd
import scipy.linalg
from opsicommon.logging import get_logger

from projsglmm.basis import ProjectionBasis
from projsglmm.data import SpatialDataset
from projsglmm.exceptions import InsufficientSampleError, McmcError, ParameterDomainError, SingularCovarianceError

if TYPE_CHECKING:
	from projsglmm.em.State import ModelState

__all__ = (
	"McmcBatch",
	"log_target",
	"target_function",
	"adapt_proposal",
	"run_chain",
	"batch_means_ase",
	"multivariate_ess",
	"write_draws",
)

SCALE = 2.38**2
ADAPT_WEIGHT = 0.95
RIDGE_SD = 0.1
MIN_BATCH_MEANS_SAMPLE = 100
ACCEPTANCE_RANGE = (0.1, 0.5)
CHOLESKY_RIDGE = 1e-10
SINGULAR_TOLERANCE = 1e-12

logger = get_logger("projsglmm.mcmc")

LogTarget = Callable[[np.ndarray], float]


@dataclass(frozen=True)
class McmcBatch:
	draws: np.ndarray = field(repr=False)
	accept_rate: float
	proposal_cov: np.ndarray = field(repr=False)
	last_state: np.ndarray = field(repr=False)
	log_targets: np.ndarray = field(repr=False)

	def __post_init__(self) -> None:
		if self.draws.ndim != 2 or self.draws.shape[0] < 1:
			raise McmcError("A batch needs at least one draw")

	@property
	def size(self) -> int:
		return int(self.draws.shape[0])

	@property
	def dimension(self) -> int:
		return int(self.draws.shape[1])

	def extend(self, other: McmcBatch) -> McmcBatch:
		"""Concatenates a continuation of this chain."""
		accepted = self.accept_rate * self.size + other.accept_rate * other.size
		return McmcBatch(
			draws=np.vstack((self.draws, other.draws)),
			accept_rate=accepted / (self.size + other.size),
			proposal_cov=self.proposal_cov,
			last_state=other.last_state,
			log_targets=np.concatenate((self.log_targets, other.log_targets)),
		)

	def sample_cov(self) -> np.ndarray:
		if self.size < 2:
			return np.zeros((self.dimension, self.dimension))
		cov = np.atleast_2d(np.cov(self.draws, rowvar=False))
		return (cov + cov.T) / 2.0


def target_function(data: SpatialDataset | None, basis: ProjectionBasis, state: ModelState) -> LogTarget:
	"""Returns delta -> sum_i log f(Z_i | M delta, beta) - delta^T P delta / 2 with P the prior precision."""
	precision = basis.prior_precision(sigma2=state.sigma2, tau=state.tau)
	if data is None or data.n == 0:

		def prior_only(delta: np.ndarray) -> float:
			return float(-0.5 * delta @ precision @ delta)

		return prior_only

	base = data.base_predictor(state.beta)
	M = basis.M
	z = data.z
	family = data.family

	def target(delta: np.ndarray) -> float:
		value = float(np.sum(family.loglik(z, base + M @ delta)) - 0.5 * delta @ precision @ delta)
		return value if np.isfinite(value) else -np.inf

	return target


def log_target(delta: np.ndarray, data: SpatialDataset | None, basis: ProjectionBasis, state: ModelState) -> float:
	return target_function(data, basis, state)(np.asarray(delta, dtype=float))


def adapt_proposal(sample_cov: np.ndarray, q: int) -> np.ndarray:
	"""0.95 * 2.38^2 / q * Sigma + 0.05 * 0.1^2 / q * I."""
	sample_cov = np.atleast_2d(np.asarray(sample_cov, dtype=float))
	sample_cov = (sample_cov + sample_cov.T) / 2.0
	return ADAPT_WEIGHT * SCALE / q * sample_cov + (1.0 - ADAPT_WEIGHT) * RIDGE_SD**2 / q * np.eye(q)


def _proposal_factor(proposal_cov: np.ndarray) -> np.ndarray:
	try:
		return scipy.linalg.cholesky(proposal_cov, lower=True)
	except scipy.linalg.LinAlgError:
		ridge = CHOLESKY_RIDGE * max(float(np.trace(proposal_cov)) / proposal_cov.shape[0], 1.0)
		logger.warning("Proposal covariance is not positive definite, retrying with ridge %.3g", ridge)
		try:
			return scipy.linalg.cholesky(proposal_cov + ridge * np.eye(proposal_cov.shape[0]), lower=True)
		except scipy.linalg.LinAlgError as err:
			raise McmcError("Proposal covariance is not positive definite") from err


def run_chain(start: np.ndarray, n_draws: int, proposal_cov: np.ndarray, log_target: LogTarget, seed: int) -> McmcBatch:
	"""
	Random-walk Metropolis with a fixed multivariate normal proposal.

	No burn-in or thinning, the chain starts at `start`. Increments and uniforms are drawn up
	front from a PCG64 stream so the chain is a deterministic function of `seed`.
	"""
	if n_draws < 1:
		raise ParameterDomainError(f"Number of draws must be at least 1, got {n_draws}")
	current = np.array(start, dtype=float).ravel()
	proposal_cov = np.atleast_2d(np.asarray(proposal_cov, dtype=float))
	if proposal_cov.shape != (current.size, current.size):
		raise ParameterDomainError(f"Proposal covariance shape {proposal_cov.shape} does not match dimension {current.size}")
	factor = _proposal_factor(proposal_cov)

	rng = np.random.Generator(np.random.PCG64(seed))
	increments = rng.standard_normal((n_draws, current.size)) @ factor.T
	log_uniforms = np.log(rng.random(n_draws))

	current_value = log_target(current)
	if not np.isfinite(current_value):
		raise McmcError("Log target is not finite at the starting state")
	draws = np.empty((n_draws, current.size))
	values = np.empty(n_draws)
	accepted = 0
	for index in range(n_draws):
		proposal = current + increments[index]
		value = log_target(proposal)
		if log_uniforms[index] < value - current_value:
			current = proposal
			current_value = value
			accepted += 1
		draws[index] = current
		values[index] = current_value

	rate = accepted / n_draws
	if not ACCEPTANCE_RANGE[0] <= rate <= ACCEPTANCE_RANGE[1]:
		logger.warning("Acceptance rate %.3f outside [%.1f, %.1f]", rate, *ACCEPTANCE_RANGE)
	else:
		logger.debug("Acceptance rate %.3f over %d draws", rate, n_draws)
	return McmcBatch(draws=draws, accept_rate=rate, proposal_cov=proposal_cov, last_state=current.copy(), log_targets=values)


def _batches(values: np.ndarray) -> tuple[np.ndarray, int]:
	"""Means of floor(sqrt(k)) consecutive batches, dropping the oldest remainder."""
	k = values.shape[0]
	count = int(np.floor(np.sqrt(k)))
	size = k // count
	trimmed = values[k - count * size :]
	return trimmed.reshape(count, size, *values.shape[1:]).mean(axis=1), size


def batch_means_ase(values: np.ndarray) -> float:
	values = np.asarray(values, dtype=float).ravel()
	if values.size < MIN_BATCH_MEANS_SAMPLE:
		raise InsufficientSampleError(f"Batch means need at least {MIN_BATCH_MEANS_SAMPLE} values, got {values.size}")
	means, _size = _batches(values)
	return float(np.std(means, ddof=1) / np.sqrt(means.shape[0]))


def multivariate_ess(draws: np.ndarray) -> float:
	"""k (det Lambda / det Sigma_bm)^(1/m) with multivariate batch means for Sigma_bm."""
	draws = np.asarray(draws, dtype=float)
	if draws.ndim == 1:
		draws = draws.reshape(-1, 1)
	k, m = draws.shape
	if k <= m:
		raise InsufficientSampleError(f"Multivariate ESS needs more draws than dimensions, got {k} x {m}")
	sample_cov = np.atleast_2d(np.cov(draws, rowvar=False))
	eigenvalues = np.linalg.eigvalsh(sample_cov)
	if eigenvalues[-1] <= 0 or eigenvalues[0] <= SINGULAR_TOLERANCE * eigenvalues[-1]:
		raise SingularCovarianceError("Sample covariance of the draws is singular")
	means, size = _batches(draws)
	if means.shape[0] <= m:
		logger.debug("Only %d batches for dimension %d, multivariate ESS unavailable", means.shape[0], m)
		return 0.0
	long_run = size * np.atleast_2d(np.cov(means, rowvar=False))
	sign, long_run_logdet = np.linalg.slogdet(long_run)
	if sign <= 0:
		return 0.0
	_sign, sample_logdet = np.linalg.slogdet(sample_cov)
	return float(k * np.exp((sample_logdet - long_run_logdet) / m))


def write_draws(batch: McmcBatch, path: Path | str) -> None:
	frame = pd.DataFrame(batch.draws, columns=[f"delta{index + 1}" for index in range(batch.dimension)])
	frame.insert(0, "log_target", batch.log_targets)
	frame.to_csv(path, index=False)
	logger.info("Wrote %d draws to '%s'", batch.size, path)
