# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Ascent-based Monte Carlo EM.

Every iteration samples f(delta | Z, psi_t) by random-walk Metropolis, takes one Newton step
per parameter block and accepts the step only when the asymptotic lower bound of the
Q-function increase is positive. Otherwise the Monte Carlo sample grows by half and the step
is recomputed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from opsicommon.logging import get_logger
from scipy import stats

from projsglmm.basis import ProjectionBasis, build_basis, continuous_basis_from_eigen
from projsglmm.data import SpatialDataset
from projsglmm.em.Config import EmConfig
from projsglmm.em.State import (
	FitResult,
	ModelState,
	ObservedInformation,
	TraceRecord,
	assemble_information,
	batch_draws,
	candidate_eigens,
	complete_loglik,
	complete_scores,
	log_eigen_sum,
	newton_beta,
	newton_sigma2,
	newton_tau,
	phi_candidates,
	phi_quadratic,
	q_derivative_beta,
	q_derivative_sigma2,
	q_derivative_tau,
	sigma2_derivatives,
	state_summary,
	tau_derivatives,
)
from projsglmm.exceptions import DivergenceError, InsufficientSampleError, SglmmError, SingularCovarianceError
from projsglmm.lowrank import EigenPair, Eigensolver, derive_seed
from projsglmm.mcmc import McmcBatch, adapt_proposal, batch_means_ase, multivariate_ess, run_chain, target_function

__all__ = (
	"AscentDecision",
	"PhiSearch",
	"MStep",
	"critical_value",
	"ascent_check",
	"stopping_check",
	"phi_line_search",
	"m_step",
	"observed_information",
	"final_sample",
	"fit_mcmc_em",
)

# random stream purposes passed to derive_seed
CHAIN_STREAM = 1
EIGEN_STREAM = 2
FINAL_STREAM = 3

logger = get_logger("projsglmm.em.mcmc")


@dataclass(frozen=True)
class AscentDecision:
	accept: bool
	lower_bound: float
	new_size: int


@dataclass(frozen=True)
class PhiSearch:
	phi: float
	difference: float
	per_draw: np.ndarray = field(repr=False)
	basis: ProjectionBasis | None = field(default=None, repr=False)


@dataclass(frozen=True)
class MStep:
	state: ModelState
	basis: ProjectionBasis = field(repr=False)
	differences: np.ndarray = field(repr=False)
	qhat: float

	@property
	def dq(self) -> float:
		return float(np.mean(self.differences))


def critical_value(level: float) -> float:
	"""One-sided standard normal quantile z with P(N > z) = level."""
	return float(stats.norm.ppf(1.0 - level))


def ascent_check(dq: float, ase: float, k: int, alpha: float) -> AscentDecision:
	"""Accept when dQ - z_alpha * ASE > 0, otherwise ask for k + floor(k / 2) draws."""
	bound = dq - critical_value(alpha) * ase
	return AscentDecision(accept=bool(bound > 0), lower_bound=float(bound), new_size=k + k // 2)


def stopping_check(dq: float, ase: float, gamma: float, epsilon: float) -> bool:
	return bool(dq + critical_value(gamma) * ase < epsilon)


def phi_line_search(
	phi_t: float,
	candidates: list[float],
	batch: McmcBatch | np.ndarray,
	sigma2_next: float,
	eigensolver: Eigensolver,
	data: SpatialDataset,
	basis: ProjectionBasis,
	nu: float = 1.5,
	stream: tuple[int, ...] = (),
	workers: int | None = None,
	cache: dict[float, EigenPair | None] | None = None,
) -> PhiSearch:
	"""
	Picks the candidate range with the largest strictly positive estimated Q-function increase.

	Per draw the increase is -(sum ln d* - sum ln d) / 2 - (delta^T H* delta - delta^T H delta) / (2 sigma2_next)
	with H = (U^T M)^T D^{-1} (U^T M), the draws of M delta taken in the current basis on both sides.
	"""
	draws = batch_draws(batch)
	zero = PhiSearch(phi=phi_t, difference=0.0, per_draw=np.zeros(draws.shape[0]), basis=basis)
	others = [phi for phi in candidates if phi != phi_t]
	if not others:
		return zero
	assert data.coords is not None
	eigens = candidate_eigens(data.coords, others, nu, basis.rank, eigensolver, stream=stream, workers=workers, cache=cache)
	if all(eigen is None for eigen in eigens.values()):
		logger.warning("All phi candidates failed, keeping phi=%.5g", phi_t)
		return zero

	current_log = log_eigen_sum(basis.D)
	current_quad = np.einsum("ij,jk,ik->i", draws, phi_quadratic(basis.U, basis.D, basis.M), draws)
	best = zero
	best_eigen: EigenPair | None = None
	for phi, eigen in eigens.items():
		if eigen is None:
			continue
		quad = np.einsum("ij,jk,ik->i", draws, phi_quadratic(eigen.vectors, eigen.values, basis.M), draws)
		per_draw = -0.5 * (log_eigen_sum(eigen.values) - current_log) - (quad - current_quad) / (2.0 * sigma2_next)
		difference = float(np.mean(per_draw))
		logger.debug("phi candidate %.5g: estimated increase %.6g", phi, difference)
		if difference > best.difference:
			best = PhiSearch(phi=phi, difference=difference, per_draw=per_draw)
			best_eigen = eigen
	if best_eigen is None:
		return zero
	logger.info("phi moves from %.5g to %.5g (increase %.4g)", phi_t, best.phi, best.difference)
	return PhiSearch(
		phi=best.phi,
		difference=best.difference,
		per_draw=best.per_draw,
		basis=continuous_basis_from_eigen(best_eigen, data.X, best.phi, nu),
	)


def m_step(
	batch: McmcBatch,
	data: SpatialDataset,
	basis: ProjectionBasis,
	state: ModelState,
	config: EmConfig,
	nu: float = 1.5,
	stream: tuple[int, ...] = (),
	cache: dict[float, EigenPair | None] | None = None,
) -> MStep:
	"""One Newton step for beta and for theta from the same sample, with per-draw Q-function differences."""
	draws = batch_draws(batch)
	q = basis.rank
	gradient, hessian = q_derivative_beta(draws, data, basis, state.beta)
	beta_next = newton_beta(state.beta, gradient, hessian)
	phi_per_draw = np.zeros(draws.shape[0])
	basis_next = basis
	if state.domain == "continuous":
		assert state.sigma2 is not None and state.phi is not None
		mean_square = float(np.mean(np.einsum("ij,ij->i", draws, draws)))
		g, h = q_derivative_sigma2(draws, state.sigma2)
		sigma2_next = newton_sigma2(state.sigma2, g, h, mean_square, q, config.sigma2_floor)
		search = phi_line_search(
			state.phi,
			phi_candidates(state.phi, config.phi_step, config.phi_candidates),
			draws,
			sigma2_next,
			config.eigensolver(),
			data,
			basis,
			nu=nu,
			stream=stream,
			workers=config.workers,
			cache=cache,
		)
		phi_per_draw = search.per_draw
		basis_next = search.basis or basis
		state_next = ModelState(beta=beta_next, sigma2=sigma2_next, phi=search.phi)
	else:
		assert state.tau is not None and basis.Qdelta is not None
		g, h = q_derivative_tau(draws, state.tau, basis.Qdelta)
		state_next = ModelState(beta=beta_next, tau=newton_tau(state.tau, g, h, config.tau_floor))

	current = complete_loglik(draws, data, basis, state)
	updated = complete_loglik(draws, data, basis, state_next)
	return MStep(state=state_next, basis=basis_next, differences=updated - current + phi_per_draw, qhat=float(np.mean(current)))


def observed_information(
	final_batch: McmcBatch | np.ndarray, state_hat: ModelState, data: SpatialDataset, basis: ProjectionBasis
) -> ObservedInformation:
	"""Complete-data information minus the Monte Carlo second moment of the complete-data score plus its squared mean."""
	draws = batch_draws(final_batch)
	q = basis.rank
	p = data.p
	_gradient, hessian = q_derivative_beta(draws, data, basis, state_hat.beta)
	complete = np.zeros((p + 1, p + 1))
	complete[:p, :p] = -hessian
	if state_hat.domain == "continuous":
		assert state_hat.sigma2 is not None
		mean_square = float(np.mean(np.einsum("ij,ij->i", draws, draws)))
		complete[p, p] = -sigma2_derivatives(mean_square, q, state_hat.sigma2)[1]
		names = list(data.covariate_names) + ["sigma2"]
	else:
		assert state_hat.tau is not None
		mean_quad = float(np.mean(basis.quadratic_form(draws)))
		complete[p, p] = -tau_derivatives(mean_quad, q, state_hat.tau)[1]
		names = list(data.covariate_names) + ["tau"]

	scores = complete_scores(draws, data, basis, state_hat)
	second_moment = scores.T @ scores / scores.shape[0]
	return assemble_information(complete, (second_moment + second_moment.T) / 2.0, scores.mean(axis=0), names)


def _initial_chain(data: SpatialDataset, basis: ProjectionBasis, state: ModelState) -> tuple[np.ndarray, np.ndarray]:
	"""Starting delta and proposal covariance from the Gaussian approximation, or from the prior."""
	from projsglmm.em.Laplace import gaussian_approx  # pylint: disable=import-outside-toplevel

	q = basis.rank
	try:
		lap = gaussian_approx(data, basis, state)
		return lap.mode, adapt_proposal(lap.covariance, q)
	except (SglmmError, np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as err:
		logger.info("Gaussian approximation unavailable (%s), starting the chain at zero", err)
	precision = basis.prior_precision(sigma2=state.sigma2, tau=state.tau)
	return np.zeros(q), adapt_proposal(scipy.linalg.pinvh(precision), q)


def final_sample(
	data: SpatialDataset, basis: ProjectionBasis, state: ModelState, previous: McmcBatch, proposal: np.ndarray, seed: int
) -> McmcBatch:
	"""
	Fresh sample of the size of `previous` under the final estimate.

	The chain restarts from the last draw of `previous` after a burn-in of a fifth of the sample,
	since that draw may be in the coordinates of the basis before the last phi update.
	"""
	target = target_function(data, basis, state)
	burn_in = run_chain(previous.last_state, max(previous.size // 5, 1), proposal, target, derive_seed(seed, FINAL_STREAM, 0))
	return run_chain(burn_in.last_state, previous.size, proposal, target, derive_seed(seed, FINAL_STREAM, 1))


def _mess(batch: McmcBatch) -> float:
	try:
		return multivariate_ess(batch.draws)
	except (SingularCovarianceError, InsufficientSampleError) as err:
		logger.debug("Multivariate ESS unavailable: %s", err)
		return 0.0


def fit_mcmc_em(
	data: SpatialDataset,
	rank: int,
	config: EmConfig | None = None,
	start: ModelState | None = None,
	basis: ProjectionBasis | None = None,
	nu: float = 1.5,
) -> FitResult:
	"""
	MCMC-EM from `start` (GLM warm start when omitted).

	Stops when an accepted iteration satisfies dQ + z_gamma * ASE < epsilon, after
	`max_em_iters` iterations, or when the sample would have to grow beyond `max_mc_size`.
	"""
	from projsglmm.glm import initial_values, irls_fit  # pylint: disable=import-outside-toplevel

	config = config or EmConfig()
	started = time.perf_counter()
	if start is None:
		start = initial_values(data, irls_fit(data.X, data.z, data.family, data.offset))
	state = start
	basis = basis or build_basis(data, rank, state.phi, nu, config.eigensolver(), stream=(EIGEN_STREAM, 0))
	q = basis.rank
	trace: list[TraceRecord] = []
	stopped_by = "max-iters"
	logger.notice("Starting MCMC-EM with rank %d from %s", q, state_summary(state))

	try:
		delta, proposal = _initial_chain(data, basis, state)
	except (SglmmError, np.linalg.LinAlgError, ValueError) as err:
		raise DivergenceError(f"Could not initialise the sampler: {err}", trace=trace) from err
	k = config.k0
	batch: McmcBatch | None = None

	for iteration in range(1, config.max_em_iters + 1):
		try:
			target = target_function(data, basis, state)
			batch = run_chain(delta, k, proposal, target, derive_seed(config.seed, CHAIN_STREAM, iteration, 0))
			attempt = 0
			if iteration == 1:
				required = config.mess_factor * q
				mess = _mess(batch)
				while mess < required and batch.size < config.max_mc_size:
					attempt += 1
					extra = min(batch.size // 2, config.max_mc_size - batch.size)
					batch = batch.extend(run_chain(batch.last_state, extra, proposal, target, derive_seed(config.seed, CHAIN_STREAM, iteration, attempt)))
					mess = _mess(batch)
				logger.info("Initial sample of %d draws, multivariate ESS %.1f (target %.1f)", batch.size, mess, required)
				if mess < required:
					logger.warning("Multivariate ESS %.1f stays below %.1f at the sample size limit", mess, required)

			cache: dict[float, EigenPair | None] = {}
			while True:
				update = m_step(batch, data, basis, state, config, nu, stream=(EIGEN_STREAM, iteration), cache=cache)
				dq = update.dq
				ase = batch_means_ase(update.differences)
				decision = ascent_check(dq, ase, batch.size, config.alpha)
				if decision.accept or config.stop_rule == "none":
					break
				if batch.size >= config.max_mc_size:
					stopped_by = "mc-size-limit"
					break
				attempt += 1
				extra = min(decision.new_size, config.max_mc_size) - batch.size
				logger.info("Lower bound %.4g is not positive, growing the sample from %d to %d", decision.lower_bound, batch.size, batch.size + extra)
				batch = batch.extend(run_chain(batch.last_state, extra, proposal, target, derive_seed(config.seed, CHAIN_STREAM, iteration, attempt)))
		except (SglmmError, np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as err:
			raise DivergenceError(f"MCMC-EM failed in iteration {iteration}: {err}", trace=trace) from err

		accepted = stopped_by != "mc-size-limit"
		if accepted and (not update.state.is_finite() or not np.isfinite(dq)):
			raise DivergenceError(f"MCMC-EM diverged in iteration {iteration}", trace=trace)
		trace.append(
			TraceRecord(
				iteration=iteration,
				k=batch.size,
				dq=dq,
				ase=ase,
				qhat=update.qhat,
				accepted=accepted,
				state=update.state if accepted else state,
				wall_time=time.perf_counter() - started,
			)
		)
		if not accepted:
			logger.warning("Sample size limit %d reached without a confirmed ascent, keeping the current estimate", config.max_mc_size)
			break

		logger.notice("MCMC-EM iteration %d: k=%d dQ=%.6g ASE=%.4g, %s", iteration, batch.size, dq, ase, state_summary(update.state))
		state = update.state
		basis = update.basis
		delta = batch.last_state
		proposal = adapt_proposal(batch.sample_cov(), q)
		k = batch.size
		if config.stop_rule == "ascent" and stopping_check(dq, ase, config.gamma, config.epsilon):
			stopped_by = "ascent-threshold"
			break

	assert batch is not None
	try:
		batch = final_sample(data, basis, state, batch, proposal, config.seed)
	except (SglmmError, np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as err:
		raise DivergenceError(f"Could not sample under the final estimate: {err}", trace=trace) from err
	info = observed_information(batch, state, data, basis)
	wall_time = time.perf_counter() - started
	logger.notice("MCMC-EM finished after %d iterations (%s) in %.2fs: %s", len(trace), stopped_by, wall_time, state_summary(state))
	return FitResult(
		algorithm="mcmc-em",
		estimate=state,
		basis=basis,
		trace=tuple(trace),
		stopped_by=stopped_by,
		wall_time=wall_time,
		observed_info=info,
		final_batch=batch,
		config={**config.to_dict(), "family": data.family.name, "nu": nu},
	)
