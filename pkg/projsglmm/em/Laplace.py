# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Laplace-approximation EM.

The conditional density f(delta | Z, psi) is replaced by a Gaussian centred at its mode with
covariance equal to the inverse negative Hessian there. Expectations of smooth functions of
the linear predictor use a second order Taylor expansion around the mode.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from opsicommon.logging import get_logger

from projsglmm.basis import ProjectionBasis, build_basis, continuous_basis_from_eigen
from projsglmm.data import SpatialDataset
from projsglmm.em.Config import EmConfig
from projsglmm.em.State import (
	FitResult,
	ModelState,
	ObservedInformation,
	TraceRecord,
	assemble_information,
	candidate_eigens,
	log_eigen_sum,
	newton_beta,
	newton_sigma2,
	newton_tau,
	phi_candidates,
	phi_quadratic,
	sigma2_derivatives,
	state_summary,
	tau_derivatives,
)
from projsglmm.exceptions import DivergenceError, LaplaceConvergenceError, SglmmError
from projsglmm.families import ResponseFamily

__all__ = (
	"LaplaceState",
	"LaplaceMoments",
	"likelihood_curvature",
	"gaussian_approx",
	"laplace_expectation",
	"laplace_stopping_check",
	"laplace_moments",
	"laplace_observed_information",
	"fit_la_em",
)

NEWTON_TOLERANCE = 1e-8
MAX_NEWTON_ITERATIONS = 100
MAX_STEP_HALVINGS = 30

logger = get_logger("projsglmm.em.laplace")


@dataclass(frozen=True)
class LaplaceState:
	mode: np.ndarray
	precision: np.ndarray = field(repr=False)
	converged: bool
	newton_iters: int

	@property
	def covariance(self) -> np.ndarray:
		factor = scipy.linalg.cho_factor(self.precision, lower=True)
		covariance = scipy.linalg.cho_solve(factor, np.eye(self.precision.shape[0]))
		return (covariance + covariance.T) / 2.0


@dataclass(frozen=True)
class LaplaceMoments:
	"""Gaussian-approximation expectations needed by the M-step."""

	eta: np.ndarray = field(repr=False)
	predictor_var: np.ndarray = field(repr=False)
	covariance: np.ndarray = field(repr=False)
	mean_mu: np.ndarray = field(repr=False)
	mean_var: np.ndarray = field(repr=False)
	mean_square: float
	mean_quad: float


def likelihood_curvature(eta: np.ndarray, z: np.ndarray, family: ResponseFamily) -> tuple[np.ndarray, np.ndarray]:
	"""
	d1 and the diagonal of D2 of the per-observation log-likelihood expansion.

	Poisson: d1 = D2 = exp(eta); Bernoulli: d1 = e^eta / (1 + e^eta), D2 = e^eta / (1 + e^eta)^2.
	"""
	eta = np.asarray(eta, dtype=float)
	return family.mean(eta), family.variance(eta)


def _log_posterior(data: SpatialDataset, basis: ProjectionBasis, base: np.ndarray, precision: np.ndarray, delta: np.ndarray) -> float:
	value = float(np.sum(data.family.loglik(data.z, base + basis.M @ delta)) - 0.5 * delta @ precision @ delta)
	return value if np.isfinite(value) else -np.inf


def gaussian_approx(
	data: SpatialDataset | None,
	basis: ProjectionBasis,
	state: ModelState,
	delta0: np.ndarray | None = None,
	tol: float = NEWTON_TOLERANCE,
	max_iter: int = MAX_NEWTON_ITERATIONS,
) -> LaplaceState:
	"""
	Mode and precision Q = M^T D2 M + Q_delta of f(delta | Z, psi).

	Each Newton step solves Q delta = M^T (Z - d1 + D2 M delta_old) and is halved while the
	log posterior decreases.
	"""
	precision = basis.prior_precision(sigma2=state.sigma2, tau=state.tau)
	q = basis.rank
	if data is None or data.n == 0:
		return LaplaceState(mode=np.zeros(q), precision=precision, converged=True, newton_iters=0)

	M = basis.M
	base = data.base_predictor(state.beta)
	delta = np.zeros(q) if delta0 is None or len(delta0) != q else np.asarray(delta0, dtype=float).copy()
	current = _log_posterior(data, basis, base, precision, delta)
	if not np.isfinite(current):
		delta = np.zeros(q)
		current = _log_posterior(data, basis, base, precision, delta)

	converged = False
	iterations = 0
	for iterations in range(1, max_iter + 1):
		d1, d2 = likelihood_curvature(base + M @ delta, data.z, data.family)
		system = M.T @ (M * d2[:, None]) + precision
		rhs = M.T @ (data.z - d1 + d2 * (M @ delta))
		try:
			target = scipy.linalg.solve(system, rhs, assume_a="pos")
		except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as err:
			raise LaplaceConvergenceError("Newton system is not positive definite", last_iterate=delta, iterations=iterations) from err
		step = target - delta
		for _ in range(MAX_STEP_HALVINGS):
			candidate = _log_posterior(data, basis, base, precision, delta + step)
			if candidate >= current - 1e-12 * max(1.0, abs(current)):
				break
			step /= 2.0
		else:
			candidate = _log_posterior(data, basis, base, precision, delta + step)
		delta = delta + step
		current = candidate
		if not np.all(np.isfinite(delta)):
			raise LaplaceConvergenceError("Mode search diverged", last_iterate=delta, iterations=iterations)
		if np.max(np.abs(step)) < tol:
			converged = True
			break

	if not converged:
		raise LaplaceConvergenceError(f"Mode search did not converge in {max_iter} iterations", last_iterate=delta, iterations=iterations)

	_d1, d2 = likelihood_curvature(base + M @ delta, data.z, data.family)
	mode_precision = M.T @ (M * d2[:, None]) + precision
	mode_precision = (mode_precision + mode_precision.T) / 2.0
	try:
		scipy.linalg.cholesky(mode_precision)
	except scipy.linalg.LinAlgError as err:
		raise LaplaceConvergenceError("Precision at the mode is not positive definite", last_iterate=delta, iterations=iterations) from err
	return LaplaceState(mode=delta, precision=mode_precision, converged=True, newton_iters=iterations)


def laplace_expectation(
	h_value: float | np.ndarray, h_second: float | np.ndarray, Mi_row: np.ndarray, lap: LaplaceState
) -> float | np.ndarray:
	"""
	E[h(X_i beta + M_i delta)] ~ h(eta*_i) + h''(eta*_i) M_i Q^{-1} M_i^T / 2.

	A single row gives a float, a matrix of rows gives one expectation per row.
	"""
	row = np.asarray(Mi_row, dtype=float)
	if row.ndim == 1:
		return float(h_value + 0.5 * h_second * (row @ lap.covariance @ row))
	return np.asarray(h_value, dtype=float) + 0.5 * np.asarray(h_second, dtype=float) * predictor_variances(row, lap.covariance)


def predictor_variances(M: np.ndarray, covariance: np.ndarray) -> np.ndarray:
	"""Diagonal of M C M^T."""
	return np.einsum("ij,ij->i", M @ covariance, M)


def laplace_moments(data: SpatialDataset, basis: ProjectionBasis, state: ModelState, lap: LaplaceState) -> LaplaceMoments:
	covariance = lap.covariance
	eta = data.base_predictor(state.beta) + basis.M @ lap.mode
	spread = predictor_variances(basis.M, covariance)
	family = data.family
	if basis.Qdelta is None:
		mean_quad = float(np.trace(covariance) + lap.mode @ lap.mode)
	else:
		mean_quad = float(np.sum(basis.Qdelta * covariance) + lap.mode @ basis.Qdelta @ lap.mode)
	return LaplaceMoments(
		eta=eta,
		predictor_var=spread,
		covariance=covariance,
		mean_mu=laplace_expectation(family.mean(eta), family.mean_d2(eta), basis.M, lap),
		mean_var=np.clip(laplace_expectation(family.variance(eta), family.variance_d2(eta), basis.M, lap), 0.0, None),
		mean_square=float(np.trace(covariance) + lap.mode @ lap.mode),
		mean_quad=mean_quad,
	)


def expected_loglik(data: SpatialDataset, basis: ProjectionBasis, state: ModelState, lap: LaplaceState, covariance: np.ndarray) -> float:
	"""Q-hat(psi) under the Gaussian approximation: E[ln f(Z | M delta, beta)] + E[ln f(delta | theta)]."""
	family = data.family
	eta = data.base_predictor(state.beta) + basis.M @ lap.mode
	expected_cumulant = laplace_expectation(family.cumulant(eta), family.cumulant_d2(eta), basis.M, lap)
	# log-likelihood is z * eta - b(eta) + c(z) for both canonical families
	constant = family.loglik(data.z, np.zeros(data.n), full=True) + family.cumulant(np.zeros(data.n))
	value = float(np.sum(data.z * eta - expected_cumulant + constant))
	q = basis.rank
	if state.domain == "continuous":
		assert state.sigma2 is not None
		square = float(np.trace(covariance) + lap.mode @ lap.mode)
		return value - 0.5 * q * np.log(2.0 * np.pi * state.sigma2) - square / (2.0 * state.sigma2)
	assert state.tau is not None and basis.Qdelta is not None
	quad = float(np.sum(basis.Qdelta * covariance) + lap.mode @ basis.Qdelta @ lap.mode)
	sign, logdet = np.linalg.slogdet(basis.Qdelta)
	return value + 0.5 * (q * np.log(state.tau / (2.0 * np.pi)) + (logdet if sign > 0 else 0.0)) - 0.5 * state.tau * quad


def _expected_quadratic(H: np.ndarray, lap: LaplaceState, covariance: np.ndarray) -> float:
	return float(np.sum(H * covariance) + lap.mode @ H @ lap.mode)


def _laplace_phi_search(
	data: SpatialDataset,
	basis: ProjectionBasis,
	state: ModelState,
	lap: LaplaceState,
	covariance: np.ndarray,
	sigma2_next: float,
	config: EmConfig,
	iteration: int,
	nu: float,
) -> tuple[float, float, ProjectionBasis]:
	"""Candidate phi with the largest positive expected increase, its increase and basis."""
	assert state.phi is not None and data.coords is not None
	phis = phi_candidates(state.phi, config.phi_step, config.phi_candidates)
	eigens = candidate_eigens(data.coords, phis, nu, basis.rank, config.eigensolver(), stream=(2, iteration), workers=config.workers)
	current_log = log_eigen_sum(basis.D)
	current_quad = _expected_quadratic(phi_quadratic(basis.U, basis.D, basis.M), lap, covariance)
	best_phi, best_gain, best_basis = state.phi, 0.0, basis
	for phi, eigen in eigens.items():
		if eigen is None:
			continue
		quad = _expected_quadratic(phi_quadratic(eigen.vectors, eigen.values, basis.M), lap, covariance)
		gain = -0.5 * (log_eigen_sum(eigen.values) - current_log) - (quad - current_quad) / (2.0 * sigma2_next)
		if gain > best_gain:
			best_phi, best_gain = phi, gain
			best_basis = continuous_basis_from_eigen(eigen, data.X, phi, nu)
	if all(eigen is None for eigen in eigens.values()) and eigens:
		logger.warning("All phi candidates failed, keeping phi=%.5g", state.phi)
	return best_phi, best_gain, best_basis


def laplace_observed_information(
	data: SpatialDataset, basis: ProjectionBasis, state: ModelState, lap: LaplaceState
) -> ObservedInformation:
	"""
	Observed information for (beta, sigma2) or (beta, tau) under the Gaussian approximation.

	The beta score is linearised around the mode; second moments of delta^T A delta use
	Var = 2 tr(A C A C) + 4 d*^T A C A d* and Cov(delta, delta^T A delta) = 2 C A d*.
	"""
	moments = laplace_moments(data, basis, state, lap)
	C = moments.covariance
	mode = lap.mode
	q = basis.rank
	p = data.p
	A = np.eye(q) if basis.Qdelta is None else basis.Qdelta
	if state.domain == "continuous":
		assert state.sigma2 is not None
		sigma2 = state.sigma2
		weight = 1.0 / (2.0 * sigma2**2)
		theta_info = -sigma2_derivatives(moments.mean_square, q, sigma2)[1]
		theta_mean = sigma2_derivatives(moments.mean_square, q, sigma2)[0]
	else:
		assert state.tau is not None
		weight = -0.5
		theta_info = -tau_derivatives(moments.mean_quad, q, state.tau)[1]
		theta_mean = tau_derivatives(moments.mean_quad, q, state.tau)[0]

	complete = np.zeros((p + 1, p + 1))
	complete[:p, :p] = (data.X.T * moments.mean_var) @ data.X
	complete[p, p] = theta_info

	beta_mean = data.X.T @ (data.z - moments.mean_mu)
	sensitivity = -(data.X.T * data.family.variance(moments.eta)) @ basis.M
	beta_cov = sensitivity @ C @ sensitivity.T
	ACA = A @ C @ A
	theta_var = weight**2 * (2.0 * np.sum(ACA * C) + 4.0 * mode @ ACA @ mode) if q else 0.0
	cross = weight * sensitivity @ (2.0 * C @ A @ mode)

	score_cov = np.zeros((p + 1, p + 1))
	score_cov[:p, :p] = beta_cov
	score_cov[:p, p] = cross
	score_cov[p, :p] = cross
	score_cov[p, p] = theta_var
	score_mean = np.concatenate((beta_mean, [theta_mean]))
	names = list(data.covariate_names) + (["sigma2"] if state.domain == "continuous" else ["tau"])
	return assemble_information(complete, score_cov + np.outer(score_mean, score_mean), score_mean, names)


def laplace_stopping_check(qhat_previous: float | None, qhat: float, change: float, epsilon: float, param_tol: float) -> bool:
	"""Successive Q-hat values differ by less than epsilon and no parameter moved by more than param_tol."""
	if qhat_previous is None:
		return False
	return bool(abs(qhat - qhat_previous) < epsilon and change < param_tol)


def fit_la_em(
	data: SpatialDataset,
	rank: int,
	config: EmConfig | None = None,
	start: ModelState | None = None,
	basis: ProjectionBasis | None = None,
	nu: float = 1.5,
) -> FitResult:
	"""
	Laplace-approximation EM with one-step Newton updates of beta and theta.

	Stops when the change of Q-hat is below epsilon and the largest relative parameter change
	is below `la_param_tol`, or after `max_em_iters` iterations.
	"""
	from projsglmm.glm import initial_values, irls_fit  # pylint: disable=import-outside-toplevel

	config = config or EmConfig()
	started = time.perf_counter()
	if start is None:
		start = initial_values(data, irls_fit(data.X, data.z, data.family, data.offset))
	state = start
	basis = basis or build_basis(data, rank, state.phi, nu, config.eigensolver(), stream=(2, 0))
	q = basis.rank
	trace: list[TraceRecord] = []
	stopped_by = "max-iters"
	delta0: np.ndarray | None = None
	lap: LaplaceState | None = None
	logger.notice("Starting LA-EM with rank %d from %s", q, state_summary(state))

	for iteration in range(1, config.max_em_iters + 1):
		try:
			lap = gaussian_approx(data, basis, state, delta0)
			moments = laplace_moments(data, basis, state, lap)
			gradient = data.X.T @ (data.z - moments.mean_mu)
			hessian = -(data.X.T * moments.mean_var) @ data.X
			beta_next = newton_beta(state.beta, gradient, (hessian + hessian.T) / 2.0)
			qhat = expected_loglik(data, basis, state, lap, moments.covariance)
			if state.domain == "continuous":
				assert state.sigma2 is not None
				g, h = sigma2_derivatives(moments.mean_square, q, state.sigma2)
				sigma2_next = newton_sigma2(state.sigma2, g, h, moments.mean_square, q, config.sigma2_floor)
				phi_next, phi_gain, basis_next = _laplace_phi_search(
					data, basis, state, lap, moments.covariance, sigma2_next, config, iteration, nu
				)
				state_next = ModelState(beta=beta_next, sigma2=sigma2_next, phi=phi_next)
			else:
				assert state.tau is not None
				g, h = tau_derivatives(moments.mean_quad, q, state.tau)
				state_next = ModelState(beta=beta_next, tau=newton_tau(state.tau, g, h, config.tau_floor))
				phi_gain, basis_next = 0.0, basis
			dq = expected_loglik(data, basis, state_next, lap, moments.covariance) - qhat + phi_gain
		except (SglmmError, np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as err:
			raise DivergenceError(f"LA-EM failed in iteration {iteration}: {err}", trace=trace) from err
		if not state_next.is_finite() or not np.isfinite(dq):
			raise DivergenceError(f"LA-EM diverged in iteration {iteration}", trace=trace)

		change = state.relative_change(state_next)
		qhat_previous = trace[-1].qhat if trace else None
		trace.append(
			TraceRecord(
				iteration=iteration,
				k=0,
				dq=float(dq),
				ase=0.0,
				qhat=qhat,
				accepted=True,
				state=state_next,
				wall_time=time.perf_counter() - started,
			)
		)
		logger.info("LA-EM iteration %d: dQ=%.6g, %s", iteration, dq, state_summary(state_next))
		delta0 = lap.mode
		state = state_next
		basis = basis_next
		if config.stop_rule == "ascent" and laplace_stopping_check(qhat_previous, qhat, change, config.epsilon, config.la_param_tol):
			stopped_by = "ascent-threshold"
			break

	try:
		lap = gaussian_approx(data, basis, state, delta0)
		info = laplace_observed_information(data, basis, state, lap)
	except SglmmError as err:
		raise DivergenceError(f"Mode search failed at the final estimate: {err}", trace=trace) from err

	wall_time = time.perf_counter() - started
	logger.notice("LA-EM finished after %d iterations (%s) in %.2fs: %s", len(trace), stopped_by, wall_time, state_summary(state))
	return FitResult(
		algorithm="la-em",
		estimate=state,
		basis=basis,
		trace=tuple(trace),
		stopped_by=stopped_by,
		wall_time=wall_time,
		observed_info=info,
		laplace=lap,
		config={**config.to_dict(), "family": data.family.name, "nu": nu},
	)
