# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Parameter state, complete-data derivatives and fit results shared by both EM variants.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import TYPE_CHECKING, Any

import numpy as np
import pandas as pd
import scipy.linalg
from opsicommon.logging import get_logger
from scipy import integrate, optimize, stats

from projsglmm.basis import ProjectionBasis
from projsglmm.covkernels import MaternParams, correlation_matrix
from projsglmm.data import SpatialDataset
from projsglmm.exceptions import ParameterDomainError, SglmmError
from projsglmm.lowrank import EigenPair, Eigensolver

if TYPE_CHECKING:
	from projsglmm.em.Laplace import LaplaceState
	from projsglmm.mcmc import McmcBatch

__all__ = (
	"ModelState",
	"TraceRecord",
	"ObservedInformation",
	"FitResult",
	"batch_draws",
	"linear_predictors",
	"q_derivative_beta",
	"q_derivative_sigma2",
	"q_derivative_tau",
	"sigma2_derivatives",
	"tau_derivatives",
	"newton_beta",
	"newton_sigma2",
	"newton_tau",
	"complete_scores",
	"complete_loglik",
	"log_prior",
	"assemble_information",
	"quadrature_loglik",
	"state_summary",
	"phi_candidates",
	"candidate_eigens",
	"phi_quadratic",
	"log_eigen_sum",
)

# draws are processed in blocks of this many columns to bound the n x k predictor matrix
DRAW_CHUNK = 256
QUADRATURE_WIDTH = 40.0

logger = get_logger("projsglmm.em")


@dataclass(frozen=True)
class ModelState:
	"""psi = (beta, theta) with theta = (sigma2, phi) on continuous domains and tau on lattices."""

	beta: np.ndarray
	sigma2: float | None = None
	phi: float | None = None
	tau: float | None = None

	def __post_init__(self) -> None:
		object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
		if self.tau is None and (self.sigma2 is None or self.phi is None):
			raise ParameterDomainError("A state needs (sigma2, phi) or tau")
		if self.tau is not None and (self.sigma2 is not None or self.phi is not None):
			raise ParameterDomainError("A state carries either (sigma2, phi) or tau, not both")
		for name in ("sigma2", "phi", "tau"):
			value = getattr(self, name)
			if value is not None:
				value = float(value)
				object.__setattr__(self, name, value)
				if np.isfinite(value) and value <= 0:
					raise ParameterDomainError(f"{name} must be positive, got {value}")

	@property
	def domain(self) -> str:
		return "lattice" if self.tau is not None else "continuous"

	@property
	def theta(self) -> np.ndarray:
		if self.domain == "lattice":
			return np.array([self.tau])
		return np.array([self.sigma2, self.phi])

	def is_finite(self) -> bool:
		return bool(np.all(np.isfinite(self.beta)) and np.all(np.isfinite(self.theta)))

	def vector(self) -> np.ndarray:
		return np.concatenate((self.beta, self.theta))

	def names(self, covariate_names: tuple[str, ...] | None = None) -> list[str]:
		labels = list(covariate_names or (f"beta{index + 1}" for index in range(self.beta.size)))
		return labels + (["tau"] if self.domain == "lattice" else ["sigma2", "phi"])

	def replace(self, **changes: Any) -> ModelState:
		return replace(self, **changes)

	def relative_change(self, other: ModelState) -> float:
		before = self.vector()
		after = other.vector()
		return float(np.max(np.abs(after - before) / np.maximum(np.abs(before), 1e-8)))

	def to_dict(self) -> dict[str, Any]:
		return {"beta": self.beta.tolist(), "sigma2": self.sigma2, "phi": self.phi, "tau": self.tau}

	@classmethod
	def from_dict(cls, values: dict[str, Any]) -> ModelState:
		return cls(beta=np.asarray(values["beta"], dtype=float), sigma2=values.get("sigma2"), phi=values.get("phi"), tau=values.get("tau"))


@dataclass(frozen=True)
class TraceRecord:
	iteration: int
	k: int
	dq: float
	ase: float
	qhat: float
	accepted: bool
	state: ModelState
	wall_time: float

	def row(self) -> dict[str, Any]:
		row: dict[str, Any] = {
			"iter": self.iteration,
			"k": self.k,
			"dq": self.dq,
			"ase": self.ase,
			"qhat": self.qhat,
			"accepted": int(self.accepted),
		}
		for index, value in enumerate(self.state.beta):
			row[f"beta{index + 1}"] = value
		for name in ("sigma2", "phi", "tau"):
			value = getattr(self.state, name)
			if value is not None:
				row[name] = value
		row["wall_time"] = self.wall_time
		return row


@dataclass(frozen=True)
class ObservedInformation:
	matrix: np.ndarray = field(repr=False)
	names: tuple[str, ...]
	complete_info: np.ndarray = field(repr=False)
	score_cov: np.ndarray = field(repr=False)

	@property
	def positive_definite(self) -> bool:
		return bool(np.all(np.linalg.eigvalsh(self.matrix) > 0))

	def covariance(self) -> np.ndarray:
		if not self.positive_definite:
			return np.full(self.matrix.shape, np.nan)
		return scipy.linalg.inv(self.matrix)

	def standard_errors(self) -> np.ndarray:
		return np.sqrt(np.diag(self.covariance()))

	def wald_intervals(self, estimate: np.ndarray, level: float = 0.95) -> np.ndarray:
		quantile = stats.norm.ppf(0.5 + level / 2.0)
		se = self.standard_errors()
		return np.column_stack((estimate - quantile * se, estimate + quantile * se))


@dataclass(frozen=True)
class FitResult:
	algorithm: str
	estimate: ModelState
	basis: ProjectionBasis = field(repr=False)
	trace: tuple[TraceRecord, ...] = field(repr=False)
	stopped_by: str
	wall_time: float
	observed_info: ObservedInformation | None = field(default=None, repr=False)
	final_batch: McmcBatch | None = field(default=None, repr=False)
	laplace: LaplaceState | None = field(default=None, repr=False)
	config: dict[str, Any] = field(default_factory=dict, repr=False)

	@property
	def rank(self) -> int:
		return self.basis.rank

	@property
	def iterations(self) -> int:
		return len(self.trace)

	def trace_frame(self) -> pd.DataFrame:
		return pd.DataFrame([record.row() for record in self.trace])


def batch_draws(batch: McmcBatch | np.ndarray) -> np.ndarray:
	draws = batch if isinstance(batch, np.ndarray) else batch.draws
	return np.atleast_2d(np.asarray(draws, dtype=float))


def linear_predictors(data: SpatialDataset, basis: ProjectionBasis, beta: np.ndarray, draws: np.ndarray) -> np.ndarray:
	"""n x k matrix of X beta + offset + M delta_k."""
	return data.base_predictor(beta)[:, None] + basis.M @ draws.T


def _chunks(draws: np.ndarray):
	for start in range(0, draws.shape[0], DRAW_CHUNK):
		yield draws[start : start + DRAW_CHUNK]


def q_derivative_beta(
	batch: McmcBatch | np.ndarray, data: SpatialDataset, basis: ProjectionBasis, beta: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
	"""Monte Carlo averages of X^T (Z - mu) and -X^T V X over the draws."""
	draws = batch_draws(batch)
	mean_mu = np.zeros(data.n)
	mean_var = np.zeros(data.n)
	for chunk in _chunks(draws):
		eta = linear_predictors(data, basis, beta, chunk)
		mean_mu += data.family.mean(eta).sum(axis=1)
		mean_var += data.family.variance(eta).sum(axis=1)
	mean_mu /= draws.shape[0]
	mean_var /= draws.shape[0]
	gradient = data.X.T @ (data.z - mean_mu)
	hessian = -(data.X.T * mean_var) @ data.X
	return gradient, (hessian + hessian.T) / 2.0


def sigma2_derivatives(mean_square: float, q: int, sigma2: float) -> tuple[float, float]:
	gradient = -q / (2.0 * sigma2) + mean_square / (2.0 * sigma2**2)
	hessian = q / (2.0 * sigma2**2) - mean_square / sigma2**3
	return gradient, hessian


def tau_derivatives(mean_quad: float, q: int, tau: float) -> tuple[float, float]:
	return q / (2.0 * tau) - mean_quad / 2.0, -q / (2.0 * tau**2)


def q_derivative_sigma2(batch: McmcBatch | np.ndarray, sigma2: float) -> tuple[float, float]:
	draws = batch_draws(batch)
	return sigma2_derivatives(float(np.mean(np.einsum("ij,ij->i", draws, draws))), draws.shape[1], sigma2)


def q_derivative_tau(batch: McmcBatch | np.ndarray, tau: float, Qdelta: np.ndarray) -> tuple[float, float]:
	draws = batch_draws(batch)
	quad = np.einsum("ij,jk,ik->i", draws, Qdelta, draws)
	return tau_derivatives(float(np.mean(quad)), draws.shape[1], tau)


def newton_beta(beta: np.ndarray, gradient: np.ndarray, hessian: np.ndarray) -> np.ndarray:
	if beta.size == 0:
		return beta
	return beta + scipy.linalg.solve(-hessian, gradient, assume_a="pos")


def newton_sigma2(sigma2: float, gradient: float, hessian: float, mean_square: float, q: int, floor: float) -> float:
	if hessian < 0:
		updated = sigma2 - gradient / hessian
	else:
		# no curvature, take the exact maximiser of the prior term
		logger.debug("sigma2 Hessian %.4g is not negative, using mean(delta^T delta) / q", hessian)
		updated = mean_square / q
	return max(float(updated), floor)


def newton_tau(tau: float, gradient: float, hessian: float, floor: float) -> float:
	return max(float(tau - gradient / hessian), floor)


def log_prior(draws: np.ndarray, basis: ProjectionBasis, state: ModelState) -> np.ndarray:
	"""Normalised log density of each draw under the delta prior."""
	q = basis.rank
	quad = basis.quadratic_form(draws)
	if state.domain == "continuous":
		assert state.sigma2 is not None
		return -0.5 * q * np.log(2.0 * np.pi * state.sigma2) - quad / (2.0 * state.sigma2)
	assert state.tau is not None and basis.Qdelta is not None
	sign, logdet = np.linalg.slogdet(basis.Qdelta)
	logdet = logdet if sign > 0 else 0.0
	return 0.5 * (q * np.log(state.tau / (2.0 * np.pi)) + logdet) - 0.5 * state.tau * quad


def complete_loglik(draws: np.ndarray, data: SpatialDataset, basis: ProjectionBasis, state: ModelState) -> np.ndarray:
	"""ln f(Z, delta; psi) for every draw."""
	draws = batch_draws(draws)
	values = np.empty(draws.shape[0])
	for start in range(0, draws.shape[0], DRAW_CHUNK):
		chunk = draws[start : start + DRAW_CHUNK]
		eta = linear_predictors(data, basis, state.beta, chunk)
		values[start : start + chunk.shape[0]] = data.family.loglik(data.z[:, None], eta, full=True).sum(axis=0)
	return values + log_prior(draws, basis, state)


def complete_scores(draws: np.ndarray, data: SpatialDataset, basis: ProjectionBasis, state: ModelState) -> np.ndarray:
	"""k x (p + 1) complete-data scores for (beta, sigma2) or (beta, tau)."""
	draws = batch_draws(draws)
	scores = np.empty((draws.shape[0], data.p + 1))
	for start in range(0, draws.shape[0], DRAW_CHUNK):
		chunk = draws[start : start + DRAW_CHUNK]
		eta = linear_predictors(data, basis, state.beta, chunk)
		residual = data.z[:, None] - data.family.mean(eta)
		scores[start : start + chunk.shape[0], : data.p] = (data.X.T @ residual).T
	q = basis.rank
	quad = basis.quadratic_form(draws)
	if state.domain == "continuous":
		assert state.sigma2 is not None
		scores[:, -1] = -q / (2.0 * state.sigma2) + quad / (2.0 * state.sigma2**2)
	else:
		assert state.tau is not None
		scores[:, -1] = q / (2.0 * state.tau) - quad / 2.0
	return scores


def assemble_information(
	complete_info: np.ndarray, score_second_moment: np.ndarray, score_mean: np.ndarray, names: list[str]
) -> ObservedInformation:
	"""I = I_c - E[S S^T] + E[S] E[S]^T."""
	matrix = complete_info - score_second_moment + np.outer(score_mean, score_mean)
	matrix = (matrix + matrix.T) / 2.0
	info = ObservedInformation(
		matrix=matrix,
		names=tuple(names),
		complete_info=complete_info,
		score_cov=score_second_moment - np.outer(score_mean, score_mean),
	)
	if not info.positive_definite:
		logger.warning("Observed information is not positive definite, standard errors are unavailable")
	return info


def quadrature_loglik(data: SpatialDataset, basis: ProjectionBasis, state: ModelState) -> float:
	"""Marginal log-likelihood for a rank-one basis by adaptive quadrature over delta."""
	if basis.rank != 1:
		raise ParameterDomainError(f"Quadrature needs a rank-one basis, got rank {basis.rank}")
	column = basis.M[:, 0]
	base = data.base_predictor(state.beta)
	precision = float(basis.prior_precision(sigma2=state.sigma2, tau=state.tau)[0, 0])

	def log_joint(delta: float) -> float:
		eta = base + column * delta
		return float(np.sum(data.family.loglik(data.z, eta, full=True)) + 0.5 * np.log(precision / (2.0 * np.pi)) - 0.5 * precision * delta**2)

	mode = float(optimize.minimize_scalar(lambda delta: -log_joint(delta)).x)
	peak = log_joint(mode)
	curvature = float(np.sum(data.family.variance(base + column * mode) * column**2)) + precision
	width = QUADRATURE_WIDTH / np.sqrt(curvature)
	area, _error = integrate.quad(lambda delta: np.exp(log_joint(delta) - peak), mode - width, mode + width, points=[mode], limit=200)
	return peak + float(np.log(area))


def state_summary(state: ModelState) -> str:
	parts = [f"beta=({', '.join(f'{value:.4f}' for value in state.beta)})"]
	parts += [f"{name}={value:.4f}" for name, value in asdict(state).items() if name != "beta" and value is not None]
	return " ".join(parts)


def phi_candidates(phi: float, step: float, count: int) -> list[float]:
	"""phi * (1 - step * j) and phi * (1 + step * j) for j = 1..count."""
	lower = [phi * (1.0 - step * j) for j in range(count, 0, -1)]
	upper = [phi * (1.0 + step * j) for j in range(1, count + 1)]
	return [value for value in lower + upper if value > 0]


def candidate_eigens(
	coords: np.ndarray,
	phis: list[float],
	nu: float,
	rank: int,
	eigensolver: Eigensolver,
	stream: tuple[int, ...] = (),
	workers: int | None = None,
	cache: dict[float, EigenPair | None] | None = None,
) -> dict[float, EigenPair | None]:
	"""Leading eigenpairs of R_phi for every candidate, computed in parallel; failures map to None."""
	cache = {} if cache is None else cache
	missing = [(index, phi) for index, phi in enumerate(phis) if phi not in cache]

	def decompose(item: tuple[int, float]) -> tuple[float, EigenPair | None]:
		index, phi = item
		try:
			eigen = eigensolver(correlation_matrix(coords, MaternParams(1.0, phi, nu)), rank, stream=(*stream, index))
		except (SglmmError, np.linalg.LinAlgError, scipy.linalg.LinAlgError) as err:
			logger.warning("Eigendecomposition for phi=%.5g failed: %s", phi, err)
			return phi, None
		if np.any(eigen.values <= 0):
			logger.warning("Non-positive eigenvalue for phi=%.5g, skipping the candidate", phi)
			return phi, None
		return phi, eigen

	if missing:
		with ThreadPoolExecutor(max_workers=workers) as executor:
			for phi, eigen in executor.map(decompose, missing):
				cache[phi] = eigen
	return {phi: cache[phi] for phi in phis}


def phi_quadratic(vectors: np.ndarray, values: np.ndarray, M: np.ndarray) -> np.ndarray:
	"""H with delta^T H delta = (M delta)^T U D^{-1} U^T (M delta)."""
	projected = vectors.T @ M
	scaled = projected / np.sqrt(np.clip(values, np.finfo(float).tiny, None))[:, None]
	quadratic = scaled.T @ scaled
	return (quadratic + quadratic.T) / 2.0


def log_eigen_sum(values: np.ndarray) -> float:
	return float(np.sum(np.log(np.clip(values, np.finfo(float).tiny, None))))
