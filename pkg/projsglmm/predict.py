# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Kriging of the latent field at unsampled locations.

With V = D^{-1/2} U^T W~ the reduced field has covariance sigma2 I, so the BLUP of W* is
B V with B = R_{*s} U D^{-1/2} and its conditional variance is sigma2 (1 - rowsum(B^2)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg
from opsicommon.logging import get_logger

from projsglmm.basis import ProjectionBasis
from projsglmm.covkernels import MaternParams, correlation_matrix, cross_correlation
from projsglmm.em.State import FitResult, ModelState, batch_draws
from projsglmm.exceptions import ParameterDomainError, PredictionError
from projsglmm.families import ResponseFamily, get_family
from projsglmm.lowrank import derive_seed

__all__ = ("PredictionResult", "blup", "predict_mcmc", "predict_laplace", "prediction_mse")

VARIANCE_TOLERANCE = 1e-8
MAX_PREDICTION_DRAWS = 2000
JOINT_JITTER = 1e-10
PREDICTION_STREAM = 21

logger = get_logger("projsglmm.predict")


@dataclass(frozen=True)
class PredictionResult:
	locations: np.ndarray = field(repr=False)
	latent_mean: np.ndarray = field(repr=False)
	latent_var: np.ndarray = field(repr=False)
	response_mean: np.ndarray = field(repr=False)
	draws: np.ndarray | None = field(default=None, repr=False)
	covariance: np.ndarray | None = field(default=None, repr=False)
	method: str = "laplace"

	@property
	def latent_sd(self) -> np.ndarray:
		return np.sqrt(self.latent_var)

	def quantiles(self, levels: tuple[float, ...] = (0.025, 0.975)) -> np.ndarray | None:
		if self.draws is None:
			return None
		return np.quantile(self.draws, levels, axis=1).T

	def to_frame(self) -> pd.DataFrame:
		frame = pd.DataFrame(
			{
				"x": self.locations[:, 0],
				"y": self.locations[:, 1],
				"latent_mean": self.latent_mean,
				"latent_sd": self.latent_sd,
				"response_mean": self.response_mean,
			}
		)
		quantiles = self.quantiles()
		if quantiles is not None:
			frame["latent_q025"] = quantiles[:, 0]
			frame["latent_q975"] = quantiles[:, 1]
		return frame


def _check_locations(locations: np.ndarray) -> np.ndarray:
	locations = np.asarray(locations, dtype=float)
	if locations.ndim != 2 or locations.shape[1] != 2:
		raise ParameterDomainError(f"Locations must be an n x 2 array, got shape {locations.shape}")
	if not np.all(np.isfinite(locations)):
		rows = np.flatnonzero(~np.all(np.isfinite(locations), axis=1))
		raise ParameterDomainError(f"New locations contain NaN coordinates at rows {rows.tolist()}")
	return locations


def _kriging_weights(new_locations: np.ndarray, train_locations: np.ndarray, basis: ProjectionBasis) -> np.ndarray:
	"""B = R_{*s} U D^{-1/2}."""
	if basis.domain != "continuous" or basis.phi is None:
		raise PredictionError("Prediction at new locations needs a continuous-domain fit")
	params = MaternParams(1.0, basis.phi, basis.nu or 1.5)
	cross = cross_correlation(new_locations, np.asarray(train_locations, dtype=float), params)
	return (cross @ basis.U) / np.sqrt(np.clip(basis.D, np.finfo(float).tiny, None))


def _conditional_variance(weights: np.ndarray, sigma2: float) -> np.ndarray:
	variance = sigma2 * (1.0 - np.einsum("ij,ij->i", weights, weights))
	if np.any(variance < -VARIANCE_TOLERANCE * max(sigma2, 1.0)):
		logger.warning("Negative conditional variance %.3g clamped to zero", float(variance.min()))
	return np.clip(variance, 0.0, None)


def _joint_covariance(new_locations: np.ndarray, weights: np.ndarray, basis: ProjectionBasis, sigma2: float) -> np.ndarray:
	assert basis.phi is not None
	prior = correlation_matrix(new_locations, MaternParams(1.0, basis.phi, basis.nu or 1.5))
	covariance = sigma2 * (prior - weights @ weights.T)
	return (covariance + covariance.T) / 2.0


def blup(
	new_locations: np.ndarray, train_locations: np.ndarray, basis: ProjectionBasis, state: ModelState, Wtilde: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
	"""Conditional mean and variance of W* given W~ = U D^{1/2} delta."""
	new_locations = _check_locations(new_locations)
	if state.sigma2 is None:
		raise PredictionError("Prediction needs a continuous-domain state")
	weights = _kriging_weights(new_locations, train_locations, basis)
	reduced = (basis.U.T @ np.asarray(Wtilde, dtype=float)) / np.sqrt(np.clip(basis.D, np.finfo(float).tiny, None))
	return weights @ reduced, _conditional_variance(weights, state.sigma2)


def _fixed_part(new_X: np.ndarray | None, new_offset: np.ndarray | None, beta: np.ndarray, count: int) -> np.ndarray:
	if beta.size == 0:
		fixed = np.zeros(count)
	elif new_X is None:
		raise PredictionError(f"Covariates for the {count} new locations are required")
	else:
		new_X = np.asarray(new_X, dtype=float).reshape(count, -1)
		if new_X.shape[1] != beta.size:
			raise PredictionError(f"New covariates have {new_X.shape[1]} columns, the fit has {beta.size}")
		fixed = new_X @ beta
	return fixed if new_offset is None else fixed + np.asarray(new_offset, dtype=float)


def _family(fit: FitResult) -> ResponseFamily:
	return get_family(fit.config.get("family", "poisson-log"))


def predict_mcmc(
	fit: FitResult,
	new_locations: np.ndarray,
	train_locations: np.ndarray,
	new_X: np.ndarray | None = None,
	new_offset: np.ndarray | None = None,
	family: ResponseFamily | None = None,
	full_cov: bool = False,
	seed: int | None = None,
) -> PredictionResult:
	"""
	Kriging averaged over the final MCMC sample.

	Latent moments are Rao-Blackwellised: the mean is the BLUP at the mean draw and the variance
	adds the spread of the per-draw BLUP means to the conditional variance. One field draw per
	MCMC draw (at most MAX_PREDICTION_DRAWS, evenly thinned) gives quantiles and the response mean.
	"""
	if fit.final_batch is None:
		raise PredictionError("The fit carries no MCMC sample, refit with the mcmc-em algorithm to predict from draws")
	new_locations = _check_locations(new_locations)
	state = fit.estimate
	if state.sigma2 is None:
		raise PredictionError("Prediction needs a continuous-domain fit")
	family = family or _family(fit)
	deltas = batch_draws(fit.final_batch)
	weights = _kriging_weights(new_locations, train_locations, fit.basis)
	conditional = _conditional_variance(weights, state.sigma2)

	means = weights @ deltas.T
	latent_mean = weights @ deltas.mean(axis=0)
	spread = np.einsum("ij,jk,ik->i", weights, np.atleast_2d(np.cov(deltas, rowvar=False)), weights) if deltas.shape[0] > 1 else 0.0
	latent_var = conditional + spread

	step = max(1, int(np.ceil(deltas.shape[0] / MAX_PREDICTION_DRAWS)))
	selected = means[:, ::step]
	rng = np.random.Generator(np.random.PCG64(derive_seed(fit.config.get("seed", 0) if seed is None else seed, PREDICTION_STREAM)))
	noise = rng.standard_normal(selected.shape)
	covariance = None
	if full_cov:
		covariance = _joint_covariance(new_locations, weights, fit.basis, state.sigma2)
		factor = scipy.linalg.cholesky(covariance + JOINT_JITTER * np.eye(covariance.shape[0]), lower=True)
		draws = selected + factor @ noise
	else:
		draws = selected + np.sqrt(conditional)[:, None] * noise
	fixed = _fixed_part(new_X, new_offset, state.beta, new_locations.shape[0])
	response_mean = family.mean(fixed[:, None] + draws).mean(axis=1)
	logger.info("Predicted %d locations from %d draws", new_locations.shape[0], draws.shape[1])
	return PredictionResult(
		locations=new_locations,
		latent_mean=latent_mean,
		latent_var=latent_var,
		response_mean=response_mean,
		draws=draws,
		covariance=covariance,
		method="mcmc",
	)


def predict_laplace(
	fit: FitResult,
	new_locations: np.ndarray,
	train_locations: np.ndarray,
	new_X: np.ndarray | None = None,
	new_offset: np.ndarray | None = None,
	family: ResponseFamily | None = None,
	full_cov: bool = False,
) -> PredictionResult:
	"""Plug-in kriging at the Laplace mode; the variance ignores the uncertainty of delta."""
	if fit.laplace is None:
		raise PredictionError("The fit carries no Laplace mode, refit with the la-em algorithm")
	new_locations = _check_locations(new_locations)
	state = fit.estimate
	if state.sigma2 is None:
		raise PredictionError("Prediction needs a continuous-domain fit")
	family = family or _family(fit)
	weights = _kriging_weights(new_locations, train_locations, fit.basis)
	latent_mean = weights @ fit.laplace.mode
	latent_var = _conditional_variance(weights, state.sigma2)
	fixed = _fixed_part(new_X, new_offset, state.beta, new_locations.shape[0])
	covariance = _joint_covariance(new_locations, weights, fit.basis, state.sigma2) if full_cov else None
	return PredictionResult(
		locations=new_locations,
		latent_mean=latent_mean,
		latent_var=latent_var,
		response_mean=family.mean(fixed + latent_mean),
		covariance=covariance,
		method="laplace",
	)


def prediction_mse(result: PredictionResult, truth: np.ndarray) -> float:
	"""Mean squared error of the latent mean against the true field."""
	truth = np.asarray(truth, dtype=float)
	if truth.shape != result.latent_mean.shape:
		raise PredictionError(f"Truth has shape {truth.shape}, predictions {result.latent_mean.shape}")
	return float(np.mean((result.latent_mean - truth) ** 2))
