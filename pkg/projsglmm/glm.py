# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Non-spatial GLM fits: warm starts and AIC-based initial rank selection.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from opsicommon.logging import get_logger

from projsglmm.basis import moran_basis
from projsglmm.covkernels import MaternParams, correlation_matrix
from projsglmm.data import SpatialDataset
from projsglmm.em.State import ModelState
from projsglmm.exceptions import GlmConvergenceError, ParameterDomainError, RankDeficientDesignError, SglmmError
from projsglmm.families import ResponseFamily, get_family
from projsglmm.lowrank import Eigensolver

__all__ = ("GlmFit", "RankSelection", "irls_fit", "select_initial_rank", "initial_values")

SCORE_TOLERANCE = 1e-8
MAX_IRLS_ITERATIONS = 100
MAX_STEP_HALVINGS = 30
SIGMA2_FLOOR = 1e-4
# fitted probabilities this close to 0 or 1 indicate separation
SEPARATION_TOLERANCE = 1e-10

logger = get_logger("projsglmm.glm")


@dataclass(frozen=True)
class GlmFit:
	beta: np.ndarray
	deviance: float
	aic: float
	loglik: float
	iterations: int
	converged: bool
	eta: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class RankSelection:
	rank: int
	table: pd.DataFrame = field(repr=False)


def _scaled_score(X: np.ndarray, z: np.ndarray, mu: np.ndarray) -> float:
	if X.shape[1] == 0:
		return 0.0
	scale = max(1.0, float(np.max(np.abs(X.T @ z))))
	return float(np.max(np.abs(X.T @ (z - mu)))) / scale


def irls_fit(
	X: np.ndarray,
	Z: np.ndarray,
	family: str | ResponseFamily,
	offset: np.ndarray | None = None,
	max_iter: int = MAX_IRLS_ITERATIONS,
	tol: float = SCORE_TOLERANCE,
) -> GlmFit:
	"""
	Canonical-link GLM by iteratively reweighted least squares.

	Each step solves the weighted least squares problem for the working response and is
	halved while the deviance increases. Convergence means the score max-norm, scaled by
	max(1, |X^T Z|_inf), is below `tol`.
	"""
	family = get_family(family)
	X = np.asarray(X, dtype=float)
	z = np.asarray(Z, dtype=float)
	if X.ndim == 1:
		X = X.reshape(-1, 1)
	offset = np.zeros(z.size) if offset is None else np.asarray(offset, dtype=float)
	family.validate(z)
	n, p = X.shape
	if p and np.linalg.matrix_rank(X) < p:
		raise RankDeficientDesignError("GLM design matrix is rank deficient", column=int(np.linalg.matrix_rank(X)))

	beta = np.zeros(p)
	eta = family.link(family.start_mean(z))
	deviance = family.deviance(z, eta)
	iterations = 0
	converged = p == 0
	if converged:
		eta = offset.copy()
		deviance = family.deviance(z, eta)

	while not converged:
		if iterations >= max_iter:
			raise GlmConvergenceError(f"IRLS did not converge within {max_iter} iterations", last_iterate=beta, iterations=iterations)
		iterations += 1
		mu = family.mean(eta)
		weight = np.clip(family.variance(eta), np.finfo(float).tiny, None)
		working = eta - offset + (z - mu) / weight
		root = np.sqrt(weight)
		candidate = scipy.linalg.lstsq(X * root[:, None], working * root)[0]
		step = candidate - beta
		for _ in range(MAX_STEP_HALVINGS):
			new_eta = X @ (beta + step) + offset
			new_deviance = family.deviance(z, new_eta)
			if np.isfinite(new_deviance) and (iterations == 1 or new_deviance <= deviance * (1 + 1e-12) + 1e-12):
				break
			step /= 2.0
		beta = beta + step
		eta = X @ beta + offset
		deviance = family.deviance(z, eta)
		if not np.all(np.isfinite(beta)) or not np.isfinite(deviance):
			raise GlmConvergenceError("IRLS diverged", last_iterate=beta, iterations=iterations)
		score = _scaled_score(X, z, family.mean(eta))
		logger.trace("IRLS iteration %d: deviance %.8g, scaled score %.3g", iterations, deviance, score)
		converged = score < tol

	if family.name == "bernoulli-logit":
		fitted = family.mean(eta)
		if np.any((fitted < SEPARATION_TOLERANCE) | (fitted > 1.0 - SEPARATION_TOLERANCE)):
			raise GlmConvergenceError("Fitted probabilities of 0 or 1, the data are separated", last_iterate=beta, iterations=iterations)

	loglik = float(np.sum(family.loglik(z, eta, full=True)))
	return GlmFit(
		beta=beta,
		deviance=float(deviance),
		aic=-2.0 * loglik + 2.0 * p,
		loglik=loglik,
		iterations=iterations,
		converged=True,
		eta=eta,
	)


def _synthetic_variables(data: SpatialDataset, phi0: float, nu: float, max_rank: int, eigensolver: Eigensolver) -> np.ndarray:
	if data.domain == "continuous":
		eigen = eigensolver(correlation_matrix(data.coords, MaternParams(1.0, phi0, nu)), max_rank, stream=(0,))
		return eigen.vectors * np.sqrt(eigen.values)
	assert data.graph is not None
	return moran_basis(data.graph, data.X, max_rank).M


def select_initial_rank(
	data: SpatialDataset,
	phi0: float | None,
	nu: float,
	rank_grid: Sequence[int],
	eigensolver: Eigensolver | None = None,
	workers: int | None = None,
) -> RankSelection:
	"""
	Fits GLMs with predictors [X, U_m D_m^{1/2}] for every m in `rank_grid` and picks the minimum AIC.

	Eigencomponents come from R_phi0 on continuous domains and from the Moran operator on lattices.
	"""
	grid = [int(rank) for rank in rank_grid]
	if not grid:
		raise ParameterDomainError("Rank grid is empty")
	if any(later <= earlier for earlier, later in zip(grid, grid[1:])) or grid[0] < 1:
		raise ParameterDomainError(f"Rank grid must be positive and increasing, got {grid}")
	if data.domain == "continuous" and phi0 is None:
		raise ParameterDomainError("Continuous rank selection needs an initial range phi0")

	synthetic = _synthetic_variables(data, float(phi0 or 1.0), nu, grid[-1], eigensolver or Eigensolver())
	grid = [rank for rank in grid if rank <= synthetic.shape[1]] or [synthetic.shape[1]]

	def fit_rank(rank: int) -> tuple[int, float, bool]:
		design = np.hstack((data.X, synthetic[:, :rank]))
		try:
			return rank, irls_fit(design, data.z, data.family, data.offset).aic, True
		except (SglmmError, np.linalg.LinAlgError, scipy.linalg.LinAlgError) as err:
			logger.info("GLM with rank %d failed: %s", rank, err)
			return rank, float("inf"), False

	with ThreadPoolExecutor(max_workers=workers) as executor:
		rows = list(executor.map(fit_rank, grid))

	table = pd.DataFrame(rows, columns=["rank", "aic", "converged"])
	if not np.any(np.isfinite(table["aic"])):
		raise GlmConvergenceError("No GLM on the rank grid could be fitted")
	chosen = int(table["rank"].iloc[int(np.argmin(table["aic"].to_numpy()))])
	logger.notice("Selected initial rank %d by AIC", chosen)
	return RankSelection(rank=chosen, table=table)


def initial_values(data: SpatialDataset, glmfit: GlmFit, domain: str | None = None) -> ModelState:
	"""
	beta from the GLM, sigma2 (or 1 / tau) from the variance of the working residuals and phi as
	half the largest coordinate range.
	"""
	domain = domain or data.domain
	mu = data.family.mean(glmfit.eta)
	variance = np.clip(data.family.variance(glmfit.eta), np.finfo(float).tiny, None)
	working = (data.z - mu) / variance
	sigma2 = float(np.var(working)) if data.n > 1 else 0.0
	if not np.isfinite(sigma2) or sigma2 < SIGMA2_FLOOR:
		sigma2 = SIGMA2_FLOOR
	if domain == "lattice":
		return ModelState(beta=glmfit.beta.copy(), tau=1.0 / sigma2)
	if data.coords is None:
		raise ParameterDomainError("Continuous initial values need point coordinates")
	extent = float(np.max(np.ptp(data.coords, axis=0)))
	if not extent > 0:
		raise ParameterDomainError("All locations coincide, there is no coordinate range to derive a starting phi from")
	return ModelState(beta=glmfit.beta.copy(), sigma2=sigma2, phi=0.5 * extent)
