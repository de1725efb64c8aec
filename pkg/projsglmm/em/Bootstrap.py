# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Parametric bootstrap for the fitted projection model.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
import pandas as pd
import scipy.linalg
from opsicommon.logging import get_logger

from projsglmm.basis import ProjectionBasis
from projsglmm.covkernels import MaternParams, correlation_matrix
from projsglmm.data import SpatialDataset
from projsglmm.em.Config import EmConfig
from projsglmm.em.Laplace import fit_la_em
from projsglmm.em.Mcmc import fit_mcmc_em
from projsglmm.em.State import FitResult, ModelState
from projsglmm.exceptions import BootstrapError, ParameterDomainError, SglmmError
from projsglmm.sim import CHOLESKY_JITTER, lattice_field

__all__ = ("BootstrapResult", "bootstrap_se", "bootstrap_summary", "field_factor", "simulate_replicate")

MAX_FAILURE_SHARE = 0.2

logger = get_logger("projsglmm.em.bootstrap")


@dataclass(frozen=True)
class BootstrapResult:
	names: tuple[str, ...]
	estimates: np.ndarray = field(repr=False)
	failures: int
	replicates: int

	@property
	def standard_errors(self) -> np.ndarray:
		if self.estimates.shape[0] < 2:
			return np.full(len(self.names), np.nan)
		return np.std(self.estimates, axis=0, ddof=1)

	def percentile_intervals(self, level: float = 0.95) -> np.ndarray:
		tail = (1.0 - level) / 2.0 * 100.0
		return np.percentile(self.estimates, [tail, 100.0 - tail], axis=0).T

	def to_frame(self) -> pd.DataFrame:
		return pd.DataFrame(self.estimates, columns=list(self.names))


@dataclass(frozen=True)
class _Task:
	index: int
	seed: np.random.SeedSequence
	template: SpatialDataset
	estimate: ModelState
	basis: ProjectionBasis
	factor: np.ndarray | None
	algorithm: str
	config: EmConfig
	nu: float
	identical_seeds: bool = False


def field_factor(data: SpatialDataset, state: ModelState, nu: float) -> np.ndarray:
	"""Cholesky factor of sigma2 R_phi at the fitted state over the data locations."""
	assert data.coords is not None and state.sigma2 is not None and state.phi is not None
	covariance = state.sigma2 * correlation_matrix(data.coords, MaternParams(1.0, state.phi, nu))
	try:
		return scipy.linalg.cholesky(covariance, lower=True)
	except scipy.linalg.LinAlgError:
		logger.warning("Covariance is not numerically positive definite, adding jitter %.0e", CHOLESKY_JITTER)
		return scipy.linalg.cholesky(covariance + CHOLESKY_JITTER * np.eye(data.n), lower=True)


def simulate_replicate(
	template: SpatialDataset, estimate: ModelState, basis: ProjectionBasis, factor: np.ndarray | None, rng: np.random.Generator
) -> SpatialDataset:
	"""
	Responses drawn at the fitted state.

	Continuous replicates use the full Gaussian process through `factor`; lattice replicates
	draw delta from the reduced ICAR model on the fitted basis.
	"""
	if template.domain == "continuous":
		if factor is None:
			raise ParameterDomainError("Continuous replicates need the field factor")
		W = factor @ rng.standard_normal(template.n)
	else:
		assert basis.Qdelta is not None and estimate.tau is not None
		W = basis.M @ lattice_field(basis.Qdelta, estimate.tau, rng)
	eta = template.base_predictor(estimate.beta) + W
	return template.with_responses(template.family.sample(rng, eta))


def _refit(task: _Task) -> tuple[int, np.ndarray | None, str]:
	rng = np.random.Generator(np.random.PCG64(task.seed))
	data = simulate_replicate(task.template, task.estimate, task.basis, task.factor, rng)
	config = task.config if task.identical_seeds else replace(task.config, seed=int(task.seed.generate_state(1)[0]))
	fit = fit_mcmc_em if task.algorithm == "mcmc-em" else fit_la_em
	try:
		result = fit(data, task.basis.rank, config, start=task.estimate, nu=task.nu)
	except (SglmmError, np.linalg.LinAlgError, ValueError) as err:
		return task.index, None, str(err)
	return task.index, result.estimate.vector(), ""


def bootstrap_se(
	fitted: FitResult,
	data_template: SpatialDataset,
	B: int,
	seed: int = 0,
	workers: int | None = None,
	nu: float = 1.5,
	identical_seeds: bool = False,
) -> BootstrapResult:
	"""
	Simulates B datasets at the fitted state, refits each with the same rank and algorithm
	starting from the fitted state, and collects the point estimates.

	Replicates are independent tasks on a process pool with their own seed sequence child;
	results are ordered by replicate index. Failed refits are skipped and counted.
	"""
	if B < 2:
		raise ParameterDomainError(f"The bootstrap needs at least 2 replicates, got {B}")
	estimate = fitted.estimate
	factor = field_factor(data_template, estimate, nu) if data_template.domain == "continuous" else None
	config = EmConfig.from_config(fitted.config) if fitted.config else EmConfig()
	children = [np.random.SeedSequence(seed)] * B if identical_seeds else np.random.SeedSequence(seed).spawn(B)
	tasks = [
		_Task(
			index=index,
			seed=child,
			template=data_template,
			estimate=estimate,
			basis=fitted.basis,
			factor=factor,
			algorithm=fitted.algorithm,
			config=config,
			nu=nu,
			identical_seeds=identical_seeds,
		)
		for index, child in enumerate(children)
	]
	workers = workers or os.cpu_count() or 1
	logger.notice("Running %d bootstrap replicates on %d workers", B, workers)
	if workers == 1:
		results = [_refit(task) for task in tasks]
	else:
		with ProcessPoolExecutor(max_workers=workers) as executor:
			results = sorted(executor.map(_refit, tasks), key=lambda item: item[0])

	estimates = [vector for _index, vector, _error in results if vector is not None]
	failures = B - len(estimates)
	for index, vector, error in results:
		if vector is None:
			logger.warning("Bootstrap replicate %d failed: %s", index, error)
	if failures > MAX_FAILURE_SHARE * B:
		raise BootstrapError(f"{failures} of {B} bootstrap replicates failed", failures=failures, replicates=B)
	names = tuple(estimate.names(data_template.covariate_names))
	logger.notice("Bootstrap finished with %d successful replicates", len(estimates))
	return BootstrapResult(names=names, estimates=np.vstack(estimates), failures=failures, replicates=B)


def bootstrap_summary(result: BootstrapResult, level: float = 0.95) -> dict[str, Any]:
	intervals = result.percentile_intervals(level)
	return {
		name: {"se": float(se), "lower": float(lower), "upper": float(upper)}
		for name, se, (lower, upper) in zip(result.names, result.standard_errors, intervals)
	}
