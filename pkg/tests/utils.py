"""
proj-sglmm

Test utilities
"""

import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Generator

import numpy as np

from projsglmm.basis import ProjectionBasis, continuous_basis
from projsglmm.covkernels import LatticeGraph, MaternParams
from projsglmm.data import SpatialDataset


@contextmanager
def temp_context() -> Generator[Path, None, None]:
	origin = Path().absolute()
	try:
		with tempfile.TemporaryDirectory(ignore_cleanup_errors=True) as tempdir:
			os.chdir(tempdir)
			yield origin  # return original path
	finally:
		os.chdir(origin)


def poisson_points(n: int = 60, seed: int = 1, beta: tuple[float, ...] = (1.0, 0.5)) -> SpatialDataset:
	"""Poisson counts on random points with an intercept and one covariate."""
	rng = np.random.default_rng(seed)
	coords = rng.random((n, 2))
	X = np.column_stack((np.ones(n), coords[:, 0]))
	eta = X @ np.asarray(beta) + 0.3 * np.sin(3.0 * coords[:, 1])
	z = rng.poisson(np.exp(eta)).astype(float)
	return SpatialDataset(z=z, X=X, family="poisson-log", coords=coords, covariate_names=("intercept", "x1"))


def poisson_lattice(side: int = 6, seed: int = 2) -> SpatialDataset:
	rng = np.random.default_rng(seed)
	graph = LatticeGraph.grid(side, side)
	n = side * side
	X = np.column_stack((np.ones(n), np.repeat(np.linspace(0.0, 1.0, side), side)))
	z = rng.poisson(np.exp(X @ np.array([1.0, 0.5]))).astype(float)
	return SpatialDataset(z=z, X=X, family="poisson-log", graph=graph, covariate_names=("intercept", "x1"))


def poisson_rank_one(n: int = 20, seed: int = 4, phi: float = 0.3) -> tuple[SpatialDataset, ProjectionBasis, float]:
	"""Intercept-only Poisson counts driven by one projected basis vector, with the generating delta."""
	rng = np.random.default_rng(seed)
	coords = rng.random((n, 2))
	X = np.ones((n, 1))
	basis = continuous_basis(coords, X, MaternParams(1.0, phi), 1)
	column = basis.M[:, 0]
	delta = 0.6 * np.sqrt(n) / float(np.linalg.norm(column))
	z = rng.poisson(np.exp(1.0 + column * delta)).astype(float)
	data = SpatialDataset(z=z, X=X, family="poisson-log", coords=coords, covariate_names=("intercept",))
	return data, basis, delta
