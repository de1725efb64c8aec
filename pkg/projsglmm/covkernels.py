# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Spatial covariance structures.

Matern correlation for point-referenced data and ICAR precision for lattices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from opsicommon.logging import get_logger
from scipy import sparse
from scipy.optimize import brentq
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist, pdist, squareform

from projsglmm.exceptions import DatasetFormatError, ParameterDomainError

__all__ = (
	"ALLOWED_NU",
	"MaternParams",
	"LatticeGraph",
	"matern_correlation",
	"correlation_matrix",
	"cross_correlation",
	"effective_range",
	"icar_precision",
)

ALLOWED_NU = (0.5, 1.5, 2.5)
EFFECTIVE_RANGE_CORRELATION = 0.05

logger = get_logger("projsglmm.covkernels")


@dataclass(frozen=True)
class MaternParams:
	sigma2: float
	phi: float
	nu: float = 1.5

	def __post_init__(self) -> None:
		if not np.isfinite(self.sigma2) or self.sigma2 <= 0:
			raise ParameterDomainError(f"Marginal variance must be positive, got {self.sigma2}")
		if not np.isfinite(self.phi) or self.phi <= 0:
			raise ParameterDomainError(f"Range parameter phi must be positive, got {self.phi}")
		if float(self.nu) not in ALLOWED_NU:
			raise ParameterDomainError(f"Smoothness nu must be one of {ALLOWED_NU}, got {self.nu}")


@dataclass(frozen=True)
class LatticeGraph:
	n: int
	edges: np.ndarray = field(repr=False)

	def __post_init__(self) -> None:
		edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
		if self.n < 1:
			raise ParameterDomainError(f"Lattice needs at least one node, got {self.n}")
		if edges.size and (edges.min() < 0 or edges.max() >= self.n):
			raise ParameterDomainError(f"Edge index out of range for {self.n} nodes")
		if np.any(edges[:, 0] == edges[:, 1]):
			raise ParameterDomainError("Self loops are not allowed in a lattice graph")
		# undirected, binary: store each pair once as (min, max)
		edges = np.unique(np.sort(edges, axis=1), axis=0)
		object.__setattr__(self, "edges", edges)

	@classmethod
	def grid(cls, rows: int, cols: int) -> LatticeGraph:
		"""Rook adjacency on a rows x cols grid, nodes numbered row by row."""
		index = np.arange(rows * cols).reshape(rows, cols)
		horizontal = np.column_stack((index[:, :-1].ravel(), index[:, 1:].ravel()))
		vertical = np.column_stack((index[:-1, :].ravel(), index[1:, :].ravel()))
		return cls(n=rows * cols, edges=np.vstack((horizontal, vertical)))

	@classmethod
	def read_edge_list(cls, path: Path | str, n: int | None = None) -> LatticeGraph:
		pairs: list[tuple[int, int]] = []
		with open(path, "r", encoding="utf-8") as file:
			for lineno, line in enumerate(file, start=1):
				line = line.strip()
				if not line or line.startswith("#"):
					continue
				parts = line.split()
				if len(parts) != 2:
					raise DatasetFormatError(f"expected 'i j', got '{line}'", line=lineno)
				try:
					pairs.append((int(parts[0]), int(parts[1])))
				except ValueError as err:
					raise DatasetFormatError(f"non-integer node index in '{line}'", line=lineno) from err
		edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)
		if n is None:
			n = int(edges.max()) + 1 if edges.size else 0
		logger.debug("Read %d edges for %d nodes from %s", len(edges), n, path)
		return cls(n=n, edges=edges)

	def write_edge_list(self, path: Path | str) -> None:
		with open(path, "w", encoding="utf-8") as file:
			for i, j in self.edges:
				file.write(f"{i} {j}\n")

	def adjacency(self) -> sparse.csr_matrix:
		rows = np.concatenate((self.edges[:, 0], self.edges[:, 1]))
		cols = np.concatenate((self.edges[:, 1], self.edges[:, 0]))
		data = np.ones(rows.size, dtype=np.int64)
		return sparse.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))

	def n_components(self) -> int:
		count, _labels = connected_components(self.adjacency(), directed=False)
		return int(count)


def _check_distance(h: np.ndarray) -> np.ndarray:
	h = np.asarray(h, dtype=float)
	if np.any(np.isnan(h)):
		raise ParameterDomainError("Distances must not be NaN")
	if np.any(h < 0):
		raise ParameterDomainError("Distances must be non-negative")
	return h


def matern_correlation(h: float | np.ndarray, params: MaternParams) -> float | np.ndarray:
	"""
	Matern correlation C(h) / sigma2 for the half-integer smoothness values.

	Works elementwise on arrays, returns a float for scalar input.
	"""
	dist = _check_distance(h)
	scaled = dist / params.phi
	nu = float(params.nu)
	if nu == 0.5:
		corr = np.exp(-scaled)
	elif nu == 1.5:
		s3 = np.sqrt(3.0) * scaled
		corr = (1.0 + s3) * np.exp(-s3)
	else:
		s5 = np.sqrt(5.0) * scaled
		corr = (1.0 + s5 + s5 * s5 / 3.0) * np.exp(-s5)
	if np.ndim(corr) == 0:
		return float(corr)
	return corr


def _check_locations(locations: np.ndarray) -> np.ndarray:
	locations = np.asarray(locations, dtype=float)
	if locations.ndim == 1:
		locations = locations.reshape(-1, 2)
	if locations.shape[0] < 1:
		raise ParameterDomainError("At least one location is required")
	if not np.all(np.isfinite(locations)):
		raise ParameterDomainError("Location coordinates must be finite (NaN found)")
	return locations


def correlation_matrix(locations: np.ndarray, params: MaternParams) -> np.ndarray:
	locations = _check_locations(locations)
	if locations.shape[0] == 1:
		return np.ones((1, 1))
	corr = squareform(matern_correlation(pdist(locations), params))
	np.fill_diagonal(corr, 1.0)
	return corr


def cross_correlation(locations_a: np.ndarray, locations_b: np.ndarray, params: MaternParams) -> np.ndarray:
	return np.asarray(matern_correlation(cdist(_check_locations(locations_a), _check_locations(locations_b)), params))


def effective_range(params: MaternParams) -> float:
	"""Distance at which the correlation drops to 0.05."""
	upper = params.phi
	while matern_correlation(upper, params) > EFFECTIVE_RANGE_CORRELATION:
		upper *= 2.0
	return float(brentq(lambda h: matern_correlation(h, params) - EFFECTIVE_RANGE_CORRELATION, 0.0, upper))


def icar_precision(graph: LatticeGraph) -> sparse.csr_matrix:
	"""Q = diag(A 1) - A, built in integer arithmetic so that Q 1 = 0 exactly."""
	adjacency = graph.adjacency()
	degree = np.asarray(adjacency.sum(axis=1)).ravel()
	precision = sparse.diags(degree, format="csr", dtype=np.int64) - adjacency
	return precision.astype(float).tocsr()
