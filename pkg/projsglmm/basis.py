# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Reduced-rank random-effect bases orthogonal to the fixed-effect design.

Continuous domain: M = P_perp U D^{1/2} from the leading eigenpairs of R_phi.
Lattice domain: leading eigenvectors of the Moran operator P_perp A P_perp with
reduced precision Q_delta = M^T Q M.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
from opsicommon.logging import get_logger

from projsglmm.covkernels import LatticeGraph, MaternParams, correlation_matrix, icar_precision
from projsglmm.data import SpatialDataset
from projsglmm.exceptions import ParameterDomainError, RankDeficientDesignError
from projsglmm.lowrank import EigenPair, Eigensolver

__all__ = (
	"ProjectionBasis",
	"residual_projector_apply",
	"continuous_basis",
	"continuous_basis_from_eigen",
	"moran_basis",
	"fix_signs",
	"build_basis",
)

RANK_TOLERANCE = 1e-10
POSITIVE_MORAN_TOLERANCE = 1e-10

logger = get_logger("projsglmm.basis")


@dataclass(frozen=True)
class ProjectionBasis:
	domain: str
	M: np.ndarray = field(repr=False)
	U: np.ndarray = field(repr=False)
	D: np.ndarray = field(repr=False)
	Qdelta: np.ndarray | None = field(default=None, repr=False)
	phi: float | None = None
	nu: float | None = None
	regularized: bool = False

	@property
	def rank(self) -> int:
		return int(self.M.shape[1])

	@property
	def q(self) -> int:
		return self.rank

	def prior_precision(self, sigma2: float | None = None, tau: float | None = None) -> np.ndarray:
		"""Precision of delta: I / sigma2 (continuous) or tau Q_delta (lattice)."""
		if self.domain == "continuous":
			if sigma2 is None:
				raise ParameterDomainError("Continuous basis needs sigma2 for the prior precision")
			return np.eye(self.rank) / sigma2
		if tau is None:
			raise ParameterDomainError("Lattice basis needs tau for the prior precision")
		assert self.Qdelta is not None
		return tau * self.Qdelta

	def quadratic_form(self, deltas: np.ndarray) -> np.ndarray:
		"""Per-row delta^T Q_delta delta (Q_delta = I in the continuous case)."""
		deltas = np.atleast_2d(deltas)
		if self.Qdelta is None:
			return np.einsum("ij,ij->i", deltas, deltas)
		return np.einsum("ij,jk,ik->i", deltas, self.Qdelta, deltas)


def _design_factor(X: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
	"""Orthonormal basis of span(X); raises naming the first dependent column."""
	_q, r, _perm = scipy.linalg.qr(X, mode="economic", pivoting=True)
	diag = np.abs(np.diag(r))
	scale = diag[0] if diag.size else 0.0
	if diag.size and (scale == 0.0 or diag[-1] <= RANK_TOLERANCE * scale * max(X.shape)):
		# locate the offending column in the original ordering
		for column in range(X.shape[1]):
			sub_r = scipy.linalg.qr(X[:, : column + 1], mode="r")[0]
			sub_diag = np.abs(np.diag(sub_r))
			if sub_diag[-1] <= RANK_TOLERANCE * max(float(np.max(sub_diag)), 1e-300) * max(X.shape):
				name = names[column] if names is not None and column < len(names) else None
				label = f"'{name}' " if name else ""
				raise RankDeficientDesignError(f"Design column {column} {label}is linearly dependent on the previous columns", column, name)
	q, _r = scipy.linalg.qr(X, mode="economic")
	return q


def residual_projector_apply(X: np.ndarray, V: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
	"""Returns (I - X (X^T X)^{-1} X^T) V."""
	V = np.asarray(V, dtype=float)
	X = np.asarray(X, dtype=float)
	if X.ndim != 2 or X.shape[1] == 0:
		return V.copy()
	if X.shape[0] != V.shape[0]:
		raise ParameterDomainError(f"Design has {X.shape[0]} rows but the matrix has {V.shape[0]}")
	q = _design_factor(X, names)
	return V - q @ (q.T @ V)


def continuous_basis_from_eigen(eigen: EigenPair, X: np.ndarray, phi: float, nu: float) -> ProjectionBasis:
	values = np.clip(eigen.values, 0.0, None)
	scaled = eigen.vectors * np.sqrt(values)
	return ProjectionBasis(
		domain="continuous",
		M=residual_projector_apply(X, scaled),
		U=eigen.vectors,
		D=values,
		phi=float(phi),
		nu=float(nu),
		regularized=eigen.regularized,
	)


def continuous_basis(
	locations: np.ndarray,
	X: np.ndarray,
	params: MaternParams,
	m: int,
	eigensolver: Eigensolver | None = None,
	stream: Sequence[int] = (),
) -> ProjectionBasis:
	eigensolver = eigensolver or Eigensolver()
	locations = np.asarray(locations, dtype=float)
	if m > locations.shape[0]:
		raise ParameterDomainError(f"Rank {m} exceeds the number of locations {locations.shape[0]}")
	eigen = eigensolver(correlation_matrix(locations, params), m, stream=stream)
	logger.debug("Continuous basis phi=%.5g rank=%d, leading eigenvalue %.5g", params.phi, m, eigen.values[0])
	return continuous_basis_from_eigen(eigen, X, params.phi, params.nu)


def fix_signs(vectors: np.ndarray) -> np.ndarray:
	"""Flip columns so that the entry of largest magnitude is positive."""
	if vectors.size == 0:
		return vectors
	pivots = np.argmax(np.abs(vectors), axis=0)
	signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
	signs[signs == 0] = 1.0
	return vectors * signs


def moran_basis(graph: LatticeGraph, X: np.ndarray, m: int, names: Sequence[str] | None = None) -> ProjectionBasis:
	X = np.asarray(X, dtype=float)
	p = X.shape[1] if X.ndim == 2 else 0
	if m > graph.n - p:
		raise ParameterDomainError(f"Rank {m} exceeds n - p = {graph.n - p}")
	adjacency = graph.adjacency().toarray().astype(float)
	operator = residual_projector_apply(X, adjacency, names)
	operator = residual_projector_apply(X, operator.T, names).T
	operator = (operator + operator.T) / 2.0

	values, vectors = scipy.linalg.eigh(operator)
	order = np.argsort(values)[::-1]
	values = values[order]
	vectors = vectors[:, order]
	positive = int(np.sum(values > POSITIVE_MORAN_TOLERANCE * max(values[0], 1.0)))
	if m > positive:
		logger.warning("Requested rank %d exceeds the %d positive Moran eigenvalues, truncating the basis", m, positive)
		m = max(positive, 1)
	basis = fix_signs(vectors[:, :m])

	precision = icar_precision(graph)
	qdelta = basis.T @ (precision @ basis)
	qdelta = (qdelta + qdelta.T) / 2.0
	return ProjectionBasis(domain="lattice", M=basis, U=basis, D=values[:m], Qdelta=qdelta)


def build_basis(
	data: SpatialDataset,
	rank: int,
	phi: float | None = None,
	nu: float = 1.5,
	eigensolver: Eigensolver | None = None,
	stream: Sequence[int] = (),
) -> ProjectionBasis:
	"""Continuous basis at range `phi` or Moran basis, depending on the dataset domain."""
	if data.domain == "lattice":
		assert data.graph is not None
		return moran_basis(data.graph, data.X, rank, data.covariate_names)
	if phi is None:
		raise ParameterDomainError("A continuous basis needs the range parameter phi")
	assert data.coords is not None
	return continuous_basis(data.coords, data.X, MaternParams(1.0, phi, nu), rank, eigensolver, stream)
