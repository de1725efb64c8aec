# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Leading eigencomponents of PSD matrices.

Exact decomposition for moderate n, probabilistic Nystrom approximation
(random projection followed by a Nystrom extension) above a size threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.linalg
from opsicommon.logging import get_logger

from projsglmm.exceptions import AsymmetricMatrixError, ParameterDomainError

__all__ = (
	"EigenPair",
	"NystromConfig",
	"Eigensolver",
	"exact_top_eigs",
	"nystrom_top_eigs",
	"derive_seed",
)

SYMMETRY_TOLERANCE = 1e-8
SINGULAR_RATIO = 1e-12
REGULARIZATION = 1e-10
DEFAULT_DISPATCH_THRESHOLD = 2000

logger = get_logger("projsglmm.lowrank")


def derive_seed(seed: int, *keys: int) -> int:
	"""Deterministic 64-bit seed for the stream identified by (seed, keys...)."""
	return int(np.random.SeedSequence([int(seed), *(int(key) for key in keys)]).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class EigenPair:
	vectors: np.ndarray = field(repr=False)
	values: np.ndarray
	regularized: bool = False

	@property
	def rank(self) -> int:
		return int(self.values.size)


@dataclass(frozen=True)
class NystromConfig:
	rank: int
	oversample: int | None = None
	power: int = 1
	seed: int = 0

	def __post_init__(self) -> None:
		if self.rank < 1:
			raise ParameterDomainError(f"Rank must be at least 1, got {self.rank}")
		if self.oversample is None:
			object.__setattr__(self, "oversample", self.rank)
		if self.oversample < 0:
			raise ParameterDomainError(f"Oversampling must be non-negative, got {self.oversample}")
		if self.power not in (0, 1, 2):
			raise ParameterDomainError(f"Power exponent must be 0, 1 or 2, got {self.power}")

	@property
	def width(self) -> int:
		return self.rank + int(self.oversample or 0)


def _check_symmetric(matrix: np.ndarray) -> np.ndarray:
	matrix = np.asarray(matrix, dtype=float)
	if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
		raise ParameterDomainError(f"Expected a square matrix, got shape {matrix.shape}")
	scale = max(1.0, float(np.max(np.abs(matrix)))) if matrix.size else 1.0
	if matrix.size and np.max(np.abs(matrix - matrix.T)) > SYMMETRY_TOLERANCE * scale:
		raise AsymmetricMatrixError("Matrix is not symmetric")
	return matrix


def exact_top_eigs(K: np.ndarray, m: int) -> EigenPair:
	K = _check_symmetric(K)
	n = K.shape[0]
	if not 1 <= m <= n:
		raise ParameterDomainError(f"Rank {m} outside 1..{n}")
	values, vectors = scipy.linalg.eigh(K, subset_by_index=[n - m, n - 1])
	order = np.argsort(values)[::-1]
	values = np.clip(values[order], 0.0, None)
	return EigenPair(vectors=np.ascontiguousarray(vectors[:, order]), values=values)


def nystrom_top_eigs(K: np.ndarray, cfg: NystromConfig) -> EigenPair:
	"""
	Probabilistic Nystrom approximation of the leading `cfg.rank` eigenpairs.

	Omega has iid N(0, 1/(m+l)) entries (standard deviation 1/sqrt(m+l)),
	Phi = K^a Omega, K1 = Phi^T K Phi, C = K Phi V11 L11^{-1/2}; the left singular
	vectors of C give orthonormal eigenvector estimates and the squared singular
	values the eigenvalues.
	"""
	K = _check_symmetric(K)
	n = K.shape[0]
	m = cfg.rank
	width = cfg.width
	if n <= width:
		raise ParameterDomainError(f"Nystrom approximation needs n > m + l, got n={n}, m + l={width}")

	rng = np.random.default_rng(cfg.seed)
	phi = rng.normal(0.0, 1.0 / np.sqrt(width), size=(n, width))
	for _ in range(cfg.power):
		phi = K @ phi
	k_phi = K @ phi
	core = phi.T @ k_phi
	core = (core + core.T) / 2.0

	regularized = False
	core_values, core_vectors = scipy.linalg.eigh(core)
	if core_values[0] <= SINGULAR_RATIO * max(core_values[-1], 0.0):
		ridge = REGULARIZATION * float(np.trace(core)) / width
		logger.warning("Nystrom core matrix is numerically singular, adding %.3g to its diagonal", ridge)
		core[np.diag_indices_from(core)] += ridge
		core_values, core_vectors = scipy.linalg.eigh(core)
		regularized = True
	core_values = np.clip(core_values, np.finfo(float).tiny, None)

	extension = k_phi @ (core_vectors / np.sqrt(core_values))
	left, singular, _vt = scipy.linalg.svd(extension, full_matrices=False)
	values = np.clip(singular[:m] ** 2, 0.0, None)
	return EigenPair(vectors=np.ascontiguousarray(left[:, :m]), values=values, regularized=regularized)


@dataclass(frozen=True)
class Eigensolver:
	"""
	Chooses between the exact and the Nystrom decomposition.

	`method` is one of "auto", "exact" and "nystrom"; "auto" switches to Nystrom
	above `dispatch_threshold` rows.
	"""

	method: str = "auto"
	dispatch_threshold: int = DEFAULT_DISPATCH_THRESHOLD
	oversample: int | None = None
	power: int = 1
	seed: int = 0

	def __post_init__(self) -> None:
		if self.method not in ("auto", "exact", "nystrom"):
			raise ParameterDomainError(f"Unknown eigen method '{self.method}'")

	def with_seed(self, seed: int) -> Eigensolver:
		return replace(self, seed=seed)

	def uses_nystrom(self, n: int) -> bool:
		return self.method == "nystrom" or (self.method == "auto" and n > self.dispatch_threshold)

	def __call__(self, K: np.ndarray, m: int, stream: Sequence[int] = ()) -> EigenPair:
		if not self.uses_nystrom(K.shape[0]):
			return exact_top_eigs(K, m)
		cfg = NystromConfig(rank=m, oversample=self.oversample, power=self.power, seed=derive_seed(self.seed, *stream))
		return nystrom_top_eigs(K, cfg)
