# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Synthetic SGLMM datasets.

Continuous designs draw the latent field from the exact Gaussian process on the unit square,
training points at random and test points on a regular grid. Lattice designs draw delta from
the reduced ICAR model on a Moran basis of a rook grid. Covariates are the point coordinates.
All randomness comes from PCG64 streams seeded by `derive_seed(seed, purpose)`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import scipy.linalg
from opsicommon.logging import get_logger

from projsglmm.basis import moran_basis
from projsglmm.covkernels import LatticeGraph, MaternParams, correlation_matrix
from projsglmm.data import SpatialDataset
from projsglmm.exceptions import ParameterDomainError, SglmmError
from projsglmm.families import get_family
from projsglmm.lowrank import derive_seed

__all__ = (
	"SimDesign",
	"SimulatedData",
	"DESIGNS",
	"get_design",
	"grid_locations",
	"lattice_coordinates",
	"gaussian_field",
	"lattice_field",
	"simulate_continuous",
	"simulate_binary_continuous",
	"simulate_lattice",
	"simulate",
)

CHOLESKY_JITTER = 1e-10
EIGENVALUE_FLOOR = 1e-10

# stream purposes
LOCATION_STREAM = 11
FIELD_STREAM = 12
RESPONSE_STREAM = 13

logger = get_logger("projsglmm.sim")


@dataclass(frozen=True)
class SimDesign:
	name: str
	domain: str = "continuous"
	family: str = "poisson-log"
	beta: tuple[float, ...] = (1.0, 1.0)
	sigma2: float | None = 1.0
	phi: float | None = 0.07
	nu: float = 1.5
	tau: float | None = None
	n_train: int = 1000
	test_grid: int = 20
	lattice_side: int = 30
	sim_rank: int = 400
	literal_covariance: bool = False
	seed: int = 0

	def __post_init__(self) -> None:
		get_family(self.family)
		if self.domain not in ("continuous", "lattice"):
			raise ParameterDomainError(f"Unknown domain '{self.domain}'")
		if len(self.beta) != 2:
			raise ParameterDomainError("Designs use the two coordinates as covariates, beta needs two entries")
		if self.domain == "continuous":
			if self.n_train < 1 or self.test_grid < 0:
				raise ParameterDomainError("Training size must be positive and the test grid non-negative")
			if self.sigma2 is None or self.sigma2 < 0 or self.phi is None or self.phi <= 0:
				raise ParameterDomainError("Continuous designs need sigma2 >= 0 and phi > 0")
		else:
			if self.lattice_side < 2 or self.sim_rank < 1:
				raise ParameterDomainError("Lattice designs need a side of at least 2 and a positive rank")
			if self.tau is None or self.tau <= 0:
				raise ParameterDomainError("Lattice designs need tau > 0")

	@property
	def n_test(self) -> int:
		return self.test_grid**2 if self.domain == "continuous" else 0

	@property
	def n_total(self) -> int:
		return self.n_train + self.n_test if self.domain == "continuous" else self.lattice_side**2

	def with_seed(self, seed: int) -> SimDesign:
		return replace(self, seed=int(seed))

	def to_dict(self) -> dict[str, Any]:
		return {key: (list(value) if isinstance(value, tuple) else value) for key, value in self.__dict__.items()}


@dataclass(frozen=True)
class SimulatedData:
	design: SimDesign
	train: SpatialDataset = field(repr=False)
	test: SpatialDataset | None = field(repr=False)
	truth: pd.DataFrame = field(repr=False)

	def write_truth(self, path: Path | str) -> None:
		self.truth.to_csv(path, index=False)
		logger.info("Wrote truth for %d locations to '%s'", len(self.truth), path)


DESIGNS: dict[str, SimDesign] = {
	"s51-r02": SimDesign(name="s51-r02", phi=0.07),
	"s51-r05": SimDesign(name="s51-r05", phi=0.18),
	"s52": SimDesign(name="s52", domain="lattice", sigma2=None, phi=None, tau=3.0, lattice_side=30, sim_rank=400),
	"s3-binary": SimDesign(name="s3-binary", family="bernoulli-logit", phi=0.07),
}


def get_design(name: str, seed: int | None = None, **overrides: Any) -> SimDesign:
	try:
		design = DESIGNS[name]
	except KeyError:
		raise ParameterDomainError(f"Unknown design '{name}', choose one of {', '.join(DESIGNS)}") from None
	if seed is not None:
		overrides["seed"] = seed
	return replace(design, **overrides) if overrides else design


def grid_locations(side: int) -> np.ndarray:
	"""side x side regular grid on the unit square, row by row."""
	if side < 1:
		return np.empty((0, 2))
	axis = np.linspace(0.0, 1.0, side)
	xx, yy = np.meshgrid(axis, axis)
	return np.column_stack((xx.ravel(), yy.ravel()))


def lattice_coordinates(side: int) -> np.ndarray:
	"""Vertex coordinates of a rook grid scaled to the unit square, node i at row i // side."""
	index = np.arange(side * side)
	return np.column_stack((index % side, index // side)).astype(float) / (side - 1)


def gaussian_field(locations: np.ndarray, params: MaternParams, rng: np.random.Generator) -> np.ndarray:
	"""One draw of W ~ N(0, sigma2 R_phi) by dense Cholesky, with a single jitter retry."""
	n = locations.shape[0]
	covariance = params.sigma2 * correlation_matrix(locations, params)
	try:
		factor = scipy.linalg.cholesky(covariance, lower=True)
	except scipy.linalg.LinAlgError:
		logger.warning("Covariance is not numerically positive definite, adding jitter %.0e", CHOLESKY_JITTER)
		try:
			factor = scipy.linalg.cholesky(covariance + CHOLESKY_JITTER * np.eye(n), lower=True)
		except scipy.linalg.LinAlgError as err:
			raise SglmmError("Cholesky factorisation of the field covariance failed") from err
	return factor @ rng.standard_normal(n)


def lattice_field(Qdelta: np.ndarray, tau: float, rng: np.random.Generator, literal_covariance: bool = False) -> np.ndarray:
	"""
	delta ~ N(0, (tau Q_delta)^{-1}), or N(0, tau Q_delta^{-1}) with `literal_covariance`.

	Eigenvalues of Q_delta below the floor are raised to it.
	"""
	values, vectors = scipy.linalg.eigh((Qdelta + Qdelta.T) / 2.0)
	if np.any(values < EIGENVALUE_FLOOR):
		logger.warning("Q_delta is singular, flooring %d eigenvalues at %.0e", int(np.sum(values < EIGENVALUE_FLOOR)), EIGENVALUE_FLOOR)
		values = np.maximum(values, EIGENVALUE_FLOOR)
	scale = np.sqrt(tau / values) if literal_covariance else 1.0 / np.sqrt(tau * values)
	return vectors @ (scale * rng.standard_normal(values.size))


def _rng(design: SimDesign, purpose: int) -> np.random.Generator:
	return np.random.Generator(np.random.PCG64(derive_seed(design.seed, purpose)))


def simulate_continuous(design: SimDesign) -> SimulatedData:
	if design.domain != "continuous":
		raise ParameterDomainError(f"Design '{design.name}' is not continuous")
	assert design.sigma2 is not None and design.phi is not None
	family = get_family(design.family)
	train_locations = _rng(design, LOCATION_STREAM).random((design.n_train, 2))
	locations = np.vstack((train_locations, grid_locations(design.test_grid)))
	if design.sigma2 == 0:
		W = np.zeros(locations.shape[0])
	else:
		W = gaussian_field(locations, MaternParams(design.sigma2, design.phi, design.nu), _rng(design, FIELD_STREAM))
	eta = locations @ np.asarray(design.beta) + W
	z = family.sample(_rng(design, RESPONSE_STREAM), eta)

	train = slice(0, design.n_train)
	test = slice(design.n_train, None)
	train_data = SpatialDataset(z=z[train], X=locations[train], family=family, coords=locations[train])
	test_data = SpatialDataset(z=z[test], X=locations[test], family=family, coords=locations[test]) if design.n_test else None
	truth = pd.DataFrame(
		{
			"set": ["train"] * design.n_train + ["test"] * design.n_test,
			"x": locations[:, 0],
			"y": locations[:, 1],
			"w": W,
			"mu": family.mean(eta),
		}
	)
	logger.info("Simulated design '%s' with %d training and %d test locations", design.name, design.n_train, design.n_test)
	return SimulatedData(design=design, train=train_data, test=test_data, truth=truth)


def simulate_binary_continuous(design: SimDesign) -> SimulatedData:
	return simulate_continuous(replace(design, family="bernoulli-logit"))


def simulate_lattice(design: SimDesign, graph: LatticeGraph | None = None) -> SimulatedData:
	if design.domain != "lattice":
		raise ParameterDomainError(f"Design '{design.name}' is not a lattice design")
	assert design.tau is not None
	family = get_family(design.family)
	side = design.lattice_side
	graph = graph or LatticeGraph.grid(side, side)
	if graph.n != side * side:
		raise ParameterDomainError(f"Graph has {graph.n} nodes, the design needs {side * side}")
	coords = lattice_coordinates(side)
	available = graph.n - coords.shape[1]
	if design.sim_rank > available:
		raise ParameterDomainError(f"Simulation rank {design.sim_rank} exceeds the {available} available Moran eigenvectors")
	basis = moran_basis(graph, coords, design.sim_rank)
	assert basis.Qdelta is not None
	delta = lattice_field(basis.Qdelta, design.tau, _rng(design, FIELD_STREAM), design.literal_covariance)
	W = basis.M @ delta
	eta = coords @ np.asarray(design.beta) + W
	z = family.sample(_rng(design, RESPONSE_STREAM), eta)
	train = SpatialDataset(z=z, X=coords, family=family, graph=graph)
	truth = pd.DataFrame({"set": "train", "node_id": np.arange(graph.n), "x": coords[:, 0], "y": coords[:, 1], "w": W, "mu": family.mean(eta)})
	logger.info("Simulated lattice design '%s' on %d nodes with %d basis vectors", design.name, graph.n, basis.rank)
	return SimulatedData(design=design, train=train, test=None, truth=truth)


def simulate(design: SimDesign) -> SimulatedData:
	if design.domain == "lattice":
		return simulate_lattice(design)
	if design.family == "bernoulli-logit":
		return simulate_binary_continuous(design)
	return simulate_continuous(design)
