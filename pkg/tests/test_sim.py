"""
proj-sglmm

tests for the simulation designs
"""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from projsglmm.exceptions import ParameterDomainError
from projsglmm.sim import DESIGNS, get_design, grid_locations, lattice_coordinates, lattice_field, simulate


def test_designs() -> None:
	assert DESIGNS["s51-r02"].phi == 0.07
	assert DESIGNS["s51-r05"].phi == 0.18
	assert DESIGNS["s52"].tau == 3.0
	assert DESIGNS["s52"].n_total == 900
	assert DESIGNS["s51-r02"].n_total == 1400
	assert DESIGNS["s3-binary"].family == "bernoulli-logit"


def test_get_design_overrides() -> None:
	design = get_design("s51-r02", seed=4, n_train=50, test_grid=3)
	assert design.seed == 4
	assert design.n_test == 9
	with pytest.raises(ParameterDomainError):
		get_design("nope")
	with pytest.raises(ParameterDomainError):
		get_design("s52", tau=-1.0)


def test_grid_locations() -> None:
	grid = grid_locations(3)
	assert grid.shape == (9, 2)
	assert grid.min() == 0.0
	assert grid.max() == 1.0
	assert grid_locations(0).shape == (0, 2)


def test_lattice_coordinates_row_major() -> None:
	coords = lattice_coordinates(3)
	assert coords[1].tolist() == [0.5, 0.0]
	assert coords[3].tolist() == [0.0, 0.5]


def test_simulate_continuous_is_reproducible() -> None:
	design = get_design("s51-r02", seed=1, n_train=60, test_grid=4)
	first = simulate(design)
	second = simulate(design)
	assert np.array_equal(first.train.z, second.train.z)
	assert first.train.n == 60
	assert first.test.n == 16
	assert len(first.truth) == 76
	assert set(first.truth["set"]) == {"train", "test"}
	assert np.all(first.train.z >= 0)
	assert not np.array_equal(simulate(design.with_seed(2)).train.z, first.train.z)


def test_simulate_binary() -> None:
	data = simulate(get_design("s3-binary", n_train=40, test_grid=0))
	assert set(np.unique(data.train.z)) <= {0.0, 1.0}
	assert data.test is None


def test_simulate_zero_variance_field() -> None:
	data = simulate(get_design("s51-r02", sigma2=0.0, n_train=20, test_grid=2))
	assert np.all(data.truth["w"] == 0.0)


def test_simulate_lattice(tmp_path: Path) -> None:
	data = simulate(get_design("s52", lattice_side=6, sim_rank=5))
	assert data.train.domain == "lattice"
	assert data.train.n == 36
	assert list(data.truth.columns) == ["set", "node_id", "x", "y", "w", "mu"]
	# the field lies in the span of the Moran basis, orthogonal to the covariates
	assert np.allclose(data.train.X.T @ data.truth["w"].to_numpy(), 0.0, atol=1e-8)
	data.write_truth(tmp_path / "truth.csv")
	assert len(pd.read_csv(tmp_path / "truth.csv")) == 36


def test_simulate_lattice_rank_too_large() -> None:
	with pytest.raises(ParameterDomainError):
		simulate(get_design("s52", lattice_side=4, sim_rank=15))


def test_lattice_field_parameterisations() -> None:
	Qdelta = np.diag([1.0, 4.0])
	precision_draws = np.array([lattice_field(Qdelta, 2.0, np.random.default_rng(seed)) for seed in range(4000)])
	assert np.allclose(precision_draws.var(axis=0), [1 / 2.0, 1 / 8.0], rtol=0.1)
	literal = np.array([lattice_field(Qdelta, 2.0, np.random.default_rng(seed), literal_covariance=True) for seed in range(4000)])
	assert np.allclose(literal.var(axis=0), [2.0, 0.5], rtol=0.1)
