"""
proj-sglmm

tests for covariance structures
"""

from pathlib import Path

import numpy as np
import pytest

from projsglmm.covkernels import (
	LatticeGraph,
	MaternParams,
	correlation_matrix,
	cross_correlation,
	effective_range,
	icar_precision,
	matern_correlation,
)
from projsglmm.exceptions import DatasetFormatError, ParameterDomainError


@pytest.mark.parametrize("nu", (0.5, 1.5, 2.5))
def test_matern_at_zero_is_one(nu: float) -> None:
	assert matern_correlation(0.0, MaternParams(1.0, 0.2, nu)) == pytest.approx(1.0)


def test_matern_closed_forms() -> None:
	assert matern_correlation(0.2, MaternParams(1.0, 0.2, 0.5)) == pytest.approx(np.exp(-1.0))
	s3 = np.sqrt(3.0)
	assert matern_correlation(0.2, MaternParams(1.0, 0.2, 1.5)) == pytest.approx((1 + s3) * np.exp(-s3))


def test_matern_decreasing() -> None:
	values = matern_correlation(np.linspace(0.0, 2.0, 50), MaternParams(1.0, 0.3, 2.5))
	assert np.all(np.diff(values) < 0)


@pytest.mark.parametrize(
	("sigma2", "phi", "nu"),
	((1.0, 0.0, 1.5), (1.0, -0.1, 1.5), (0.0, 0.1, 1.5), (1.0, 0.1, 1.0)),
)
def test_matern_params_domain(sigma2: float, phi: float, nu: float) -> None:
	with pytest.raises(ParameterDomainError):
		MaternParams(sigma2, phi, nu)


def test_matern_rejects_negative_distance() -> None:
	with pytest.raises(ParameterDomainError):
		matern_correlation(np.array([0.1, -0.1]), MaternParams(1.0, 0.2))


def test_correlation_matrix() -> None:
	locations = np.random.default_rng(0).random((30, 2))
	corr = correlation_matrix(locations, MaternParams(1.0, 0.1))
	assert corr.shape == (30, 30)
	assert np.allclose(corr, corr.T)
	assert np.allclose(np.diag(corr), 1.0)
	assert np.linalg.eigvalsh(corr)[0] > 0
	assert np.allclose(cross_correlation(locations[:5], locations, MaternParams(1.0, 0.1)), corr[:5])


def test_correlation_matrix_nan() -> None:
	with pytest.raises(ParameterDomainError):
		correlation_matrix(np.array([[0.0, 0.0], [np.nan, 1.0]]), MaternParams(1.0, 0.1))


def test_effective_range_exponential() -> None:
	assert effective_range(MaternParams(1.0, 0.1, 0.5)) == pytest.approx(0.1 * np.log(20.0), rel=1e-6)


def test_grid_graph() -> None:
	graph = LatticeGraph.grid(3, 4)
	assert graph.n == 12
	# 3 * 3 horizontal + 2 * 4 vertical edges
	assert len(graph.edges) == 17
	assert graph.n_components() == 1


def test_icar_precision_rows_sum_to_zero() -> None:
	precision = icar_precision(LatticeGraph.grid(4, 4)).toarray()
	assert np.allclose(precision.sum(axis=1), 0.0)
	assert np.allclose(precision, precision.T)
	assert precision[0, 0] == 2
	assert precision[5, 5] == 4


def test_graph_rejects_self_loop() -> None:
	with pytest.raises(ParameterDomainError):
		LatticeGraph(n=3, edges=np.array([[0, 0]]))


def test_graph_duplicate_edges_collapse() -> None:
	graph = LatticeGraph(n=3, edges=np.array([[0, 1], [1, 0], [1, 2]]))
	assert len(graph.edges) == 2


def test_edge_list_roundtrip(tmp_path: Path) -> None:
	graph = LatticeGraph.grid(3, 3)
	path = tmp_path / "edges.txt"
	graph.write_edge_list(path)
	assert np.array_equal(LatticeGraph.read_edge_list(path, n=9).edges, graph.edges)


def test_edge_list_bad_line(tmp_path: Path) -> None:
	path = tmp_path / "edges.txt"
	path.write_text("0 1\n1 two\n", encoding="utf-8")
	with pytest.raises(DatasetFormatError) as err:
		LatticeGraph.read_edge_list(path)
	assert err.value.line == 2


def test_disconnected_graph_components() -> None:
	graph = LatticeGraph(n=4, edges=np.array([[0, 1], [2, 3]]))
	assert graph.n_components() == 2
