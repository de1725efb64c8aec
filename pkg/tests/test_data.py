"""
proj-sglmm

tests for dataset ingestion
"""

from pathlib import Path

import numpy as np
import pytest

from projsglmm.covkernels import LatticeGraph
from projsglmm.data import DatasetSchema, SpatialDataset, ingest_dataset, write_dataset
from projsglmm.exceptions import DatasetFormatError, ParameterDomainError


def test_ingest_continuous(tmp_path: Path) -> None:
	path = tmp_path / "data.csv"
	path.write_text("x,y,z,offset,elev\n0.1,0.2,3,0.0,1.5\n0.5,0.5,0,0.1,2.5\n", encoding="utf-8")
	data = ingest_dataset(path, DatasetSchema(intercept=True))
	assert data.domain == "continuous"
	assert data.covariate_names == ("intercept", "elev")
	assert data.X[:, 0].tolist() == [1.0, 1.0]
	assert data.offset.tolist() == [0.0, 0.1]
	assert data.coords.shape == (2, 2)


def test_ingest_missing_column(tmp_path: Path) -> None:
	path = tmp_path / "data.csv"
	path.write_text("x,z\n0.1,3\n", encoding="utf-8")
	with pytest.raises(DatasetFormatError) as err:
		ingest_dataset(path, DatasetSchema())
	assert err.value.line == 1
	assert "y" in str(err.value)


def test_ingest_non_numeric_reports_line(tmp_path: Path) -> None:
	path = tmp_path / "data.csv"
	path.write_text("x,y,z\n0.1,0.2,3\n0.3,abc,1\n", encoding="utf-8")
	with pytest.raises(DatasetFormatError) as err:
		ingest_dataset(path, DatasetSchema())
	assert err.value.line == 3


def test_ingest_response_outside_support(tmp_path: Path) -> None:
	path = tmp_path / "data.csv"
	path.write_text("x,y,z\n0.1,0.2,1\n0.3,0.4,2\n", encoding="utf-8")
	with pytest.raises(DatasetFormatError) as err:
		ingest_dataset(path, DatasetSchema(family="bernoulli-logit"))
	assert err.value.line == 3


def test_ingest_lattice(tmp_path: Path) -> None:
	graph = LatticeGraph.grid(2, 2)
	edges = tmp_path / "edges.txt"
	graph.write_edge_list(edges)
	path = tmp_path / "data.csv"
	path.write_text("node_id,z,a\n2,5,0.3\n0,1,0.1\n1,2,0.2\n3,0,0.4\n", encoding="utf-8")
	data = ingest_dataset(path, DatasetSchema(domain="lattice"), edges=edges)
	assert data.domain == "lattice"
	assert data.z.tolist() == [1.0, 2.0, 5.0, 0.0]
	assert data.X[:, 0].tolist() == [0.1, 0.2, 0.3, 0.4]
	with pytest.raises(DatasetFormatError):
		ingest_dataset(path, DatasetSchema(domain="lattice"))


def test_write_and_read_back(tmp_path: Path) -> None:
	rng = np.random.default_rng(0)
	coords = rng.random((5, 2))
	data = SpatialDataset(z=np.arange(5.0), X=coords, family="poisson-log", coords=coords)
	path = tmp_path / "data.csv"
	write_dataset(data, path)
	restored = ingest_dataset(path, DatasetSchema())
	assert restored.covariate_names == ("x1", "x2")
	assert np.allclose(restored.X, data.X)
	assert np.array_equal(restored.z, data.z)


def test_dataset_needs_exactly_one_geometry() -> None:
	with pytest.raises(ParameterDomainError):
		SpatialDataset(z=np.ones(3), X=np.ones((3, 1)), family="poisson-log")
	with pytest.raises(ParameterDomainError):
		SpatialDataset(z=np.ones(3), X=np.ones((2, 1)), family="poisson-log", coords=np.zeros((3, 2)))
