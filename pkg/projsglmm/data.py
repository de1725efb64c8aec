# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Spatial datasets and their CSV representation.

Continuous schema: x, y, z, optional offset, covariate columns.
Lattice schema: node_id, z, optional offset, covariate columns, plus an edge list.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from opsicommon.logging import get_logger

from projsglmm.covkernels import LatticeGraph
from projsglmm.exceptions import DatasetFormatError, ParameterDomainError
from projsglmm.families import ResponseFamily, get_family

__all__ = ("SpatialDataset", "DatasetSchema", "ingest_dataset", "write_dataset")

CONTINUOUS_COLUMNS = ("x", "y", "z")
LATTICE_COLUMNS = ("node_id", "z")
# data rows start on line 2, below the header
FIRST_DATA_LINE = 2

logger = get_logger("projsglmm.data")


@dataclass(frozen=True)
class SpatialDataset:
	z: np.ndarray = field(repr=False)
	X: np.ndarray = field(repr=False)
	family: ResponseFamily
	offset: np.ndarray | None = field(default=None, repr=False)
	coords: np.ndarray | None = field(default=None, repr=False)
	graph: LatticeGraph | None = None
	covariate_names: tuple[str, ...] = ()

	def __post_init__(self) -> None:
		z = np.asarray(self.z, dtype=float).ravel()
		X = np.asarray(self.X, dtype=float)
		if X.ndim == 1:
			X = X.reshape(-1, 1)
		if X.shape[0] != z.size:
			raise ParameterDomainError(f"Design has {X.shape[0]} rows for {z.size} responses")
		offset = np.zeros(z.size) if self.offset is None else np.asarray(self.offset, dtype=float).ravel()
		if offset.size != z.size:
			raise ParameterDomainError(f"Offset has {offset.size} entries for {z.size} responses")
		if not np.all(np.isfinite(offset)) or not np.all(np.isfinite(X)):
			raise ParameterDomainError("Covariates and offsets must be finite")
		if (self.coords is None) == (self.graph is None):
			raise ParameterDomainError("A dataset needs either point coordinates or a lattice graph")
		family = get_family(self.family)
		family.validate(z)
		object.__setattr__(self, "family", family)
		object.__setattr__(self, "z", z)
		object.__setattr__(self, "X", X)
		object.__setattr__(self, "offset", offset)
		if self.coords is not None:
			coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
			if coords.shape[0] != z.size:
				raise ParameterDomainError(f"{coords.shape[0]} coordinates for {z.size} responses")
			if not np.all(np.isfinite(coords)):
				raise ParameterDomainError("Location coordinates must be finite (NaN found)")
			object.__setattr__(self, "coords", coords)
		elif self.graph is not None and self.graph.n != z.size:
			raise ParameterDomainError(f"Lattice has {self.graph.n} nodes for {z.size} responses")
		names = tuple(self.covariate_names) or tuple(f"x{index + 1}" for index in range(X.shape[1]))
		if len(names) != X.shape[1]:
			raise ParameterDomainError(f"{len(names)} covariate names for {X.shape[1]} columns")
		object.__setattr__(self, "covariate_names", names)

	@property
	def domain(self) -> str:
		return "continuous" if self.coords is not None else "lattice"

	@property
	def n(self) -> int:
		return int(self.z.size)

	@property
	def p(self) -> int:
		return int(self.X.shape[1])

	def base_predictor(self, beta: np.ndarray) -> np.ndarray:
		assert self.offset is not None
		return self.X @ np.asarray(beta, dtype=float) + self.offset

	def with_responses(self, z: np.ndarray) -> SpatialDataset:
		return replace(self, z=np.asarray(z, dtype=float))

	def to_frame(self) -> pd.DataFrame:
		columns: dict[str, np.ndarray] = {}
		if self.coords is not None:
			columns["x"] = self.coords[:, 0]
			columns["y"] = self.coords[:, 1]
		else:
			columns["node_id"] = np.arange(self.n)
		columns["z"] = self.z.astype(np.int64)
		assert self.offset is not None
		if np.any(self.offset != 0):
			columns["offset"] = self.offset
		for index, name in enumerate(self.covariate_names):
			columns[name] = self.X[:, index]
		return pd.DataFrame(columns)


@dataclass(frozen=True)
class DatasetSchema:
	domain: str = "continuous"
	family: str = "poisson-log"
	covariates: tuple[str, ...] | None = None
	intercept: bool = False

	def __post_init__(self) -> None:
		if self.domain not in ("continuous", "lattice"):
			raise ParameterDomainError(f"Unknown domain '{self.domain}'")


def _numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
	values = pd.to_numeric(frame[column].str.strip(), errors="coerce")
	bad = np.flatnonzero(values.isna().to_numpy())
	if bad.size:
		row = int(bad[0])
		raise DatasetFormatError(f"non-numeric value '{frame[column].iloc[row]}' in column '{column}'", line=row + FIRST_DATA_LINE)
	return values.to_numpy(dtype=float)


def ingest_dataset(csv_path: Path | str, schema: DatasetSchema, edges: Path | str | None = None) -> SpatialDataset:
	csv_path = Path(csv_path)
	logger.info("Reading %s dataset from '%s'", schema.domain, csv_path)
	try:
		frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False, skipinitialspace=True)
	except (pd.errors.ParserError, pd.errors.EmptyDataError) as err:
		raise DatasetFormatError(f"Failed to parse '{csv_path}': {err}") from err
	frame.columns = [str(column).strip() for column in frame.columns]

	required = CONTINUOUS_COLUMNS if schema.domain == "continuous" else LATTICE_COLUMNS
	missing = [column for column in required if column not in frame.columns]
	if missing:
		raise DatasetFormatError(f"missing column(s) {', '.join(missing)} in header", line=1)
	if frame.empty:
		raise DatasetFormatError(f"'{csv_path}' contains no data rows")

	covariates = schema.covariates
	if covariates is None:
		covariates = tuple(column for column in frame.columns if column not in required and column != "offset")
	for column in covariates:
		if column not in frame.columns:
			raise DatasetFormatError(f"missing covariate column '{column}' in header", line=1)

	z = _numeric_column(frame, "z")
	family = get_family(schema.family)
	bad = np.flatnonzero(family.check_support(z))
	if bad.size:
		row = int(bad[0])
		raise DatasetFormatError(f"response {z[row]} outside the support of {family.name}", line=row + FIRST_DATA_LINE)

	offset = _numeric_column(frame, "offset") if "offset" in frame.columns else None
	design = [_numeric_column(frame, column) for column in covariates]
	names = tuple(covariates)
	if schema.intercept:
		design.insert(0, np.ones(z.size))
		names = ("intercept", *names)
	X = np.column_stack(design) if design else np.empty((z.size, 0))

	if schema.domain == "continuous":
		coords = np.column_stack((_numeric_column(frame, "x"), _numeric_column(frame, "y")))
		dataset = SpatialDataset(z=z, X=X, family=family, offset=offset, coords=coords, covariate_names=names)
	else:
		if edges is None:
			raise DatasetFormatError("lattice datasets need an edge list")
		node_ids = _numeric_column(frame, "node_id")
		order = np.argsort(node_ids, kind="stable")
		if not np.array_equal(node_ids[order], np.arange(z.size)):
			raise DatasetFormatError(f"node_id must enumerate 0..{z.size - 1} exactly once")
		graph = LatticeGraph.read_edge_list(edges, n=z.size)
		if graph.n_components() > 1:
			logger.warning("Lattice graph has %d connected components", graph.n_components())
		dataset = SpatialDataset(
			z=z[order],
			X=X[order],
			family=family,
			offset=None if offset is None else offset[order],
			graph=graph,
			covariate_names=names,
		)
	logger.info("Read %d observations with %d covariates", dataset.n, dataset.p)
	return dataset


def write_dataset(dataset: SpatialDataset, csv_path: Path | str, edges: Path | str | None = None) -> None:
	frame = dataset.to_frame()
	if "intercept" in frame.columns:
		frame = frame.drop(columns="intercept")
	frame.to_csv(csv_path, index=False)
	if dataset.graph is not None and edges is not None:
		dataset.graph.write_edge_list(edges)
	logger.debug("Wrote %d rows to '%s'", dataset.n, csv_path)


