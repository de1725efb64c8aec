# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Run artifacts: fit report, trace, predictions, manifest and error report.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from opsicommon.logging import get_logger

from projsglmm.basis import ProjectionBasis
from projsglmm.em.Bootstrap import BootstrapResult, bootstrap_summary
from projsglmm.em.Laplace import LaplaceState
from projsglmm.em.State import FitResult, ModelState
from projsglmm.exceptions import ConfigurationError
from projsglmm.mcmc import McmcBatch
from projsglmm.predict import PredictionResult

__all__ = (
	"SCHEMA_VERSION",
	"REPORT_FILE",
	"TRACE_FILE",
	"PREDICTIONS_FILE",
	"MANIFEST_FILE",
	"ERROR_FILE",
	"FIT_FILE",
	"SavedFit",
	"fit_report",
	"write_json",
	"write_report",
	"write_trace",
	"write_predictions",
	"sha256_file",
	"build_manifest",
	"write_manifest",
	"read_manifest",
	"verify_inputs",
	"error_report",
	"write_error",
	"save_fit",
	"load_fit",
)

SCHEMA_VERSION = 1
REPORT_FILE = "report.json"
TRACE_FILE = "trace.csv"
PREDICTIONS_FILE = "predictions.csv"
MANIFEST_FILE = "manifest.json"
ERROR_FILE = "error.json"
FIT_FILE = "fit.npz"

logger = get_logger("projsglmm.em.report")


def _number(value: Any) -> Any:
	"""JSON-safe float: NaN and infinities become None."""
	if value is None:
		return None
	value = float(value)
	return value if np.isfinite(value) else None


def fit_report(
	fit: FitResult, covariate_names: tuple[str, ...], bootstrap: BootstrapResult | None = None, level: float = 0.95
) -> dict[str, Any]:
	estimate = fit.estimate
	names = estimate.names(covariate_names)
	values = estimate.vector()
	estimates = {name: float(value) for name, value in zip(names, values)}

	inference: dict[str, Any] = {"level": level, "preferred": "bootstrap" if bootstrap is not None else "observed-information"}
	info = fit.observed_info
	if info is not None:
		# phi has no analytic derivative and is left out of the information matrix
		index = [names.index(name) for name in info.names]
		se = info.standard_errors()
		intervals = info.wald_intervals(values[index], level)
		inference["observed_information"] = {
			"positive_definite": info.positive_definite,
			"parameters": {
				name: {"se": _number(se[pos]), "lower": _number(intervals[pos, 0]), "upper": _number(intervals[pos, 1])}
				for pos, name in enumerate(info.names)
			},
		}
	if bootstrap is not None:
		summary = bootstrap_summary(bootstrap, level)
		inference["bootstrap"] = {
			"replicates": bootstrap.replicates,
			"failures": bootstrap.failures,
			"parameters": {name: {key: _number(value) for key, value in entry.items()} for name, entry in summary.items()},
		}

	last = fit.trace[-1] if fit.trace else None
	return {
		"schema_version": SCHEMA_VERSION,
		"algorithm": fit.algorithm,
		"domain": estimate.domain,
		"family": fit.config.get("family"),
		"rank": fit.rank,
		"estimates": estimates,
		"inference": inference,
		"stopping": {
			"stopped_by": fit.stopped_by,
			"iterations": fit.iterations,
			"final_sample_size": last.k if last else 0,
			"final_dq": _number(last.dq) if last else None,
			"final_ase": _number(last.ase) if last else None,
		},
		"timings": {"wall_time": fit.wall_time},
		"basis": {"phi": _number(fit.basis.phi), "nu": _number(fit.basis.nu), "regularized": fit.basis.regularized},
		"config": fit.config,
	}


def write_json(path: Path, content: dict[str, Any]) -> None:
	path.write_text(json.dumps(content, indent=2, sort_keys=True, default=_number) + "\n", encoding="utf-8")


def write_report(output_dir: Path, report: dict[str, Any]) -> Path:
	path = output_dir / REPORT_FILE
	write_json(path, report)
	logger.notice("Wrote fit report to '%s'", path)
	return path


def write_trace(output_dir: Path, fit: FitResult) -> Path:
	path = output_dir / TRACE_FILE
	fit.trace_frame().to_csv(path, index=False)
	logger.info("Wrote %d trace rows to '%s'", len(fit.trace), path)
	return path


def write_predictions(output_dir: Path, result: PredictionResult) -> Path:
	path = output_dir / PREDICTIONS_FILE
	result.to_frame().to_csv(path, index=False)
	logger.notice("Wrote %d predictions to '%s'", result.latent_mean.size, path)
	return path


def sha256_file(path: Path | str) -> str:
	digest = hashlib.sha256()
	with open(path, "rb") as file:
		for chunk in iter(lambda: file.read(1024 * 1024), b""):
			digest.update(chunk)
	return digest.hexdigest()


def build_manifest(command: str, arguments: dict[str, Any], config: dict[str, Any], inputs: dict[str, Path], outputs: list[Path]) -> dict[str, Any]:
	from projsglmm import __version__  # pylint: disable=import-outside-toplevel

	return {
		"schema_version": SCHEMA_VERSION,
		"code_version": __version__,
		"python": sys.version.split()[0],
		"command": command,
		"arguments": arguments,
		"config": config,
		"seed": config.get("seed"),
		"inputs": {name: {"path": str(path), "sha256": sha256_file(path)} for name, path in inputs.items()},
		"outputs": {path.name: sha256_file(path) for path in outputs if path.is_file()},
	}


def write_manifest(output_dir: Path, manifest: dict[str, Any]) -> Path:
	path = output_dir / MANIFEST_FILE
	write_json(path, manifest)
	logger.info("Wrote manifest to '%s'", path)
	return path


def read_manifest(path: Path | str) -> dict[str, Any]:
	path = Path(path)
	try:
		manifest = json.loads(path.read_text(encoding="utf-8"))
	except (OSError, json.JSONDecodeError) as err:
		raise ConfigurationError(f"Failed to read manifest '{path}': {err}") from err
	if manifest.get("schema_version") != SCHEMA_VERSION:
		raise ConfigurationError(f"Manifest '{path}' has schema version {manifest.get('schema_version')}, expected {SCHEMA_VERSION}")
	return manifest


def verify_inputs(manifest: dict[str, Any]) -> None:
	"""Raises if an input recorded in the manifest is missing or changed."""
	for name, entry in manifest.get("inputs", {}).items():
		path = Path(entry["path"])
		if not path.is_file():
			raise ConfigurationError(f"Input '{name}' recorded in the manifest is missing: {path}")
		if sha256_file(path) != entry["sha256"]:
			raise ConfigurationError(f"Input '{name}' changed since the manifest was written: {path}")


def error_report(error: BaseException) -> dict[str, Any]:
	chain = []
	current: BaseException | None = error
	while current is not None and len(chain) < 20:
		entry: dict[str, Any] = {"type": type(current).__name__, "message": str(current)}
		for attribute in ("line", "column", "column_name", "iterations", "failures", "replicates"):
			value = getattr(current, attribute, None)
			if value is not None:
				entry[attribute] = value
		trace = getattr(current, "trace", None)
		if trace:
			entry["completed_iterations"] = len(trace)
		chain.append(entry)
		current = current.__cause__ or current.__context__
	return {"schema_version": SCHEMA_VERSION, "type": type(error).__name__, "message": str(error), "chain": chain}


def write_error(output_dir: Path, error: BaseException) -> Path | None:
	try:
		output_dir.mkdir(parents=True, exist_ok=True)
		path = output_dir / ERROR_FILE
		write_json(path, error_report(error))
		return path
	except OSError as err:
		logger.error("Failed to write error report: %s", err)
		return None


@dataclass(frozen=True)
class SavedFit:
	fit: FitResult
	coords: np.ndarray | None
	covariate_names: tuple[str, ...]


def save_fit(output_dir: Path, fit: FitResult, coords: np.ndarray | None, covariate_names: tuple[str, ...]) -> Path:
	"""Stores what prediction needs: estimate, basis, final sample or Laplace mode and training locations."""
	path = output_dir / FIT_FILE
	arrays: dict[str, np.ndarray] = {"U": fit.basis.U, "D": fit.basis.D, "M": fit.basis.M}
	if fit.basis.Qdelta is not None:
		arrays["Qdelta"] = fit.basis.Qdelta
	if coords is not None:
		arrays["coords"] = coords
	if fit.final_batch is not None:
		arrays["draws"] = fit.final_batch.draws
		arrays["log_targets"] = fit.final_batch.log_targets
		arrays["proposal_cov"] = fit.final_batch.proposal_cov
	if fit.laplace is not None:
		arrays["mode"] = fit.laplace.mode
		arrays["precision"] = fit.laplace.precision
	meta = {
		"schema_version": SCHEMA_VERSION,
		"algorithm": fit.algorithm,
		"estimate": fit.estimate.to_dict(),
		"domain": fit.basis.domain,
		"phi": fit.basis.phi,
		"nu": fit.basis.nu,
		"regularized": fit.basis.regularized,
		"stopped_by": fit.stopped_by,
		"wall_time": fit.wall_time,
		"accept_rate": fit.final_batch.accept_rate if fit.final_batch is not None else None,
		"newton_iters": fit.laplace.newton_iters if fit.laplace is not None else None,
		"covariate_names": list(covariate_names),
		"config": fit.config,
	}
	with open(path, "wb") as file:
		np.savez_compressed(file, meta=np.array(json.dumps(meta, default=_number)), **arrays)
	logger.info("Wrote fitted state to '%s'", path)
	return path


def load_fit(path: Path | str) -> SavedFit:
	path = Path(path)
	if path.is_dir():
		path = path / FIT_FILE
	try:
		with np.load(path, allow_pickle=False) as stored:
			arrays = {key: stored[key] for key in stored.files}
	except (OSError, ValueError) as err:
		raise ConfigurationError(f"Failed to read fitted state '{path}': {err}") from err
	meta = json.loads(str(arrays.pop("meta")))
	if meta.get("schema_version") != SCHEMA_VERSION:
		raise ConfigurationError(f"Fitted state '{path}' has schema version {meta.get('schema_version')}, expected {SCHEMA_VERSION}")
	basis = ProjectionBasis(
		domain=meta["domain"],
		M=arrays["M"],
		U=arrays["U"],
		D=arrays["D"],
		Qdelta=arrays.get("Qdelta"),
		phi=meta["phi"],
		nu=meta["nu"],
		regularized=meta["regularized"],
	)
	batch = None
	if "draws" in arrays:
		draws = arrays["draws"]
		batch = McmcBatch(
			draws=draws,
			accept_rate=meta["accept_rate"],
			proposal_cov=arrays["proposal_cov"],
			last_state=draws[-1].copy(),
			log_targets=arrays["log_targets"],
		)
	laplace = None
	if "mode" in arrays:
		laplace = LaplaceState(mode=arrays["mode"], precision=arrays["precision"], converged=True, newton_iters=meta["newton_iters"] or 0)
	fit = FitResult(
		algorithm=meta["algorithm"],
		estimate=ModelState.from_dict(meta["estimate"]),
		basis=basis,
		trace=(),
		stopped_by=meta["stopped_by"],
		wall_time=meta["wall_time"],
		final_batch=batch,
		laplace=laplace,
		config=meta["config"],
	)
	return SavedFit(fit=fit, coords=arrays.get("coords"), covariate_names=tuple(meta["covariate_names"]))
