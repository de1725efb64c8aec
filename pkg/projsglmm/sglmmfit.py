# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
sglmm

Maximum likelihood fitting of projection-based spatial generalized linear mixed models.
Operates in different commands: fit, predict, simulate, bootstrap and rank-select.
Each command has its own options that can be viewed with COMMAND -h
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd
from opsicommon.logging import (
	DEFAULT_COLORED_FORMAT,
	get_logger,
	init_logging,
	logging_config,
)

from projsglmm import __version__
from projsglmm.data import DatasetSchema, SpatialDataset, ingest_dataset, write_dataset
from projsglmm.em.Bootstrap import BootstrapResult, bootstrap_se
from projsglmm.em.Config import DEFAULT_CONFIG, ConfigurationParser, EmConfig, coerce, default_output_dir, splitAndStrip
from projsglmm.em.Laplace import fit_la_em
from projsglmm.em.Mcmc import fit_mcmc_em
from projsglmm.em.Report import (
	build_manifest,
	fit_report,
	load_fit,
	read_manifest,
	save_fit,
	verify_inputs,
	write_error,
	write_json,
	write_manifest,
	write_predictions,
	write_report,
	write_trace,
)
from projsglmm.em.State import FitResult, ModelState, state_summary
from projsglmm.exceptions import ConfigurationError, DatasetFormatError, ParameterDomainError
from projsglmm.glm import initial_values, irls_fit, select_initial_rank
from projsglmm.mcmc import write_draws
from projsglmm.predict import PredictionResult, predict_laplace, predict_mcmc
from projsglmm.sim import DESIGNS, get_design, simulate

logger = get_logger("sglmm")

DEFAULT_RANK_STEP = 10
DEFAULT_MAX_RANK = 150
DRAWS_FILE = "draws.csv"
AIC_FILE = "aic.csv"
RANK_COMPARISON_FILE = "rank_comparison.csv"

# option name -> (flag, type, help); every option maps onto a DEFAULT_CONFIG key
CONFIG_OPTIONS: dict[str, tuple[str, Callable[[str], Any], str]] = {
	"domain": ("--domain", str, "Spatial domain: continuous or lattice."),
	"family": ("--family", str, "Response family: poisson-log or bernoulli-logit."),
	"nu": ("--nu", float, "Matern smoothness, one of 0.5, 1.5, 2.5."),
	"seed": ("--seed", int, "Master random seed."),
	"workers": ("--workers", int, "Worker threads / processes (default: available cores)."),
	"eigen_method": ("--eigen-method", str, "Eigendecomposition: auto, exact or nystrom."),
}
EM_OPTIONS: dict[str, tuple[str, Callable[[str], Any], str]] = {
	"algorithm": ("--algorithm", str, "EM variant: mcmc-em or la-em."),
	"rank": ("--rank", int, "Basis rank. Selected by AIC over the rank grid when omitted."),
	"rank_grid": ("--rank-grid", str, "Comma separated increasing ranks for AIC selection."),
	"alpha": ("--alpha", float, "Level of the ascent lower bound."),
	"gamma": ("--gamma", float, "Level of the stopping upper bound."),
	"epsilon": ("--epsilon", float, "Stopping threshold."),
	"k0": ("--k0", int, "Initial Monte Carlo sample size."),
	"max_em_iters": ("--max-em-iters", int, "Maximum number of EM iterations."),
	"max_mc_size": ("--max-mc-size", int, "Largest Monte Carlo sample per iteration."),
	"phi_step": ("--phi-step", float, "Relative spacing of the phi candidates."),
	"phi_candidates": ("--phi-candidates", int, "Number of phi candidates on each side."),
	"stop_rule": ("--stop-rule", str, "ascent, or none to run exactly max-em-iters iterations."),
}


def _add_options(parser: argparse.ArgumentParser, options: dict[str, tuple[str, Callable[[str], Any], str]]) -> None:
	for dest, (flag, kind, text) in options.items():
		parser.add_argument(flag, dest=dest, type=kind, default=None, help=text)


def _add_data_options(parser: argparse.ArgumentParser) -> None:
	parser.add_argument("--data", "-d", dest="data", required=True, help="Dataset CSV.")
	parser.add_argument("--edges", dest="edges", default=None, help="Edge list of the lattice graph.")
	parser.add_argument("--covariates", dest="covariates", default=None, help="Comma separated covariate columns (default: all other columns).")
	parser.add_argument("--intercept", dest="intercept", action="store_true", default=None, help="Add an intercept column.")


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
	parser = argparse.ArgumentParser(
		prog="sglmm",
		description=(
			"Maximum likelihood for spatial generalized linear mixed models.\n"
			"Operates in different COMMANDs: fit, predict, simulate, bootstrap and rank-select.\n"
			"Each command has their own options that can be viewed with COMMAND -h"
		),
	)
	parser.add_argument("--version", "-V", action="version", version=__version__)
	parser.add_argument("--config", "-c", dest="configFile", default=None, help="Location of config file")
	parser.add_argument("--output-dir", "-o", dest="output_dir", default=None, help="Output directory (default: $SGLMM_OUTPUT_DIR).")
	parser.add_argument("--from-manifest", dest="fromManifest", default=None, help="Rerun the command recorded in a manifest.")
	parser.add_argument("--log-file", dest="logFile", default=None, help="Log to this file.")
	parser.add_argument("--log-file-level", dest="logFileLevel", type=int, default=5, choices=range(10), help="Log level of the log file.")

	logGroup = parser.add_mutually_exclusive_group()
	logGroup.add_argument(
		"--verbose",
		"-v",
		dest="logLevel",
		default=4,
		action="count",
		help="Increase verbosity on console (can be used multiple times)",
	)
	logGroup.add_argument(
		"--log-level",
		"-l",
		dest="logLevel",
		type=int,
		choices=[0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
		help="Set the desired loglevel for the console.",
	)
	_add_options(parser, CONFIG_OPTIONS)

	commands = parser.add_subparsers(dest="command", title="Command")
	fitParser = commands.add_parser("fit", help="Fit the model and write the report, trace and fitted state.")
	_add_data_options(fitParser)
	_add_options(fitParser, EM_OPTIONS)
	fitParser.add_argument("--locations", dest="locations", default=None, help="CSV of new locations to predict after the fit.")
	fitParser.add_argument("--full-cov", dest="fullCov", action="store_true", help="Sample predictions with the joint covariance.")
	fitParser.add_argument("--write-draws", dest="writeDraws", action="store_true", help="Write the final MCMC sample.")

	bootstrapParser = commands.add_parser("bootstrap", help="Fit the model and compute parametric bootstrap intervals.")
	_add_data_options(bootstrapParser)
	_add_options(bootstrapParser, EM_OPTIONS)
	bootstrapParser.add_argument("--replicates", "-B", dest="bootstrap_replicates", type=int, required=True, help="Number of replicates.")

	predictParser = commands.add_parser("predict", help="Predict at new locations from a fitted state.")
	predictParser.add_argument("--fit", dest="fit", required=True, help="Fitted state (fit.npz or the directory holding it).")
	predictParser.add_argument("--locations", dest="locations", required=True, help="CSV with x, y and the covariate columns.")
	predictParser.add_argument("--full-cov", dest="fullCov", action="store_true", help="Sample predictions with the joint covariance.")

	simulateParser = commands.add_parser("simulate", help="Write a simulated dataset.")
	simulateParser.add_argument("--design", dest="design", required=True, choices=sorted(DESIGNS), help="Simulation preset.")
	simulateParser.add_argument("--n-train", dest="nTrain", type=int, default=None, help="Override the number of training locations.")
	simulateParser.add_argument(
		"--literal-covariance", dest="literalCovariance", action="store_true", help="Lattice designs: draw delta from N(0, tau Q_delta^-1)."
	)

	rankParser = commands.add_parser("rank-select", help="Select the basis rank by AIC of non-spatial GLMs.")
	_add_data_options(rankParser)
	_add_options(rankParser, EM_OPTIONS)
	rankParser.add_argument("--refit", dest="refit", action="store_true", help="Also fit the model at the ranks around the choice.")

	args = parser.parse_args(argv)
	if not args.command and not args.fromManifest:
		parser.error("No command provided")
	return args


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
	"""DEFAULT_CONFIG, then the config file, then explicit command line options."""
	config = DEFAULT_CONFIG.copy()
	if args.configFile:
		config = ConfigurationParser(args.configFile).parse(config)
	for key in DEFAULT_CONFIG:
		value = getattr(args, key, None)
		if value is not None:
			config[key] = value
	return coerce(config)


def default_rank_grid(data: SpatialDataset) -> list[int]:
	limit = min(DEFAULT_MAX_RANK, data.n - data.p - 1)
	grid = list(range(DEFAULT_RANK_STEP, limit + 1, DEFAULT_RANK_STEP))
	return grid or [max(1, limit)]


def load_dataset(args: argparse.Namespace, config: dict[str, Any]) -> tuple[SpatialDataset, dict[str, Path]]:
	covariates = tuple(splitAndStrip(args.covariates, ",")) if args.covariates else None
	schema = DatasetSchema(domain=config["domain"], family=config["family"], covariates=covariates, intercept=config["intercept"])
	data = ingest_dataset(args.data, schema, edges=args.edges)
	inputs = {"data": Path(args.data)}
	if args.edges:
		inputs["edges"] = Path(args.edges)
	return data, inputs


def starting_state(data: SpatialDataset) -> ModelState:
	glmfit = irls_fit(data.X, data.z, data.family, data.offset)
	logger.info("GLM warm start: beta=%s, AIC %.2f", np.round(glmfit.beta, 4).tolist(), glmfit.aic)
	return initial_values(data, glmfit)


def choose_rank(data: SpatialDataset, config: dict[str, Any], start: ModelState, output_dir: Path | None = None) -> tuple[int, list[int]]:
	em_config = EmConfig.from_config(config)
	grid = config["rank_grid"] or default_rank_grid(data)
	selection = select_initial_rank(data, start.phi, config["nu"], grid, em_config.eigensolver(), em_config.workers)
	if output_dir is not None:
		selection.table.to_csv(output_dir / AIC_FILE, index=False)
	return selection.rank, [int(rank) for rank in selection.table["rank"]]


def run_fit(data: SpatialDataset, config: dict[str, Any], rank: int | None = None, start: ModelState | None = None) -> FitResult:
	em_config = EmConfig.from_config(config)
	start = start or starting_state(data)
	if rank is None:
		rank = config["rank"] or choose_rank(data, config, start)[0]
	fit = fit_mcmc_em if config["algorithm"] == "mcmc-em" else fit_la_em
	return fit(data, rank, em_config, start=start, nu=config["nu"])


def read_locations(path: Path | str, covariate_names: tuple[str, ...]) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
	frame = pd.read_csv(path)
	names = [name for name in covariate_names if name != "intercept"]
	missing = [column for column in ("x", "y", *names) if column not in frame.columns]
	if missing:
		raise DatasetFormatError(f"missing column(s) {', '.join(missing)} in '{path}'", line=1)
	locations = frame[["x", "y"]].to_numpy(dtype=float)
	columns = [np.ones(len(frame)) if name == "intercept" else frame[name].to_numpy(dtype=float) for name in covariate_names]
	new_X = np.column_stack(columns) if columns else np.empty((len(frame), 0))
	offset = frame["offset"].to_numpy(dtype=float) if "offset" in frame.columns else None
	return locations, new_X, offset


def run_predict(
	fit: FitResult, train_coords: np.ndarray | None, covariate_names: tuple[str, ...], locations_path: Path | str, full_cov: bool
) -> PredictionResult:
	if train_coords is None:
		raise ParameterDomainError("Prediction at new locations is only available on continuous domains")
	locations, new_X, offset = read_locations(locations_path, covariate_names)
	if fit.algorithm == "mcmc-em":
		return predict_mcmc(fit, locations, train_coords, new_X, offset, full_cov=full_cov)
	return predict_laplace(fit, locations, train_coords, new_X, offset, full_cov=full_cov)


def command_fit(args: argparse.Namespace, config: dict[str, Any], output_dir: Path) -> tuple[dict[str, Path], list[Path]]:
	data, inputs = load_dataset(args, config)
	fit = run_fit(data, config)
	bootstrap: BootstrapResult | None = None
	replicates = config["bootstrap_replicates"]
	if replicates:
		bootstrap = bootstrap_se(fit, data, replicates, seed=config["seed"], workers=config["workers"], nu=config["nu"])
	outputs = [
		write_report(output_dir, fit_report(fit, data.covariate_names, bootstrap)),
		write_trace(output_dir, fit),
		save_fit(output_dir, fit, data.coords, data.covariate_names),
	]
	if bootstrap is not None:
		path = output_dir / "bootstrap.csv"
		bootstrap.to_frame().to_csv(path, index=False)
		outputs.append(path)
	if getattr(args, "writeDraws", False) and fit.final_batch is not None:
		write_draws(fit.final_batch, output_dir / DRAWS_FILE)
		outputs.append(output_dir / DRAWS_FILE)
	if getattr(args, "locations", None):
		inputs["locations"] = Path(args.locations)
		outputs.append(write_predictions(output_dir, run_predict(fit, data.coords, data.covariate_names, args.locations, args.fullCov)))
	logger.notice("Fit finished: %s", state_summary(fit.estimate))
	return inputs, outputs


def command_bootstrap(args: argparse.Namespace, config: dict[str, Any], output_dir: Path) -> tuple[dict[str, Path], list[Path]]:
	if config["bootstrap_replicates"] < 2:
		raise ConfigurationError("The bootstrap needs at least 2 replicates")
	return command_fit(args, config, output_dir)


def command_predict(args: argparse.Namespace, config: dict[str, Any], output_dir: Path) -> tuple[dict[str, Path], list[Path]]:
	saved = load_fit(args.fit)
	result = run_predict(saved.fit, saved.coords, saved.covariate_names, args.locations, args.fullCov)
	fit_path = Path(args.fit)
	inputs = {"fit": fit_path if fit_path.is_file() else fit_path / "fit.npz", "locations": Path(args.locations)}
	return inputs, [write_predictions(output_dir, result)]


def command_simulate(args: argparse.Namespace, config: dict[str, Any], output_dir: Path) -> tuple[dict[str, Path], list[Path]]:
	overrides: dict[str, Any] = {"literal_covariance": bool(args.literalCovariance)}
	if args.nTrain:
		overrides["n_train"] = args.nTrain
	if args.nu is not None:
		overrides["nu"] = config["nu"]
	design = get_design(args.design, seed=config["seed"], **overrides)
	simulated = simulate(design)
	outputs = []
	train_path = output_dir / "train.csv"
	if simulated.train.graph is not None:
		edges_path = output_dir / "edges.txt"
		write_dataset(simulated.train, train_path, edges=edges_path)
		outputs += [train_path, edges_path]
	else:
		write_dataset(simulated.train, train_path)
		outputs.append(train_path)
	if simulated.test is not None:
		test_path = output_dir / "test.csv"
		write_dataset(simulated.test, test_path)
		outputs.append(test_path)
	truth_path = output_dir / "truth.csv"
	simulated.write_truth(truth_path)
	design_path = output_dir / "design.json"
	write_json(design_path, design.to_dict())
	outputs += [truth_path, design_path]
	logger.notice("Simulated design '%s' into '%s'", design.name, output_dir)
	return {}, outputs


def command_rank_select(args: argparse.Namespace, config: dict[str, Any], output_dir: Path) -> tuple[dict[str, Path], list[Path]]:
	data, inputs = load_dataset(args, config)
	start = starting_state(data)
	rank, grid = choose_rank(data, config, start, output_dir)
	outputs = [output_dir / AIC_FILE]
	if args.refit:
		position = grid.index(rank)
		rows = []
		for candidate in grid[max(0, position - 1) : position + 2]:
			fit = run_fit(data, config, rank=candidate, start=start)
			row: dict[str, Any] = {"rank": candidate, "algorithm": fit.algorithm}
			row.update(zip(fit.estimate.names(data.covariate_names), fit.estimate.vector()))
			row.update({"iterations": fit.iterations, "stopped_by": fit.stopped_by, "wall_time": fit.wall_time})
			rows.append(row)
		path = output_dir / RANK_COMPARISON_FILE
		pd.DataFrame(rows).to_csv(path, index=False)
		outputs.append(path)
	logger.notice("Chosen rank %d", rank)
	return inputs, outputs


COMMANDS: dict[str, Callable[[argparse.Namespace, dict[str, Any], Path], tuple[dict[str, Path], list[Path]]]] = {
	"fit": command_fit,
	"bootstrap": command_bootstrap,
	"predict": command_predict,
	"simulate": command_simulate,
	"rank-select": command_rank_select,
}


def sglmm_main(argv: Sequence[str] | None = None) -> int:
	argv = list(sys.argv[1:] if argv is None else argv)
	args = parse_args(argv)
	init_logging(stderr_level=args.logLevel, stderr_format=DEFAULT_COLORED_FORMAT)
	if args.logFile:
		logging_config(log_file=args.logFile, file_level=args.logFileLevel)

	override_dir = args.output_dir
	if args.fromManifest:
		manifestPath = args.fromManifest
		manifest = read_manifest(manifestPath)
		verify_inputs(manifest)
		argv = list(manifest["arguments"]["argv"])
		args = parse_args(argv)
		config = coerce(manifest["config"])
		logger.notice("Rerunning '%s' from manifest '%s'", manifest["command"], manifestPath)
	else:
		config = resolve_config(args)
	if override_dir:
		config["output_dir"] = override_dir

	output_dir = Path(config["output_dir"] or default_output_dir())
	output_dir.mkdir(parents=True, exist_ok=True)
	logger.info("Running command %s, writing to '%s'", args.command, output_dir)
	try:
		inputs, outputs = COMMANDS[args.command](args, config, output_dir)
	except Exception as err:
		write_error(output_dir, err)
		raise
	recorded = {key: (str(value) if isinstance(value, Path) else value) for key, value in config.items()}
	write_manifest(output_dir, build_manifest(args.command, {"argv": argv}, recorded, inputs, outputs))
	return 0


def main(argv: Sequence[str] | None = None) -> None:
	try:
		exitCode = sglmm_main(argv)
	except KeyboardInterrupt:
		exitCode = 1
	except Exception as exc:
		logger.error(exc, exc_info=True)
		print(f"ERROR: {exc}", file=sys.stderr)
		exitCode = 1

	if exitCode:
		sys.exit(exitCode)
