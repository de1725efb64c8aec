# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Run configuration.

A configuration file is a flat list of `key = value` lines; comments start with `;` or `#`.
Precedence is DEFAULT_CONFIG < configuration file < command line.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Callable, Generator

from configupdater import ConfigUpdater
from opsicommon.logging import get_logger, logging_config
from opsicommon.types import forceBool, forceFilename, forceFloat, forceInt, forceUnicode

from projsglmm.exceptions import ConfigurationError, MissingConfigurationValueError
from projsglmm.lowrank import DEFAULT_DISPATCH_THRESHOLD, Eigensolver

__all__ = ("DEFAULT_CONFIG", "OUTPUT_DIR_ENV", "EmConfig", "ConfigurationParser", "default_output_dir", "splitAndStrip", "coerce")

OUTPUT_DIR_ENV = "SGLMM_OUTPUT_DIR"
CONFIG_SECTION = "sglmm"

DEFAULT_CONFIG: dict[str, Any] = {
	"domain": "continuous",
	"family": "poisson-log",
	"algorithm": "mcmc-em",
	"rank": None,
	"rank_grid": None,
	"nu": 1.5,
	"intercept": False,
	"alpha": 0.15,
	"gamma": 0.05,
	"epsilon": 0.001,
	"k0": 500,
	"max_em_iters": 100,
	"phi_step": 0.05,
	"phi_candidates": 2,
	"seed": 0,
	"max_mc_size": 100_000,
	"mess_factor": 10,
	"la_param_tol": 1e-6,
	"sigma2_floor": 1e-6,
	"tau_floor": 1e-6,
	"stop_rule": "ascent",
	"eigen_method": "auto",
	"dispatch_threshold": DEFAULT_DISPATCH_THRESHOLD,
	"nystrom_oversample": None,
	"nystrom_power": 1,
	"workers": None,
	"bootstrap_replicates": 0,
	"output_dir": None,
}

logger = get_logger("projsglmm.config")


def default_output_dir() -> Path:
	return Path(os.environ.get(OUTPUT_DIR_ENV) or "sglmm-output")


def splitAndStrip(string: str, sep: str) -> Generator[str, None, None]:
	for singleValue in string.split(sep):
		singleValue = singleValue.strip()
		if singleValue:
			yield singleValue


def _optional(convert: Callable[[Any], Any]) -> Callable[[Any], Any]:
	def wrapper(value: Any) -> Any:
		if value is None or str(value).strip().lower() in ("", "none", "auto"):
			return None
		return convert(value)

	return wrapper


def _choice(*choices: str) -> Callable[[Any], str]:
	def wrapper(value: Any) -> str:
		value = forceUnicode(value).strip().lower()
		if value not in choices:
			raise ConfigurationError(f"'{value}' is not one of {', '.join(choices)}")
		return value

	return wrapper


def _int_list(value: Any) -> list[int]:
	if isinstance(value, (list, tuple)):
		return [forceInt(item) for item in value]
	return [forceInt(item) for item in splitAndStrip(forceUnicode(value), ",")]


CONVERTERS: dict[str, Callable[[Any], Any]] = {
	"domain": _choice("continuous", "lattice"),
	"family": _choice("poisson-log", "bernoulli-logit"),
	"algorithm": _choice("mcmc-em", "la-em"),
	"rank": _optional(forceInt),
	"rank_grid": _optional(_int_list),
	"nu": forceFloat,
	"intercept": forceBool,
	"alpha": forceFloat,
	"gamma": forceFloat,
	"epsilon": forceFloat,
	"k0": forceInt,
	"max_em_iters": forceInt,
	"phi_step": forceFloat,
	"phi_candidates": forceInt,
	"seed": forceInt,
	"max_mc_size": forceInt,
	"mess_factor": forceFloat,
	"la_param_tol": forceFloat,
	"sigma2_floor": forceFloat,
	"tau_floor": forceFloat,
	"stop_rule": _choice("ascent", "none"),
	"eigen_method": _choice("auto", "exact", "nystrom"),
	"dispatch_threshold": forceInt,
	"nystrom_oversample": _optional(forceInt),
	"nystrom_power": forceInt,
	"workers": _optional(forceInt),
	"bootstrap_replicates": forceInt,
	"output_dir": _optional(forceFilename),
}


@dataclass(frozen=True)
class EmConfig:
	alpha: float = 0.15
	gamma: float = 0.05
	epsilon: float = 0.001
	k0: int = 500
	max_em_iters: int = 100
	phi_step: float = 0.05
	phi_candidates: int = 2
	seed: int = 0
	max_mc_size: int = 100_000
	mess_factor: float = 10
	la_param_tol: float = 1e-6
	sigma2_floor: float = 1e-6
	tau_floor: float = 1e-6
	stop_rule: str = "ascent"
	eigen_method: str = "auto"
	dispatch_threshold: int = DEFAULT_DISPATCH_THRESHOLD
	nystrom_oversample: int | None = None
	nystrom_power: int = 1
	workers: int | None = None

	def __post_init__(self) -> None:
		if not 0 < self.alpha < 0.5:
			raise ConfigurationError(f"alpha must lie in (0, 0.5), got {self.alpha}")
		if not 0 < self.gamma < 0.5:
			raise ConfigurationError(f"gamma must lie in (0, 0.5), got {self.gamma}")
		if not self.epsilon > 0:
			raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
		if self.k0 < 100:
			raise ConfigurationError(f"k0 must be at least 100 for batch means, got {self.k0}")
		if self.max_mc_size < self.k0:
			raise ConfigurationError(f"max_mc_size {self.max_mc_size} is below k0 {self.k0}")
		if self.max_em_iters < 1:
			raise ConfigurationError(f"max_em_iters must be at least 1, got {self.max_em_iters}")
		if self.phi_candidates < 0 or self.phi_step <= 0 or self.phi_step * self.phi_candidates >= 1:
			raise ConfigurationError("phi candidates phi * (1 - phi_step * j) must stay positive")
		if self.stop_rule not in ("ascent", "none"):
			raise ConfigurationError(f"Unknown stop rule '{self.stop_rule}'")
		if self.eigen_method not in ("auto", "exact", "nystrom"):
			raise ConfigurationError(f"Unknown eigen method '{self.eigen_method}'")

	@classmethod
	def from_config(cls, config: dict[str, Any]) -> EmConfig:
		names = {item.name for item in fields(cls)}
		return cls(**{key: value for key, value in config.items() if key in names and value is not None})

	def to_dict(self) -> dict[str, Any]:
		return asdict(self)

	def eigensolver(self) -> Eigensolver:
		return Eigensolver(
			method=self.eigen_method,
			dispatch_threshold=self.dispatch_threshold,
			oversample=self.nystrom_oversample,
			power=self.nystrom_power,
			seed=self.seed,
		)


class ConfigurationParser:
	def __init__(self, configFile: Path | str) -> None:
		self.configFile = Path(configFile)

	def read(self) -> dict[str, str]:
		if not self.configFile.is_file():
			raise MissingConfigurationValueError(f"Configuration file '{self.configFile}' not found")
		updater = ConfigUpdater()
		# the file has no section header of its own
		updater.read_string(f"[{CONFIG_SECTION}]\n" + self.configFile.read_text(encoding="utf-8"))
		return {
			option.strip().lower(): (updater.get(section=CONFIG_SECTION, option=option).value or "").strip()
			for option in updater.options(CONFIG_SECTION)
		}

	def parse(self, configuration: dict[str, Any] | None = None) -> dict[str, Any]:
		"""
		Parse the configuration file.

		:param configuration: Predefined configuration. Contents may be overriden based on values in configuration file.
		"""
		logger.info("Reading config file '%s'", self.configFile)
		config = DEFAULT_CONFIG.copy()
		if configuration:
			config.update(configuration)

		try:
			values = self.read()
		except MissingConfigurationValueError:
			raise
		except Exception as err:
			raise ConfigurationError(f"Failed to read config file '{self.configFile}': {err}") from err

		for option, value in values.items():
			if option == "log_file":
				logging_config(log_file=forceFilename(value))
			elif option == "log_level":
				logging_config(file_level=forceInt(value))
			elif option in CONVERTERS:
				try:
					config[option] = CONVERTERS[option](value)
				except Exception as err:
					raise ConfigurationError(f"Invalid value '{value}' for '{option}' in '{self.configFile}': {err}") from err
			else:
				logger.error("Unhandled option '%s' in '%s'", option, self.configFile)
		return config


def coerce(config: dict[str, Any]) -> dict[str, Any]:
	"""Applies the value converters to every known key that is set."""
	result = DEFAULT_CONFIG.copy()
	for key, value in config.items():
		if key in CONVERTERS and value is not None:
			try:
				result[key] = CONVERTERS[key](value)
			except Exception as err:
				raise ConfigurationError(f"Invalid value '{value}' for '{key}': {err}") from err
	return result
