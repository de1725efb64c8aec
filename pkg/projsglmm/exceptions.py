# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
Exceptions used throughout projsglmm.
"""

from __future__ import annotations

from typing import Any

from opsicommon.exceptions import OpsiError

__all__ = (
	"SglmmError",
	"ParameterDomainError",
	"AsymmetricMatrixError",
	"RankDeficientDesignError",
	"ConvergenceError",
	"GlmConvergenceError",
	"LaplaceConvergenceError",
	"McmcError",
	"InsufficientSampleError",
	"SingularCovarianceError",
	"DivergenceError",
	"BootstrapError",
	"PredictionError",
	"ConfigurationError",
	"MissingConfigurationValueError",
	"DatasetFormatError",
)


class SglmmError(OpsiError):
	ExceptionShortDescription = "SGLMM error"


class ParameterDomainError(SglmmError, ValueError):
	ExceptionShortDescription = "Parameter domain error"


class AsymmetricMatrixError(ParameterDomainError):
	ExceptionShortDescription = "Asymmetric matrix"


class RankDeficientDesignError(SglmmError):
	ExceptionShortDescription = "Rank deficient design"

	def __init__(self, message: str, column: int, column_name: str | None = None) -> None:
		super().__init__(message)
		self.column = column
		self.column_name = column_name


class ConvergenceError(SglmmError):
	ExceptionShortDescription = "Convergence error"

	def __init__(self, message: str, last_iterate: Any = None, iterations: int = 0) -> None:
		super().__init__(message)
		self.last_iterate = last_iterate
		self.iterations = iterations


class GlmConvergenceError(ConvergenceError):
	ExceptionShortDescription = "GLM did not converge"


class LaplaceConvergenceError(ConvergenceError):
	ExceptionShortDescription = "Mode search did not converge"


class McmcError(SglmmError):
	ExceptionShortDescription = "MCMC error"


class InsufficientSampleError(McmcError, ValueError):
	ExceptionShortDescription = "Insufficient sample"


class SingularCovarianceError(McmcError):
	ExceptionShortDescription = "Singular covariance"


class DivergenceError(SglmmError):
	ExceptionShortDescription = "EM diverged"

	def __init__(self, message: str, trace: list | None = None) -> None:
		super().__init__(message)
		self.trace = trace or []


class BootstrapError(SglmmError):
	ExceptionShortDescription = "Bootstrap failed"

	def __init__(self, message: str, failures: int = 0, replicates: int = 0) -> None:
		super().__init__(message)
		self.failures = failures
		self.replicates = replicates


class PredictionError(SglmmError):
	ExceptionShortDescription = "Prediction error"


class ConfigurationError(ValueError):
	pass


class MissingConfigurationValueError(ConfigurationError):
	pass


class DatasetFormatError(ConfigurationError):
	def __init__(self, message: str, line: int | None = None) -> None:
		if line is not None:
			message = f"line {line}: {message}"
		super().__init__(message)
		self.line = line
