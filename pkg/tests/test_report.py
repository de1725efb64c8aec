"""
proj-sglmm

tests for run artifacts
"""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from projsglmm.em.Config import EmConfig
from projsglmm.em.Laplace import fit_la_em
from projsglmm.em.Mcmc import fit_mcmc_em
from projsglmm.em.Report import (
	build_manifest,
	error_report,
	fit_report,
	load_fit,
	read_manifest,
	save_fit,
	verify_inputs,
	write_error,
	write_manifest,
	write_report,
	write_trace,
)
from projsglmm.exceptions import ConfigurationError, DatasetFormatError, DivergenceError
from projsglmm.predict import predict_laplace, predict_mcmc

from .utils import poisson_points


@pytest.fixture(scope="module")
def la_fit():
	data = poisson_points(40)
	return data, fit_la_em(data, 3, EmConfig(max_em_iters=2, workers=1))


def test_fit_report(tmp_path: Path, la_fit) -> None:  # pylint: disable=redefined-outer-name
	data, fit = la_fit
	report = fit_report(fit, data.covariate_names)
	assert report["schema_version"] == 1
	assert report["algorithm"] == "la-em"
	assert set(report["estimates"]) == {"intercept", "x1", "sigma2", "phi"}
	assert report["inference"]["preferred"] == "observed-information"
	assert set(report["inference"]["observed_information"]["parameters"]) == {"intercept", "x1", "sigma2"}
	path = write_report(tmp_path, report)
	assert json.loads(path.read_text(encoding="utf-8"))["rank"] == 3
	trace = pd.read_csv(write_trace(tmp_path, fit))
	assert len(trace) == fit.iterations


def test_manifest(tmp_path: Path) -> None:
	data_file = tmp_path / "data.csv"
	data_file.write_text("x,y,z\n0,0,1\n", encoding="utf-8")
	output = tmp_path / "out.txt"
	output.write_text("result", encoding="utf-8")
	manifest = build_manifest("fit", {"argv": ["fit"]}, {"seed": 3}, {"data": data_file}, [output])
	assert manifest["seed"] == 3
	assert "out.txt" in manifest["outputs"]
	path = write_manifest(tmp_path, manifest)
	restored = read_manifest(path)
	verify_inputs(restored)
	data_file.write_text("x,y,z\n0,0,2\n", encoding="utf-8")
	with pytest.raises(ConfigurationError):
		verify_inputs(restored)


def test_read_manifest_schema(tmp_path: Path) -> None:
	path = tmp_path / "manifest.json"
	path.write_text(json.dumps({"schema_version": 99}), encoding="utf-8")
	with pytest.raises(ConfigurationError):
		read_manifest(path)


def test_error_report(tmp_path: Path) -> None:
	try:
		try:
			raise DatasetFormatError("bad value", line=7)
		except DatasetFormatError as err:
			raise DivergenceError("fit failed", trace=[1, 2]) from err
	except DivergenceError as err:
		report = error_report(err)
		path = write_error(tmp_path, err)
	assert report["type"] == "DivergenceError"
	assert report["chain"][0]["completed_iterations"] == 2
	assert report["chain"][1]["line"] == 7
	assert json.loads(path.read_text(encoding="utf-8"))["message"] == "fit failed"


def test_save_and_load_laplace_fit(tmp_path: Path, la_fit) -> None:  # pylint: disable=redefined-outer-name
	data, fit = la_fit
	save_fit(tmp_path, fit, data.coords, data.covariate_names)
	saved = load_fit(tmp_path)
	assert saved.covariate_names == data.covariate_names
	assert np.allclose(saved.fit.basis.M, fit.basis.M)
	assert np.allclose(saved.fit.estimate.vector(), fit.estimate.vector())
	new = np.array([[0.3, 0.3]])
	new_X = np.array([[1.0, 0.3]])
	original = predict_laplace(fit, new, data.coords, new_X)
	restored = predict_laplace(saved.fit, new, saved.coords, new_X)
	assert np.allclose(original.latent_mean, restored.latent_mean)


def test_save_and_load_mcmc_fit(tmp_path: Path) -> None:
	data = poisson_points(30)
	fit = fit_mcmc_em(data, 2, EmConfig(max_em_iters=1, k0=100, max_mc_size=200, mess_factor=1, workers=1))
	path = save_fit(tmp_path, fit, data.coords, data.covariate_names)
	saved = load_fit(path)
	assert saved.fit.algorithm == "mcmc-em"
	assert np.array_equal(saved.fit.final_batch.draws, fit.final_batch.draws)
	new = np.array([[0.5, 0.5]])
	new_X = np.array([[1.0, 0.5]])
	assert np.allclose(predict_mcmc(fit, new, data.coords, new_X).latent_mean, predict_mcmc(saved.fit, new, saved.coords, new_X).latent_mean)


def test_load_fit_missing(tmp_path: Path) -> None:
	with pytest.raises(ConfigurationError):
		load_fit(tmp_path / "nothing.npz")
