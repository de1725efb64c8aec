"""
proj-sglmm

tests for the sglmm command line
"""

import json
from pathlib import Path

import pandas as pd
import pytest

from projsglmm import __version__
from projsglmm.sglmmfit import main, parse_args, resolve_config, sglmm_main


def _simulate(directory: Path, *extra: str) -> Path:
	assert sglmm_main(["-o", str(directory), "--seed", "3", "simulate", *extra]) == 0
	return directory


def test_version(capsys: pytest.CaptureFixture[str]) -> None:
	with pytest.raises(SystemExit):
		parse_args(["--version"])
	assert __version__ in capsys.readouterr().out


def test_command_required() -> None:
	with pytest.raises(SystemExit):
		parse_args([])


def test_resolve_config_precedence(tmp_path: Path) -> None:
	config_file = tmp_path / "sglmm.conf"
	config_file.write_text("k0 = 300\nalpha = 0.1\n", encoding="utf-8")
	args = parse_args(["-c", str(config_file), "fit", "--data", "d.csv", "--alpha", "0.2", "--rank-grid", "5,10"])
	config = resolve_config(args)
	assert config["k0"] == 300
	assert config["alpha"] == 0.2
	assert config["rank_grid"] == [5, 10]
	assert config["algorithm"] == "mcmc-em"


def test_simulate_command(tmp_path: Path) -> None:
	out = _simulate(tmp_path / "sim", "--design", "s51-r02", "--n-train", "30")
	assert len(pd.read_csv(out / "train.csv")) == 30
	assert len(pd.read_csv(out / "test.csv")) == 400
	assert json.loads((out / "design.json").read_text(encoding="utf-8"))["phi"] == 0.07
	manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
	assert manifest["command"] == "simulate"
	assert {"train.csv", "test.csv", "truth.csv", "design.json"} <= set(manifest["outputs"])


def test_fit_predict_and_rerun(tmp_path: Path) -> None:
	sim = _simulate(tmp_path / "sim", "--design", "s51-r02", "--n-train", "40")
	fit_dir = tmp_path / "fit"
	argv = [
		"-o", str(fit_dir), "--workers", "1",
		"fit", "--data", str(sim / "train.csv"), "--algorithm", "la-em", "--rank", "3", "--max-em-iters", "2",
		"--locations", str(sim / "test.csv"),
	]  # fmt: skip
	assert sglmm_main(argv) == 0
	report = json.loads((fit_dir / "report.json").read_text(encoding="utf-8"))
	assert report["algorithm"] == "la-em"
	assert report["rank"] == 3
	assert set(report["estimates"]) == {"x1", "x2", "sigma2", "phi"}
	predictions = pd.read_csv(fit_dir / "predictions.csv")
	assert len(predictions) == 400

	predict_dir = tmp_path / "predict"
	assert sglmm_main(["-o", str(predict_dir), "predict", "--fit", str(fit_dir), "--locations", str(sim / "test.csv")]) == 0
	assert pd.read_csv(predict_dir / "predictions.csv")["latent_mean"].tolist() == pytest.approx(predictions["latent_mean"].tolist())

	rerun_dir = tmp_path / "rerun"
	assert sglmm_main(["-o", str(rerun_dir), "--from-manifest", str(fit_dir / "manifest.json")]) == 0
	rerun = json.loads((rerun_dir / "report.json").read_text(encoding="utf-8"))
	assert rerun["estimates"] == pytest.approx(report["estimates"])


def test_lattice_fit(tmp_path: Path) -> None:
	sim = _simulate(tmp_path / "sim", "--design", "s52")
	fit_dir = tmp_path / "fit"
	argv = [
		"-o", str(fit_dir), "--domain", "lattice", "--workers", "1",
		"fit", "--data", str(sim / "train.csv"), "--edges", str(sim / "edges.txt"),
		"--algorithm", "la-em", "--rank", "5", "--max-em-iters", "2",
	]  # fmt: skip
	assert sglmm_main(argv) == 0
	report = json.loads((fit_dir / "report.json").read_text(encoding="utf-8"))
	assert report["domain"] == "lattice"
	assert "tau" in report["estimates"]


def test_rank_select(tmp_path: Path) -> None:
	sim = _simulate(tmp_path / "sim", "--design", "s51-r02", "--n-train", "40")
	out = tmp_path / "rank"
	assert sglmm_main(["-o", str(out), "--workers", "1", "rank-select", "--data", str(sim / "train.csv"), "--rank-grid", "2,4"]) == 0
	table = pd.read_csv(out / "aic.csv")
	assert table["rank"].tolist() == [2, 4]


def test_main_writes_error_report(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
	out = tmp_path / "out"
	with pytest.raises(SystemExit) as err:
		main(["-o", str(out), "fit", "--data", str(tmp_path / "missing.csv")])
	assert err.value.code == 1
	assert "ERROR" in capsys.readouterr().err
	assert (out / "error.json").is_file()
