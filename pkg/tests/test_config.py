"""
proj-sglmm

tests for the run configuration
"""

from pathlib import Path

import pytest

from projsglmm.em.Config import DEFAULT_CONFIG, OUTPUT_DIR_ENV, ConfigurationParser, EmConfig, coerce, default_output_dir, splitAndStrip
from projsglmm.exceptions import ConfigurationError, MissingConfigurationValueError

CONFIG = """; comment
# another comment
algorithm = la-em
rank = 40
rank_grid = 10, 20, 40
alpha = 0.1
intercept = true
workers = auto
"""


def test_parse_config_file(tmp_path: Path) -> None:
	path = tmp_path / "sglmm.conf"
	path.write_text(CONFIG, encoding="utf-8")
	config = ConfigurationParser(path).parse(DEFAULT_CONFIG.copy())
	assert config["algorithm"] == "la-em"
	assert config["rank"] == 40
	assert config["rank_grid"] == [10, 20, 40]
	assert config["alpha"] == 0.1
	assert config["intercept"] is True
	assert config["workers"] is None
	assert config["k0"] == DEFAULT_CONFIG["k0"]


def test_parse_invalid_value(tmp_path: Path) -> None:
	path = tmp_path / "sglmm.conf"
	path.write_text("algorithm = gibbs-em\n", encoding="utf-8")
	with pytest.raises(ConfigurationError):
		ConfigurationParser(path).parse()


def test_missing_config_file(tmp_path: Path) -> None:
	with pytest.raises(MissingConfigurationValueError):
		ConfigurationParser(tmp_path / "missing.conf").parse()


def test_coerce() -> None:
	config = coerce({"k0": "300", "rank": "none", "stop_rule": "NONE", "unknown": 1})
	assert config["k0"] == 300
	assert config["rank"] is None
	assert config["stop_rule"] == "none"
	assert "unknown" not in config


@pytest.mark.parametrize(
	"values",
	({"alpha": 0.6}, {"gamma": 0.0}, {"k0": 50}, {"k0": 500, "max_mc_size": 400}, {"phi_step": 0.5, "phi_candidates": 2}, {"epsilon": 0.0}),
)
def test_em_config_validation(values: dict) -> None:
	with pytest.raises(ConfigurationError):
		EmConfig(**values)


def test_em_config_from_config_ignores_unknown_keys() -> None:
	config = EmConfig.from_config({**DEFAULT_CONFIG, "family": "poisson-log", "k0": 200})
	assert config.k0 == 200
	assert config.eigensolver().method == "auto"
	assert EmConfig.from_config(config.to_dict()) == config


def test_default_output_dir(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
	monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path))
	assert default_output_dir() == tmp_path
	monkeypatch.delenv(OUTPUT_DIR_ENV)
	assert default_output_dir() == Path("sglmm-output")


def test_split_and_strip() -> None:
	assert list(splitAndStrip(" a, b ,,c ", ",")) == ["a", "b", "c"]
