"""Tests for configuration layering and validation."""
import json
from datetime import date

import pytest

from covid_monitor.config import DEFAULT_CONFIG, ConfigError, RunConfig, environment_overrides, load_config


def write_config(tmp_path, data) -> str:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return str(path)


def test_defaults():
    config = load_config(environ={})
    assert config.jobs == DEFAULT_CONFIG["jobs"]
    assert config.window_length_days == 28
    assert config.am.n_chains >= 1
    assert config.horizon.prediction_horizon == 150 and config.horizon.step == 20
    assert config.seed is None


def test_layers_override_in_order(tmp_path):
    path = write_config(tmp_path, {"jobs": 2, "seed": 1, "output_dir": "from_file", "am": {"n_samples": 50}})
    config = load_config(path, environ={"MONITOR_JOBS": "3", "MONITOR_SEED": "7"})
    assert config.jobs == 3, "Environment beats the config file"
    assert config.seed == 7
    assert str(config.output_dir) == "from_file"
    assert config.am.n_samples == 50
    assert config.am.burn_in == RunConfig().am.burn_in, "Nested sections merge with their defaults"

    config = load_config(path, overrides={"jobs": 4, "output_dir": None}, environ={"MONITOR_JOBS": "3"})
    assert config.jobs == 4, "Command-line values beat the environment"
    assert str(config.output_dir) == "from_file", "Unset command-line values do not override"


def test_environment_overrides_ignore_empty_values():
    assert environment_overrides({"MONITOR_SEED": "", "MONITOR_LOG_LEVEL": "DEBUG", "OTHER": "x"}) == {
        "log_level": "DEBUG"
    }


def test_nested_sections_and_dates(tmp_path):
    path = write_config(tmp_path, {
        "period_start": "2020-03-10", "period_end": "2020-06-01",
        "horizon": {"prediction_horizon": 60, "step": 10},
        "noise": {"epsilon": 0.01},
        "outlier_dates": ["2020-04-13"],
        "recovered_anchor": ["2020-05-01", 0.07],
    })
    config = load_config(path, environ={})
    assert config.period_start == date(2020, 3, 10)
    assert config.horizon.step == 10
    assert config.noise.epsilon == 0.01
    assert config.outlier_dates == [date(2020, 4, 13)]
    assert config.recovered_anchor == (date(2020, 5, 1), 0.07)


@pytest.mark.parametrize("bad", [
    {"jobs": 0},
    {"seed": -1},
    {"log_level": "LOUD"},
    {"period_start": "2020-06-01", "period_end": "2020-03-01"},
    {"horizon": {"prediction_horizon": 10, "step": 20}},
    {"window_length_days": 0},
])
def test_invalid_values_raise_config_error(tmp_path, bad):
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, bad), environ={})


def test_unreadable_config_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"), environ={})
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(ConfigError):
        load_config(str(broken), environ={})


def test_require_seed():
    with pytest.raises(ConfigError):
        RunConfig().require_seed()
    assert RunConfig(seed=3).require_seed() == 3


def test_output_layout(tmp_path):
    config = RunConfig(output_dir=tmp_path)
    assert config.ingest_dir == tmp_path / "ingest"
    assert config.chain_dir == tmp_path / "chains"
    assert config.report_dir == tmp_path / "report"
