"""
Run configuration: defaults, then a JSON file, then MONITOR_* environment
variables, then command-line values, validated into a RunConfig.
"""
from datetime import date
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple
import json
import os

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator

from .beta_optimizer import HorizonConfig
from .data_pipeline import DEFAULT_THRESHOLDS, CsvSchema
from .errors import MonitorError
from .kalman import NoiseConfig
from .priors import DEFAULT_PRIOR_FILE
from .sampler import AmConfig

DEFAULT_CONFIG: Dict[str, Any] = {
    "data_files": [],
    "prior_file": str(DEFAULT_PRIOR_FILE),
    "regions": [],
    "output_dir": "output",
    "window_length_days": 28,
    "jobs": 1,
    "log_level": "INFO",
    "kernel_width": 7,
    "thresholds": list(DEFAULT_THRESHOLDS),
    "forecast_horizon": 7,
    "n_boot": 3,
    "n_draws": 200,
    "n_per_draw": 10,
}

# Environment variable -> config key
ENVIRONMENT_KEYS: Dict[str, str] = {
    "MONITOR_OUTPUT_DIR": "output_dir",
    "MONITOR_JOBS": "jobs",
    "MONITOR_SEED": "seed",
    "MONITOR_LOG_LEVEL": "log_level",
    "MONITOR_PRIOR_FILE": "prior_file",
}


class ConfigError(MonitorError):
    """Raised when the merged configuration is invalid."""
    pass


class RunConfig(BaseModel):
    """Everything one pipeline run needs."""
    data_files: List[Path] = Field(default_factory=list)
    prior_file: Path = DEFAULT_PRIOR_FILE
    populations_file: Optional[Path] = None
    positives_file: Optional[Path] = None
    regions: List[str] = Field(default_factory=list)
    period_start: Optional[date] = None
    period_end: Optional[date] = None
    window_length_days: int = Field(default=28, ge=1)
    am: AmConfig = Field(default_factory=AmConfig)
    horizon: HorizonConfig = Field(default_factory=HorizonConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    schema_columns: CsvSchema = Field(default_factory=CsvSchema)
    output_dir: Path = Path("output")
    seed: Optional[int] = Field(default=None, ge=0)
    jobs: int = Field(default=1, ge=1)
    log_level: str = "INFO"
    kernel_width: int = Field(default=7, ge=1)
    thresholds: List[float] = Field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    outlier_dates: List[date] = Field(default_factory=list)
    forecast_horizon: int = Field(default=7, ge=1)
    n_boot: int = Field(default=3, ge=1)
    n_draws: int = Field(default=200, ge=1)
    n_per_draw: int = Field(default=10, ge=1)
    recovered_anchor: Optional[Tuple[date, float]] = None

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if self.period_start and self.period_end and self.period_end < self.period_start:
            raise ValueError(f"period_end {self.period_end} precedes period_start {self.period_start}")
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"Unknown log level {self.log_level!r}")
        return self

    @property
    def ingest_dir(self) -> Path:
        return self.output_dir / "ingest"

    @property
    def chain_dir(self) -> Path:
        return self.output_dir / "chains"

    @property
    def forecast_dir(self) -> Path:
        return self.output_dir / "forecast"

    @property
    def beta_dir(self) -> Path:
        return self.output_dir / "beta"

    @property
    def bootstrap_dir(self) -> Path:
        return self.output_dir / "bootstrap"

    @property
    def report_dir(self) -> Path:
        return self.output_dir / "report"

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("A seed is required for reproducible runs (--seed or MONITOR_SEED)")
        return self.seed


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def environment_overrides(environ: Optional[Dict[str, str]] = None) -> Dict[str, Any]:
    environ = os.environ if environ is None else environ
    return {key: environ[name] for name, key in ENVIRONMENT_KEYS.items() if environ.get(name)}


def load_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
                environ: Optional[Dict[str, str]] = None, dotenv: bool = True) -> RunConfig:
    """Merge the configuration layers and validate them.

    Raises:
        ConfigError: unreadable config file or invalid values
    """
    if dotenv and environ is None:
        load_dotenv()
    config = dict(DEFAULT_CONFIG)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                config = _deep_merge(config, json.load(f))
        except FileNotFoundError as e:
            raise ConfigError(f"Config file not found: {config_path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {config_path} is not valid JSON: {e}") from e
    config = _deep_merge(config, environment_overrides(environ))
    config = _deep_merge(config, {k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(config)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
