from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from covid_monitor.analysis import PosteriorForecast, posterior_predictive
from covid_monitor.data_pipeline import FIELDS, ObservationSeries
from covid_monitor.errors import MonitorError
from covid_monitor.io import write_csv
from covid_monitor.kalman import NoiseConfig
from covid_monitor.sampler import PosteriorChain
from .base_stage import (
    SEED_PREDICT,
    BaseStage,
    StageConfigurationError,
    StageExecutionError,
    StageResult,
    region_seed,
    safe_name,
)


def forecast_paths(forecast_dir: Path, region_id: str, issued: str) -> Dict[str, Path]:
    stem = f"{safe_name(region_id)}_{issued}"
    return {"summary": forecast_dir / f"{stem}.csv", "ensemble": forecast_dir / f"{stem}_ensemble.csv"}


def ensemble_frame(forecast: PosteriorForecast) -> pd.DataFrame:
    horizon, members, _ = forecast.ensemble.shape
    return pd.DataFrame({
        "date": np.repeat([d.isoformat() for d in forecast.dates], members),
        "member": np.tile(np.arange(members), horizon),
        **{name: forecast.ensemble[:, :, j].ravel() for j, name in enumerate(FIELDS)},
    })


def read_ensembles(path: Path) -> Dict[Any, np.ndarray]:
    frame = pd.read_csv(path)
    frame["date"] = pd.to_datetime(frame["date"]).dt.date
    return {d: group[list(FIELDS)].to_numpy(dtype=float) for d, group in frame.groupby("date")}


def predict_region(chain_paths: List[str], series: ObservationSeries, horizon: int, noise_cfg: NoiseConfig,
                   n_draws: int, n_per_draw: int, seed: np.random.SeedSequence,
                   forecast_dir: Path) -> Dict[str, Any]:
    chain = PosteriorChain.pool([PosteriorChain.from_csv(p) for p in chain_paths])
    forecast = posterior_predictive(chain, series, horizon, noise_cfg, n_draws=n_draws,
                                    n_per_draw=n_per_draw, seed=seed)
    paths = forecast_paths(forecast_dir, series.region_id, series.end.isoformat())
    write_csv(forecast.summary(), paths["summary"])
    write_csv(ensemble_frame(forecast), paths["ensemble"])
    return {"region": series.region_id, "summary": str(paths["summary"]), "ensemble": str(paths["ensemble"])}


class ForecastStage(BaseStage):
    """Posterior predictive forecasts of H, W and D."""

    def __init__(self, config, horizon: Optional[int] = None):
        super().__init__(
            name="predict",
            description="Forecast hospital load and deaths from the posterior",
            config=config
        )
        self.horizon = horizon or config.forecast_horizon

    async def run(self, context: Dict[str, Any]) -> StageResult:
        seed = self.config.require_seed()
        series_list = context.get("series") or self.load_ingested()
        tasks = []
        for index, series in enumerate(series_list):
            paths = self.chain_paths(series.region_id)
            if not paths:
                raise StageConfigurationError(f"No chains for region {series.region_id}; run 'fit' first")
            tasks.append(dict(
                chain_paths=[str(p) for p in paths], series=series, horizon=self.horizon,
                noise_cfg=self.config.noise, n_draws=self.config.n_draws, n_per_draw=self.config.n_per_draw,
                seed=region_seed(seed, SEED_PREDICT, index), forecast_dir=self.config.forecast_dir,
            ))
        try:
            outputs = await self.map_regions(predict_region, tasks)
        except MonitorError as e:
            raise StageExecutionError(f"Forecast failed: {e}", original_exception=e) from e

        result = StageResult(stage=self.name)
        for output in outputs:
            result.outputs[output["region"]] = {"summary": output["summary"], "ensemble": output["ensemble"]}
        context["forecasts"] = result.outputs
        return result
