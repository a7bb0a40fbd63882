from pathlib import Path
from typing import Any, Dict, List

from covid_monitor.beta_optimizer import (
    FrozenModel,
    HorizonConfig,
    junction_discontinuity,
    optimize_receding,
    r_t_upper,
    tail_deviation,
)
from covid_monitor.data_pipeline import ObservationSeries
from covid_monitor.errors import MonitorError
from covid_monitor.kalman import NoiseConfig
from covid_monitor.priors import unpack_point
from covid_monitor.sampler import PosteriorChain
from .base_stage import BaseStage, StageConfigurationError, StageExecutionError, StageResult, safe_name


def beta_region(chain_paths: List[str], series: ObservationSeries, horizon_cfg: HorizonConfig,
                noise_cfg: NoiseConfig, beta_dir: Path, r_t_max: float) -> Dict[str, Any]:
    """Daily beta at the posterior mean of one region."""
    chain = PosteriorChain.pool([PosteriorChain.from_csv(p) for p in chain_paths])
    p, schedule = unpack_point(chain.mmse(), chain.window_boundaries)
    trajectory = optimize_receding(series, FrozenModel(p, schedule, noise_cfg, r_t_max), horizon_cfg)
    path = trajectory.to_csv(beta_dir / f"{safe_name(series.region_id)}.csv")
    return {
        "region": series.region_id,
        "path": str(path),
        "objective": trajectory.objective,
        "c": trajectory.c,
        "converged": trajectory.converged,
        "windows": len(trajectory.windows),
        "junction_discontinuity": junction_discontinuity(trajectory),
        "tail_deviation": tail_deviation(trajectory),
    }


class BetaStage(BaseStage):
    """Receding-horizon estimate of the daily transmission rate."""

    def __init__(self, config):
        super().__init__(
            name="beta",
            description="Estimate daily beta and R_t with the posterior mean held fixed",
            config=config
        )

    async def run(self, context: Dict[str, Any]) -> StageResult:
        series_list = context.get("series") or self.load_ingested()
        r_t_max = r_t_upper(self.load_priors())
        tasks = []
        for series in series_list:
            paths = self.chain_paths(series.region_id)
            if not paths:
                raise StageConfigurationError(f"No chains for region {series.region_id}; run 'fit' first")
            tasks.append(dict(
                chain_paths=[str(p) for p in paths], series=series, horizon_cfg=self.config.horizon,
                noise_cfg=self.config.noise, beta_dir=self.config.beta_dir, r_t_max=r_t_max,
            ))
        try:
            summaries = await self.map_regions(beta_region, tasks)
        except MonitorError as e:
            raise StageExecutionError(f"Beta estimation failed: {e}", original_exception=e) from e

        result = StageResult(stage=self.name)
        for summary in summaries:
            region = summary["region"]
            result.outputs[region] = summary["path"]
            result.metrics[region] = {k: v for k, v in summary.items() if k not in ("region", "path")}
            if not summary["converged"]:
                result.warnings.append(f"{region}: at least one window did not converge")
                self.logger.warning(f"{region}: L-BFGS-B stopped before convergence in some window")
        context["beta"] = result.outputs
        return result
