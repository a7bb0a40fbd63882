from pathlib import Path
from typing import Any, Dict, List

import numpy as np

from covid_monitor.beta_optimizer import HorizonConfig
from covid_monitor.bootstrap import parametric_bootstrap
from covid_monitor.data_pipeline import ObservationSeries
from covid_monitor.errors import MonitorError
from covid_monitor.io import write_csv, write_json
from covid_monitor.kalman import NoiseConfig
from covid_monitor.priors import PriorSet
from covid_monitor.sampler import AmConfig, PosteriorChain
from .base_stage import (
    SEED_BOOTSTRAP,
    BaseStage,
    StageConfigurationError,
    StageExecutionError,
    StageResult,
    region_seed,
    safe_name,
)


def bootstrap_chain_paths(bootstrap_dir: Path, region_id: str) -> List[Path]:
    return sorted(bootstrap_dir.glob(f"{safe_name(region_id)}_boot[0-9]*.csv"))


def bootstrap_region(chain_paths: List[str], series: ObservationSeries, priors: PriorSet, am_cfg: AmConfig,
                     horizon_cfg: HorizonConfig, noise_cfg: NoiseConfig, n_boot: int,
                     seed: np.random.SeedSequence, bootstrap_dir: Path) -> Dict[str, Any]:
    reference = PosteriorChain.pool([PosteriorChain.from_csv(p) for p in chain_paths])
    outcome = parametric_bootstrap(reference, series, priors, am_cfg=am_cfg, horizon_cfg=horizon_cfg,
                                   n_boot=n_boot, seed=seed, noise_cfg=noise_cfg)
    name = safe_name(series.region_id)
    for b, (dataset, chain) in enumerate(zip(outcome.datasets, outcome.chains)):
        dataset.to_csv(bootstrap_dir / f"{name}_synthetic{b}.csv")
        chain.to_csv(bootstrap_dir / f"{name}_boot{b}.csv", extra={"replicate": b})
    report_path = write_csv(outcome.report.to_frame(), bootstrap_dir / f"{name}_bias.csv")
    medians = outcome.report.medians()
    write_json({"region": series.region_id, "n_boot": outcome.report.n_boot, "median": medians},
               bootstrap_dir / f"{name}_bias.json")
    return {
        "region": series.region_id,
        "path": str(report_path),
        "median": medians,
        "point_robust": int(np.sum(outcome.report.point_robust)),
        "interval_robust": int(np.sum(outcome.report.interval_robust)),
        "dimensions": len(outcome.report.names),
    }


class BootstrapStage(BaseStage):
    """Parametric bootstrap of the posterior bias per region."""

    def __init__(self, config, n_boot: int = None):
        super().__init__(
            name="bootstrap",
            description="Resimulate from the posterior mean, refit and estimate the bias",
            config=config
        )
        self.n_boot = n_boot or config.n_boot

    async def run(self, context: Dict[str, Any]) -> StageResult:
        seed = self.config.require_seed()
        priors = self.load_priors()
        series_list = context.get("series") or self.load_ingested()
        tasks = []
        for index, series in enumerate(series_list):
            paths = self.chain_paths(series.region_id)
            if not paths:
                raise StageConfigurationError(f"No chains for region {series.region_id}; run 'fit' first")
            tasks.append(dict(
                chain_paths=[str(p) for p in paths], series=series, priors=priors, am_cfg=self.config.am,
                horizon_cfg=self.config.horizon, noise_cfg=self.config.noise, n_boot=self.n_boot,
                seed=region_seed(seed, SEED_BOOTSTRAP, index), bootstrap_dir=self.config.bootstrap_dir,
            ))
        self.logger.info(f"{len(tasks)} regions x {self.n_boot} replicates")
        try:
            summaries = await self.map_regions(bootstrap_region, tasks)
        except MonitorError as e:
            raise StageExecutionError(f"Bootstrap failed: {e}", original_exception=e) from e

        result = StageResult(stage=self.name)
        for summary in summaries:
            region = summary["region"]
            result.outputs[region] = summary["path"]
            result.metrics[region] = {k: v for k, v in summary.items() if k not in ("region", "path")}
            if summary["point_robust"] < summary["dimensions"]:
                result.warnings.append(
                    f"{region}: {summary['dimensions'] - summary['point_robust']} parameters not point-robust"
                )
        return result
