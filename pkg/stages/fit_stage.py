from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from covid_monitor.data_pipeline import ObservationSeries
from covid_monitor.errors import MonitorError, SamplerError
from covid_monitor.kalman import NoiseConfig
from covid_monitor.model import make_windows
from covid_monitor.priors import PriorSet
from covid_monitor.sampler import (
    AmConfig,
    PosteriorChain,
    gelman_rubin_all,
    run_chains,
    warm_start_points,
)
from .base_stage import (
    SEED_FIT,
    BaseStage,
    StageExecutionError,
    StageResult,
    region_seed,
    safe_name,
)


def fit_region(priors: PriorSet, series: ObservationSeries, am_cfg: AmConfig, noise_cfg: NoiseConfig,
               seed: np.random.SeedSequence, chain_dir: Path,
               initial: Optional[List[np.ndarray]] = None) -> Dict[str, Any]:
    """Sample one region and write its chains; runs inside a worker process."""
    boundaries = list(make_windows(series.start, series.end, priors.window_length_days))
    chains = run_chains(priors, series, am_cfg, seed=seed, jobs=1, noise_cfg=noise_cfg,
                        window_boundaries=boundaries, initial=initial or None)
    names = chains[0].names
    try:
        rhat = dict(zip(names, gelman_rubin_all(chains))) if len(chains) > 1 else {}
    except SamplerError:
        rhat = {}
    extra = {"gelman_rubin": rhat, "am_config": am_cfg.model_dump(), "warm_start": bool(initial)}
    paths = []
    for c, chain in enumerate(chains):
        path = chain_dir / f"{safe_name(series.region_id)}_chain{c}.csv"
        paths.append(str(chain.to_csv(path, extra=extra)))
    return {
        "region": series.region_id,
        "paths": paths,
        "acceptance": [chain.acceptance_rate for chain in chains],
        "max_gelman_rubin": max(rhat.values()) if rhat else None,
        "failed_likelihoods": sum(chain.failed_likelihoods for chain in chains),
    }


class FitStage(BaseStage):
    """Adaptive Metropolis chains per region."""

    def __init__(self, config, warm_start: Optional[Path] = None):
        super().__init__(
            name="fit",
            description="Sample the posterior of every region with the Kalman likelihood",
            config=config
        )
        self.warm_start = Path(warm_start) if warm_start else None

    def _initial_points(self, priors: PriorSet, series: ObservationSeries) -> Optional[List[np.ndarray]]:
        if self.warm_start is None:
            return None
        paths = self.chain_paths(series.region_id, self.warm_start)
        if not paths:
            self.logger.warning(f"{series.region_id}: no stored chains in {self.warm_start}; starting from the prior")
            return None
        stored = [PosteriorChain.from_csv(p) for p in paths]
        boundaries = make_windows(series.start, series.end, priors.window_length_days)
        points = warm_start_points(stored, priors, boundaries)
        if points:
            self.logger.info(
                f"{series.region_id}: warm start from {len(points)} stored chains, "
                f"burn-in {self.config.am.warm_start_burn_in} instead of {self.config.am.burn_in}"
            )
        return points or None

    async def run(self, context: Dict[str, Any]) -> StageResult:
        seed = self.config.require_seed()
        priors = self.load_priors()
        series_list = context.get("series") or self.load_ingested()
        tasks = []
        for index, series in enumerate(series_list):
            tasks.append(dict(
                priors=priors, series=series, am_cfg=self.config.am, noise_cfg=self.config.noise,
                seed=region_seed(seed, SEED_FIT, index), chain_dir=self.config.chain_dir,
                initial=self._initial_points(priors, series),
            ))
        try:
            summaries = await self.map_regions(fit_region, tasks)
        except MonitorError as e:
            raise StageExecutionError(f"Sampling failed: {e}", original_exception=e) from e

        result = StageResult(stage=self.name)
        for summary in summaries:
            region = summary["region"]
            result.outputs[region] = summary["paths"]
            result.metrics[region] = {k: v for k, v in summary.items() if k not in ("region", "paths")}
            rhat = summary["max_gelman_rubin"]
            if rhat is not None and rhat >= 1.1:
                result.warnings.append(f"{region}: Gelman-Rubin {rhat:.3f} >= 1.1")
                self.logger.warning(f"{region}: chains have not mixed (Gelman-Rubin {rhat:.3f})")
        return result
