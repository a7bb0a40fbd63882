from abc import ABC, abstractmethod
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence
import asyncio
import logging
import re

import numpy as np
from pydantic import BaseModel, Field

from covid_monitor.config import RunConfig
from covid_monitor.data_pipeline import ObservationSeries, parse_regional_csv
from covid_monitor.errors import DataValidationError, MonitorError, PriorError
from covid_monitor.priors import PriorSet
from covid_monitor.sampler import PosteriorChain

# Stream purposes for SeedSequence spawn keys
SEED_FIT = 0
SEED_PREDICT = 1
SEED_BOOTSTRAP = 2


class StageResult(BaseModel):
    """Outcome of one stage, as recorded by the coordinator."""
    stage: str
    status: str = "completed"
    outputs: Dict[str, Any] = Field(default_factory=dict)
    metrics: Dict[str, Any] = Field(default_factory=dict)
    warnings: List[str] = Field(default_factory=list)


class StageError(MonitorError):
    """Base exception for pipeline stage errors."""
    pass


class StageConfigurationError(StageError):
    """Raised when a stage cannot start: bad configuration, missing inputs."""
    pass


class StageExecutionError(StageError):
    """Raised when a stage fails while computing."""
    def __init__(self, message: str, original_exception: Optional[Exception] = None):
        super().__init__(message)
        self.original_exception = original_exception


def safe_name(region_id: str) -> str:
    """File-system friendly form of a region id."""
    return re.sub(r"[^A-Za-z0-9_-]+", "_", region_id).strip("_") or "region"


def region_seed(seed: int, purpose: int, region_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(purpose, region_index))


class BaseStage(ABC):
    """One step of the weekly pipeline."""

    def __init__(self, name: str, description: str, config: RunConfig):
        self.name = name
        self.description = description
        self.config = config
        self.logger = logging.getLogger(f"stages.{name}")

    @abstractmethod
    async def run(self, context: Dict[str, Any]) -> StageResult:
        """Run the stage; ``context`` carries results of earlier stages in the same run."""
        pass

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "type": self.__class__.__name__
        }

    # -- shared inputs -----------------------------------------------------

    def load_priors(self) -> PriorSet:
        try:
            priors = PriorSet.from_json(self.config.prior_file)
        except PriorError as e:
            raise StageConfigurationError(str(e)) from e
        if priors.window_length_days != self.config.window_length_days:
            priors = priors.model_copy(update={"window_length_days": self.config.window_length_days})
        return priors

    def load_ingested(self) -> List[ObservationSeries]:
        """Cleaned series written by the ingest stage, sorted by region id."""
        directory = self.config.ingest_dir
        files = sorted(directory.glob("*.csv")) if directory.exists() else []
        if not files:
            raise StageConfigurationError(f"No ingested data in {directory}; run 'ingest' first")
        series = []
        for path in files:
            try:
                series.extend(parse_regional_csv(path, self.config.schema_columns))
            except DataValidationError as e:
                raise StageConfigurationError(str(e)) from e
        series = [s.slice(self.config.period_start, self.config.period_end) for s in series]
        if self.config.regions:
            series = [s for s in series if s.region_id in self.config.regions]
        return sorted(series, key=lambda s: s.region_id)

    def chain_paths(self, region_id: str, directory: Optional[Path] = None) -> List[Path]:
        directory = directory or self.config.chain_dir
        return sorted(directory.glob(f"{safe_name(region_id)}_chain*.csv"))

    def load_chains(self, region_id: str, directory: Optional[Path] = None) -> List[PosteriorChain]:
        paths = self.chain_paths(region_id, directory)
        if not paths:
            raise StageConfigurationError(f"No chains for region {region_id}; run 'fit' first")
        return [PosteriorChain.from_csv(p) for p in paths]

    # -- region parallelism ------------------------------------------------

    async def map_regions(self, worker: Callable[..., Any], tasks: Sequence[Dict[str, Any]]) -> List[Any]:
        """Run ``worker(**task)`` for every task, ``jobs`` at a time; results keep task order."""
        jobs = self.config.jobs
        if jobs <= 1 or len(tasks) <= 1:
            return [worker(**task) for task in tasks]

        loop = asyncio.get_running_loop()
        semaphore = asyncio.Semaphore(jobs)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            async def submit(task):
                async with semaphore:
                    return await loop.run_in_executor(pool, _call, worker, task)
            return list(await asyncio.gather(*(submit(t) for t in tasks)))


def _call(worker: Callable[..., Any], task: Dict[str, Any]) -> Any:
    return worker(**task)
