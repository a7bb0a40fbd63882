from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence
import logging

from covid_monitor.config import RunConfig
from covid_monitor.io import write_json
from .base_stage import BaseStage, StageResult
from .beta_stage import BetaStage
from .bootstrap_stage import BootstrapStage
from .fit_stage import FitStage
from .forecast_stage import ForecastStage
from .ingest_stage import IngestStage
from .report_stage import ReportStage


class StageStatus(Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class WorkflowStep:
    """One entry of the stage registry."""
    name: str
    factory: Callable[[RunConfig, Dict[str, Any]], BaseStage]
    description: str


# Weekly model update: new data, refit, forecast, report
WEEKLY_CHAIN = ("ingest", "fit", "predict", "report")


class PipelineCoordinator:
    """
    Runs pipeline stages in order:
    - sharing in-memory results between stages of the same run
    - recording start, end, duration and status of every phase
    - stopping at the first failing stage
    """

    def __init__(self, config: RunConfig, monitor_logger=None):
        self.config = config
        self.logger = logging.getLogger(__name__)
        self.monitor_logger = monitor_logger
        self.workflow = self._define_workflow()
        self.state: Dict[str, Any] = {
            "status": "initialized",
            "start_time": None,
            "end_time": None,
            "phases": [],
            "errors": [],
        }

    def _define_workflow(self) -> Dict[str, WorkflowStep]:
        steps = [
            WorkflowStep("ingest", lambda c, o: IngestStage(c, dry_run=o.get("dry_run", False)),
                         "Parse, clean and smooth the input files"),
            WorkflowStep("fit", lambda c, o: FitStage(c, warm_start=o.get("warm_start")),
                         "Sample the posterior per region"),
            WorkflowStep("predict", lambda c, o: ForecastStage(c, horizon=o.get("horizon")),
                         "Forecast H, W and D"),
            WorkflowStep("beta", lambda c, o: BetaStage(c), "Estimate the daily transmission rate"),
            WorkflowStep("bootstrap", lambda c, o: BootstrapStage(c, n_boot=o.get("n_boot")),
                         "Estimate the posterior bias"),
            WorkflowStep("report", lambda c, o: ReportStage(c), "Write the weekly report"),
        ]
        return {step.name: step for step in steps}

    async def run(self, stages: Sequence[str], options: Optional[Dict[str, Any]] = None) -> List[StageResult]:
        """Run ``stages`` in the given order; re-raises the error of a failing stage."""
        unknown = [s for s in stages if s not in self.workflow]
        if unknown:
            raise ValueError(f"Unknown stages: {', '.join(unknown)}")
        options = options or {}
        context: Dict[str, Any] = {}
        results: List[StageResult] = []
        self.state["status"] = StageStatus.RUNNING.value
        self.state["start_time"] = datetime.utcnow().isoformat()
        try:
            for name in stages:
                stage = self.workflow[name].factory(self.config, options)
                results.append(await self._execute_phase(stage, context))
            self.state["status"] = StageStatus.COMPLETED.value
            return results
        except Exception as e:
            self.state["status"] = StageStatus.FAILED.value
            self.state["errors"].append({
                "phase": self.state.get("current_phase", "unknown"),
                "error": str(e),
                "type": type(e).__name__,
                "timestamp": datetime.utcnow().isoformat()
            })
            raise
        finally:
            self.state["end_time"] = datetime.utcnow().isoformat()
            self._save_state(stages, options)

    async def _execute_phase(self, stage: BaseStage, context: Dict[str, Any]) -> StageResult:
        phase_start = datetime.utcnow()
        self.state["current_phase"] = stage.name
        if self.monitor_logger:
            self.monitor_logger.log_phase_start(stage.name, stage.to_dict())
        else:
            self.logger.info(f"Starting phase: {stage.name}")

        try:
            result = await stage.run(context)
        except Exception as e:
            self.state["phases"].append({
                "name": stage.name,
                "start_time": phase_start.isoformat(),
                "end_time": datetime.utcnow().isoformat(),
                "status": StageStatus.FAILED.value,
                "error": str(e)
            })
            if self.monitor_logger:
                self.monitor_logger.log_phase_end(stage.name, StageStatus.FAILED.value, {"error": str(e)})
            self.logger.error(f"Phase {stage.name} failed: {e}")
            raise

        phase_end = datetime.utcnow()
        self.state["phases"].append({
            "name": stage.name,
            "start_time": phase_start.isoformat(),
            "end_time": phase_end.isoformat(),
            "duration_seconds": (phase_end - phase_start).total_seconds(),
            "status": result.status,
            "outputs": result.outputs,
            "metrics": result.metrics,
            "warnings": result.warnings,
        })
        if self.monitor_logger:
            self.monitor_logger.log_phase_end(stage.name, result.status)
            for region, metrics in result.metrics.items():
                if isinstance(metrics, dict):
                    self.monitor_logger.log_region_event(region, f"{stage.name} {result.status}", metrics)
                    for key, value in metrics.items():
                        if isinstance(value, (int, float)):
                            self.monitor_logger.log_metric(f"{stage.name}.{key}", value, region)
        return result

    def _save_state(self, stages: Sequence[str], options: Dict[str, Any]):
        # Dry runs promise no files
        if options.get("dry_run"):
            return
        state = {**self.state, "stages": list(stages), "seed": self.config.seed}
        try:
            write_json(state, self.config.output_dir / "run_state.json")
        except OSError as e:
            self.logger.warning(f"Could not write run state: {e}")
