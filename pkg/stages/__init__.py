"""Pipeline stages run by the command line: ingest, fit, predict, beta, bootstrap, report."""
from .base_stage import BaseStage, StageConfigurationError, StageError, StageExecutionError, StageResult
from .coordinator import WEEKLY_CHAIN, PipelineCoordinator

__all__ = [
    "BaseStage",
    "PipelineCoordinator",
    "StageConfigurationError",
    "StageError",
    "StageExecutionError",
    "StageResult",
    "WEEKLY_CHAIN",
]
