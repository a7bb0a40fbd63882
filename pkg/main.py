#!/usr/bin/env python3
"""
Hospital-Load Monitor

Weekly estimation and forecasting of hospital care, intensive care and
deaths per region from daily counts.
"""
import asyncio
import argparse
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from covid_monitor.config import ConfigError, RunConfig, load_config
from covid_monitor.errors import MonitorError
from stages import WEEKLY_CHAIN, PipelineCoordinator, StageConfigurationError, StageExecutionError
from utils.logger import MonitorLogger

# Load environment variables
load_dotenv()

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# Stages that read the raw input files or the prior file
_NEEDS_DATA = ("ingest",)
_NEEDS_PRIORS = ("fit", "bootstrap")


class HospitalMonitor:
    """Runs pipeline stages for one configuration."""

    def __init__(self, config: RunConfig, dry_run: bool = False):
        self.config = config
        log_dir = None if dry_run else config.output_dir / "logs"
        self.logger = MonitorLogger(config.log_level, log_dir=log_dir)

    def _validate_config(self, stages: Sequence[str]):
        """Check the inputs the requested stages need before any of them starts."""
        if any(s in _NEEDS_DATA for s in stages):
            if not self.config.data_files:
                raise ConfigError("No input files given (--data or data_files in the config)")
            for path in self.config.data_files:
                if not Path(path).exists():
                    raise ConfigError(f"Input file not found: {path}")
        if any(s in _NEEDS_PRIORS for s in stages) and not Path(self.config.prior_file).exists():
            raise ConfigError(f"Prior file not found: {self.config.prior_file}")
        if self.config.populations_file is not None and not Path(self.config.populations_file).exists():
            raise ConfigError(f"Population file not found: {self.config.populations_file}")

    async def run(self, stages: Sequence[str], options: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """
        Run the given stages in order.

        Returns:
            Dict with status, exit code, stage results and the recorded phases
        """
        self.logger.info(f"Running stages: {', '.join(stages)}")
        coordinator = PipelineCoordinator(self.config, monitor_logger=self.logger)
        try:
            self._validate_config(stages)
            results = await coordinator.run(stages, options)
        except (ConfigError, StageConfigurationError) as e:
            self.logger.warning(f"Configuration error: {e}")
            return {"status": "failed", "error": str(e), "exit_code": EXIT_USAGE,
                    "phases": coordinator.state["phases"]}
        except (StageExecutionError, MonitorError) as e:
            self.logger.error(f"Run failed: {e}")
            return {"status": "failed", "error": str(e), "exit_code": EXIT_FAILURE,
                    "phases": coordinator.state["phases"]}
        finally:
            self.logger.close()
        return {
            "status": "completed",
            "exit_code": EXIT_OK,
            "results": [r.model_dump() for r in results],
            "phases": coordinator.state["phases"],
        }


def _add_global_flags(parser: argparse.ArgumentParser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="Path to configuration file (JSON)")
    parser.add_argument("--seed", type=int, default=default, help="Master random seed")
    parser.add_argument("--jobs", type=int, default=default, help="Regions processed in parallel")
    parser.add_argument("--output-dir", default=default, help="Output directory")
    parser.add_argument("--log-level", default=default, choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Logging level")
    parser.add_argument("--data", nargs="+", default=default, help="Regional input CSV files")
    parser.add_argument("--prior-file", default=default, help="Prior JSON file")
    parser.add_argument("--region", action="append", default=default, help="Restrict to a region (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Hospital-Load Monitor")
    _add_global_flags(parser, suppress=False)
    # Global flags are also accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _add_global_flags(common, suppress=True)

    commands = parser.add_subparsers(dest="command", required=True)
    ingest = commands.add_parser("ingest", parents=[common], help="Clean and smooth the input files")
    ingest.add_argument("--dry-run", action="store_true", help="Check and report only, write nothing")
    fit = commands.add_parser("fit", parents=[common], help="Sample the posterior per region")
    fit.add_argument("--warm-start", help="Directory with chains of an earlier run")
    predict = commands.add_parser("predict", parents=[common], help="Forecast H, W and D")
    predict.add_argument("--horizon", type=int, help="Forecast horizon in days")
    commands.add_parser("beta", parents=[common], help="Estimate the daily transmission rate")
    bootstrap = commands.add_parser("bootstrap", parents=[common], help="Parametric bootstrap of the bias")
    bootstrap.add_argument("--n-boot", type=int, help="Number of bootstrap replicates")
    report = commands.add_parser("report", parents=[common], help="Write the weekly report")
    report.add_argument("--weekly", action="store_true", help="Run ingest, fit, predict and report in one go")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "seed": args.seed,
        "jobs": args.jobs,
        "output_dir": args.output_dir,
        "log_level": args.log_level,
        "data_files": args.data,
        "prior_file": args.prior_file,
        "regions": args.region,
    }
    return load_config(args.config, overrides)


def stages_for(args: argparse.Namespace) -> List[str]:
    if args.command == "report" and args.weekly:
        return list(WEEKLY_CHAIN)
    return [args.command]


async def main(argv: Optional[Sequence[str]] = None) -> int:
    """Command-line interface for the monitor."""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = config_from_args(args)
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE

    options = {
        "dry_run": getattr(args, "dry_run", False),
        "warm_start": getattr(args, "warm_start", None),
        "horizon": getattr(args, "horizon", None),
        "n_boot": getattr(args, "n_boot", None),
    }
    monitor = HospitalMonitor(config, dry_run=options["dry_run"])
    result = await monitor.run(stages_for(args), options)

    if result["status"] == "completed":
        print(f"\n✅ {' -> '.join(stages_for(args))} completed")
        for stage in result["results"]:
            for warning in stage["warnings"]:
                print(f"⚠️  {stage['stage']}: {warning}")
        print(f"📁 Output directory: {config.output_dir}")
    else:
        print(f"\n❌ Failed: {result['error']}", file=sys.stderr)
    return result["exit_code"]


if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
