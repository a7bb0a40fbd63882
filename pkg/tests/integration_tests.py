import asyncio
import json
import logging
import os
import sys
from pathlib import Path
from datetime import datetime, timedelta
import tempfile
import shutil

# Add parent directory to path for imports
sys.path.append(str(Path(__file__).parent.parent))
sys.path.append(str(Path(__file__).parent))

from covid_monitor.beta_optimizer import HorizonConfig
from covid_monitor.bootstrap import simulate_scenario
from covid_monitor.config import RunConfig
from covid_monitor.priors import PriorSet, prior_mean_parameters
from covid_monitor.sampler import AmConfig
from main import EXIT_OK, EXIT_USAGE, HospitalMonitor
from stages import WEEKLY_CHAIN

from conftest import START, SYNTHETIC_DAYS, SYNTHETIC_INIT, schedule_for, write_region_csv

WEEK_ONE_DAYS = 70


class IntegrationTests:
    """
    Integration tests for the Hospital-Load Monitor.
    Runs the stages end to end on simulated regions with short chains.
    """

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.test_data_dir = None
        self.test_results = []
        self.regions = []

    async def setup(self):
        """Set up test environment."""
        self.test_data_dir = tempfile.mkdtemp(prefix="monitor_test_")

        logging.basicConfig(
            level=logging.INFO,
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )

        params = prior_mean_parameters(PriorSet.default())
        schedule = schedule_for(SYNTHETIC_DAYS)
        for seed, (region, population) in enumerate((("uppsala", 383_713), ("vastmanland", 275_845))):
            data = simulate_scenario(params, schedule, SYNTHETIC_DAYS, SYNTHETIC_INIT, seed=seed,
                                     region_id=region, population=population)
            self.regions.append(data.series)
        self.logger.info(f"Test environment set up at: {self.test_data_dir}")

    async def teardown(self):
        """Clean up test environment."""
        if self.test_data_dir and os.path.exists(self.test_data_dir):
            shutil.rmtree(self.test_data_dir)
            self.logger.info("Test environment cleaned up")

    def _data_file(self, name: str, days: int) -> Path:
        end = START + timedelta(days=days - 1)
        return write_region_csv(Path(self.test_data_dir) / name, [s.slice(None, end) for s in self.regions])

    def _config(self, name: str, data_file: Path, **updates) -> RunConfig:
        values = dict(
            data_files=[data_file],
            output_dir=Path(self.test_data_dir) / name,
            seed=11,
            am=AmConfig(n_chains=2, n_samples=40, burn_in=10, warm_start_burn_in=5),
            horizon=HorizonConfig(prediction_horizon=40, step=20),
            n_draws=5,
            n_per_draw=2,
            n_boot=1,
            log_level="WARNING",
        )
        values.update(updates)
        return RunConfig(**values)

    async def run_all_tests(self):
        """Run all integration tests."""
        self.logger.info("=" * 60)
        self.logger.info("Starting Integration Tests")
        self.logger.info("=" * 60)

        test_methods = [
            self.test_weekly_chain,
            self.test_beta_and_bootstrap,
            self.test_second_week,
            self.test_parallel_regions,
            self.test_error_handling,
        ]

        for test_method in test_methods:
            try:
                self.logger.info(f"\nRunning {test_method.__name__}...")
                result = await test_method()
                self.test_results.append({
                    "test": test_method.__name__,
                    "status": "PASSED" if result else "FAILED",
                    "timestamp": datetime.now().isoformat()
                })
                self.logger.info(f"✅ {test_method.__name__}: {'PASSED' if result else 'FAILED'}")
            except Exception as e:
                self.logger.error(f"❌ {test_method.__name__}: ERROR - {str(e)}")
                self.test_results.append({
                    "test": test_method.__name__,
                    "status": "ERROR",
                    "error": str(e),
                    "timestamp": datetime.now().isoformat()
                })

        self.print_test_summary()

        return all(r["status"] == "PASSED" for r in self.test_results)

    async def test_weekly_chain(self):
        """Ingest, fit, predict and report in one run."""
        try:
            config = self._config("weekly", self._data_file("week1.csv", WEEK_ONE_DAYS))
            result = await HospitalMonitor(config).run(list(WEEKLY_CHAIN))
            assert result["exit_code"] == EXIT_OK, f"Weekly run failed: {result.get('error')}"
            assert [p["name"] for p in result["phases"]] == list(WEEKLY_CHAIN)

            for region in ("uppsala", "vastmanland"):
                assert (config.ingest_dir / f"{region}.csv").exists(), f"No cleaned series for {region}"
                assert len(list(config.chain_dir.glob(f"{region}_chain*.csv"))) == 2, "Expected two chains"
                issued = (START + timedelta(days=WEEK_ONE_DAYS - 1)).isoformat()
                assert (config.forecast_dir / f"{region}_{issued}.csv").exists(), "Forecast not written"

            report = json.loads((config.report_dir / "report.json").read_text())
            assert [r["region"] for r in report["regions"]] == ["uppsala", "vastmanland"]
            assert report["regions"][0]["previous_forecast_score"] is None, "Nothing to score in week one"
            markdown = (config.report_dir / "report.md").read_text()
            assert "uppsala" in markdown
            return True
        except Exception as e:
            self.logger.error(f"Weekly chain test failed: {str(e)}")
            return False

    async def test_beta_and_bootstrap(self):
        """Daily beta and the bias bootstrap on top of the weekly run."""
        try:
            config = self._config("weekly", Path(self.test_data_dir) / "week1.csv")
            result = await HospitalMonitor(config).run(["beta", "bootstrap", "report"])
            assert result["exit_code"] == EXIT_OK, f"Run failed: {result.get('error')}"
            assert (config.beta_dir / "uppsala.csv").exists(), "Daily beta not written"
            assert (config.bootstrap_dir / "uppsala_bias.csv").exists(), "Bias table not written"
            assert (config.bootstrap_dir / "uppsala_boot0.csv").exists()

            report = json.loads((config.report_dir / "report.json").read_text())
            region = report["regions"][0]
            assert region["bootstrap_replicates"] == 1
            assert region["r_t_daily"] is not None
            assert "bias" in region["ifr"][0], "IFR periods carry the bootstrap flags"
            return True
        except Exception as e:
            self.logger.error(f"Beta and bootstrap test failed: {str(e)}")
            return False

    async def test_second_week(self):
        """A week later: warm start from last week's chains and score last week's forecast."""
        try:
            config = self._config("weekly", self._data_file("week2.csv", WEEK_ONE_DAYS + 7))
            options = {"warm_start": config.chain_dir}
            result = await HospitalMonitor(config).run(list(WEEKLY_CHAIN), options)
            assert result["exit_code"] == EXIT_OK, f"Second week failed: {result.get('error')}"

            fit = next(p for p in result["phases"] if p["name"] == "fit")
            assert fit["status"] == "completed"
            report = json.loads((config.report_dir / "report.json").read_text())
            score = report["regions"][0]["previous_forecast_score"]
            assert score is not None, "Last week's forecast should be scored"
            assert score["n"] == 21, "Seven days of H, W and D"
            assert 0.0 <= score["coverage95"] <= 1.0
            return True
        except Exception as e:
            self.logger.error(f"Second week test failed: {str(e)}")
            return False

    async def test_parallel_regions(self):
        """Regions in worker processes give the same chains as a serial run."""
        try:
            data_file = Path(self.test_data_dir) / "week1.csv"
            chains = {}
            for jobs in (1, 2):
                config = self._config(f"jobs{jobs}", data_file, jobs=jobs)
                result = await HospitalMonitor(config).run(["ingest", "fit"])
                assert result["exit_code"] == EXIT_OK, f"jobs={jobs} failed: {result.get('error')}"
                chains[jobs] = {p.name: p.read_text() for p in sorted(config.chain_dir.glob("*.csv"))}
            assert chains[1] == chains[2], "Chains depend on the number of workers"
            return True
        except Exception as e:
            self.logger.error(f"Parallel regions test failed: {str(e)}")
            return False

    async def test_error_handling(self):
        """Configuration problems end with the usage exit code."""
        try:
            config = self._config("missing", Path(self.test_data_dir) / "does_not_exist.csv")
            result = await HospitalMonitor(config).run(["ingest"])
            assert result["exit_code"] == EXIT_USAGE

            bad = Path(self.test_data_dir) / "bad.csv"
            bad.write_text("date,region,hospital\n2020-03-10,a,1\n")
            result = await HospitalMonitor(self._config("bad", bad)).run(["ingest"])
            assert result["exit_code"] == EXIT_USAGE, "Missing columns are an input error"

            result = await HospitalMonitor(self._config("nochains", bad)).run(["predict"])
            assert result["exit_code"] == EXIT_USAGE, "Forecasting without ingested data"
            return True
        except Exception as e:
            self.logger.error(f"Error handling test failed: {str(e)}")
            return False

    def print_test_summary(self):
        """Print a summary of all test results."""
        self.logger.info("\n" + "=" * 60)
        self.logger.info("Integration Test Summary")
        self.logger.info("=" * 60)

        passed = sum(1 for r in self.test_results if r["status"] == "PASSED")
        failed = sum(1 for r in self.test_results if r["status"] == "FAILED")
        errors = sum(1 for r in self.test_results if r["status"] == "ERROR")

        self.logger.info(f"Total Tests: {len(self.test_results)}")
        self.logger.info(f"Passed: {passed}")
        self.logger.info(f"Failed: {failed}")
        self.logger.info(f"Errors: {errors}")

        if failed > 0 or errors > 0:
            self.logger.info("\nFailed/Error Tests:")
            for result in self.test_results:
                if result["status"] in ["FAILED", "ERROR"]:
                    self.logger.info(f"  - {result['test']}: {result['status']}")
                    if "error" in result:
                        self.logger.info(f"    Error: {result['error']}")

        self.logger.info("\n" + "=" * 60)


# Main test runner
async def main():
    """Run all integration tests."""
    tests = IntegrationTests()

    try:
        await tests.setup()
        success = await tests.run_all_tests()
        return 0 if success else 1
    finally:
        await tests.teardown()


def test_integration_suite():
    assert asyncio.run(main()) == 0, "Integration suite failed; see the log for the failing step"


if __name__ == "__main__":
    exit_code = asyncio.run(main())
    sys.exit(exit_code)
