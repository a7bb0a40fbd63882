from datetime import date
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd
from jinja2 import Environment, FileSystemLoader, Template

from covid_monitor.analysis import (
    cfr_summary,
    death_decomposition,
    forecast_scores,
    hidden_states,
    ifr_window_summary,
    incidence_comparison,
)
from covid_monitor.data_pipeline import ObservationSeries
from covid_monitor.errors import DataValidationError, MonitorError
from covid_monitor.io import read_json, write_csv, write_json, write_text
from covid_monitor.kalman import NoiseConfig
from covid_monitor.sampler import PosteriorChain, posterior_summary
from .base_stage import BaseStage, StageConfigurationError, StageExecutionError, StageResult, safe_name
from .bootstrap_stage import bootstrap_chain_paths
from .forecast_stage import forecast_paths, read_ensembles

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"
REPORT_TEMPLATE = "weekly_report.md.j2"


def format_number(value: Any, fmt: str = "%.2f") -> str:
    """Jinja filter; JSON nulls (NaN, missing) print as n/a."""
    if value is None or isinstance(value, str):
        return "n/a" if value is None else value
    return fmt % value


def issued_forecasts(forecast_dir: Path, region_id: str) -> List[Tuple[date, Path]]:
    """(issue date, summary path) of every stored forecast of a region, oldest first."""
    name = safe_name(region_id)
    found = []
    for path in forecast_dir.glob(f"{name}_*.csv"):
        suffix = path.stem[len(name) + 1:]
        if suffix.endswith("_ensemble"):
            continue
        try:
            found.append((date.fromisoformat(suffix), path))
        except ValueError:
            continue
    return sorted(found)


def score_previous(forecast_dir: Path, series: ObservationSeries) -> Optional[Dict[str, Any]]:
    """Score the latest forecast issued before the end of ``series`` against it."""
    earlier = [(issued, path) for issued, path in issued_forecasts(forecast_dir, series.region_id)
               if issued < series.end]
    if not earlier:
        return None
    issued, path = earlier[-1]
    ensemble_path = forecast_paths(forecast_dir, series.region_id, issued.isoformat())["ensemble"]
    ensembles = read_ensembles(ensemble_path) if ensemble_path.exists() else None
    try:
        score = forecast_scores(pd.read_csv(path), series, ensembles)
    except DataValidationError:
        return None
    return {"issued": issued, **score.to_dict()}


def read_positives(path: Path, region_id: str) -> Optional[pd.Series]:
    """Daily positive tests of one region from a (date, region, positives) CSV."""
    frame = pd.read_csv(path)
    if not {"date", "region", "positives"} <= set(frame.columns):
        raise DataValidationError("Positive-test file needs date, region and positives columns", path=str(path))
    frame = frame[frame["region"].astype(str) == region_id]
    if frame.empty:
        return None
    return pd.Series(frame["positives"].to_numpy(dtype=float), index=pd.to_datetime(frame["date"]).dt.date)


def report_region(chain_paths: List[str], series: ObservationSeries, noise_cfg: NoiseConfig, n_draws: int,
                  recovered_anchor: Optional[Tuple[date, float]], boot_paths: List[str],
                  positives_file: Optional[Path], forecast_dir: Path, beta_dir: Path,
                  report_dir: Path) -> Dict[str, Any]:
    """Posterior summaries of one region; tidy CSVs go to ``report_dir``."""
    chain = PosteriorChain.pool([PosteriorChain.from_csv(p) for p in chain_paths])
    boot_chains = [PosteriorChain.from_csv(p) for p in boot_paths]
    name = safe_name(series.region_id)
    files = {}

    trajectory = hidden_states(chain, series, noise_cfg, recovered_anchor=recovered_anchor, n_draws=n_draws)
    files["hidden_states"] = str(write_csv(trajectory.to_tidy(), report_dir / f"{name}_states.csv"))
    deaths = death_decomposition(chain, series, noise_cfg, n_draws=n_draws)
    cfrs = cfr_summary(chain, n_draws=n_draws)
    ifr = ifr_window_summary(chain, boot_chains or None)
    files["deaths"] = str(write_csv(deaths, report_dir / f"{name}_deaths.csv"))
    files["ifr"] = str(write_csv(ifr, report_dir / f"{name}_ifr.csv"))

    windows = posterior_summary([chain])
    r_t = windows[windows.index.str.startswith("R_t[")].reset_index()
    r_t.insert(1, "start", [d.isoformat() for d in chain.window_boundaries][:len(r_t)])

    bundle: Dict[str, Any] = {
        "region": series.region_id,
        "period": {"start": series.start, "end": series.end, "days": len(series)},
        "posterior": {"n_samples": len(chain), "acceptance_rate": chain.acceptance_rate},
        "r_t_windows": r_t,
        "deaths": deaths,
        "cfr": cfrs,
        "ifr": ifr,
        "hidden_states_last_day": trajectory.summary[trajectory.summary["date"] == series.end],
        "bootstrap_replicates": len(boot_chains),
    }

    daily_beta = beta_dir / f"{name}.csv"
    bundle["r_t_daily"] = pd.read_csv(daily_beta) if daily_beta.exists() else None

    current = forecast_paths(forecast_dir, series.region_id, series.end.isoformat())["summary"]
    bundle["forecast"] = pd.read_csv(current) if current.exists() else None
    bundle["previous_forecast_score"] = score_previous(forecast_dir, series)

    if positives_file is not None:
        positives = read_positives(positives_file, series.region_id)
        if positives is not None:
            comparison = incidence_comparison(trajectory, positives)
            files["incidence"] = str(write_csv(comparison, report_dir / f"{name}_incidence.csv"))
    bundle["files"] = files
    return bundle


class ReportStage(BaseStage):
    """Weekly JSON bundle and Markdown summary."""

    def __init__(self, config, template_dir: Optional[Path] = None):
        super().__init__(
            name="report",
            description="Bundle forecasts, R_t, hidden states and scores for the week",
            config=config
        )
        self.template_dir = Path(template_dir) if template_dir else TEMPLATE_DIR
        self.jinja_env = None

    def _get_jinja_env(self) -> Environment:
        if self.jinja_env is None:
            self.jinja_env = Environment(loader=FileSystemLoader(str(self.template_dir)),
                                         trim_blocks=True, lstrip_blocks=True)
            self.jinja_env.filters["num"] = format_number
        return self.jinja_env

    def _template(self) -> Template:
        if (self.template_dir / REPORT_TEMPLATE).exists():
            return self._get_jinja_env().get_template(REPORT_TEMPLATE)
        self.logger.warning(f"{REPORT_TEMPLATE} not found in {self.template_dir}; using the built-in template")
        return self._get_default_template()

    def _get_default_template(self) -> Template:
        return self._get_jinja_env().from_string(
            "# Weekly report {{ week }}\n\n"
            "{% for r in regions %}## {{ r.region }}\n\n"
            "{% for w in r.r_t_windows %}- R_t from {{ w.start }}: {{ w.mean | num }}\n{% endfor %}\n"
            "{% endfor %}"
        )

    def render(self, report: Dict[str, Any]) -> str:
        return self._template().render(**report)

    async def run(self, context: Dict[str, Any]) -> StageResult:
        series_list = context.get("series") or self.load_ingested()
        tasks = []
        for series in series_list:
            paths = self.chain_paths(series.region_id)
            if not paths:
                raise StageConfigurationError(f"No chains for region {series.region_id}; run 'fit' first")
            tasks.append(dict(
                chain_paths=[str(p) for p in paths], series=series, noise_cfg=self.config.noise,
                n_draws=self.config.n_draws, recovered_anchor=self.config.recovered_anchor,
                boot_paths=[str(p) for p in bootstrap_chain_paths(self.config.bootstrap_dir, series.region_id)],
                positives_file=self.config.positives_file, forecast_dir=self.config.forecast_dir,
                beta_dir=self.config.beta_dir, report_dir=self.config.report_dir,
            ))
        try:
            bundles = await self.map_regions(report_region, tasks)
        except MonitorError as e:
            raise StageExecutionError(f"Report failed: {e}", original_exception=e) from e

        week = max((s.end for s in series_list if len(s)), default=None)
        report = {
            "week": week,
            "seed": self.config.seed,
            "regions": bundles,
        }
        json_path = write_json(report, self.config.report_dir / "report.json")
        # Render from the JSON form so the Markdown shows exactly what was written
        markdown = self.render(read_json(json_path))
        md_path = write_text(markdown, self.config.report_dir / "report.md")

        result = StageResult(stage=self.name, outputs={"json": str(json_path), "markdown": str(md_path)})
        for bundle in bundles:
            score = bundle["previous_forecast_score"]
            if score is not None:
                result.metrics[bundle["region"]] = {"coverage68": score["coverage68"],
                                                    "coverage95": score["coverage95"]}
        context["report"] = result.outputs
        return result
