from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from covid_monitor.data_pipeline import ObservationSeries, preprocess, read_regional_csv
from covid_monitor.errors import DataValidationError
from covid_monitor.io import write_csv, write_json
from .base_stage import BaseStage, StageConfigurationError, StageResult, safe_name


def read_populations(path) -> Dict[str, int]:
    """Two-column CSV (region, population)."""
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError as e:
        raise DataValidationError("Population file not found", path=str(path)) from e
    if not {"region", "population"} <= set(frame.columns):
        raise DataValidationError("Population file needs 'region' and 'population' columns", path=str(path), line=1)
    return {str(r): int(p) for r, p in zip(frame["region"], frame["population"])}


class IngestStage(BaseStage):
    """Parse the raw regional files, clean and smooth them, write one CSV per region."""

    def __init__(self, config, dry_run: bool = False):
        super().__init__(
            name="ingest",
            description="Parse, clean and smooth the regional hospital and death counts",
            config=config
        )
        self.dry_run = dry_run

    def _read_all(self) -> Tuple[List[ObservationSeries], List[str]]:
        if not self.config.data_files:
            raise StageConfigurationError("No input files given (data_files / --data)")
        populations: Optional[Dict[str, int]] = None
        warnings: List[str] = []
        try:
            if self.config.populations_file is not None:
                populations = read_populations(self.config.populations_file)
            series: List[ObservationSeries] = []
            for path in self.config.data_files:
                regional, file_warnings = read_regional_csv(path, self.config.schema_columns, populations)
                series.extend(regional)
                warnings.extend(f"{path}: {w}" for w in file_warnings)
        except DataValidationError as e:
            raise StageConfigurationError(str(e)) from e
        return series, warnings

    async def run(self, context: Dict[str, Any]) -> StageResult:
        series_list, warnings = self._read_all()
        for message in warnings:
            self.logger.warning(message)
        if self.config.regions:
            series_list = [s for s in series_list if s.region_id in self.config.regions]

        result = StageResult(stage=self.name, warnings=warnings)
        cleaned: List[ObservationSeries] = []
        for series in sorted(series_list, key=lambda s: s.region_id):
            smoothed, report = preprocess(
                series,
                kernel_width=self.config.kernel_width,
                thresholds=self.config.thresholds,
                outlier_dates=self.config.outlier_dates,
            )
            cleaned.append(smoothed)
            result.metrics[series.region_id] = report.to_dict()
            self.logger.info(
                f"{series.region_id}: {len(series)} days, {report.repaired_negatives} negative increments repaired, "
                f"d_smooth={report.d_smooth:.4f}"
            )
            if self.dry_run:
                continue
            name = safe_name(series.region_id)
            csv_path = write_csv(smoothed.to_frame(self.config.schema_columns), self.config.ingest_dir / f"{name}.csv")
            write_json(report.to_dict(), self.config.ingest_dir / f"{name}.report.json")
            result.outputs[series.region_id] = str(csv_path)

        if self.dry_run:
            self.logger.info(f"Dry run: {len(cleaned)} regions checked, nothing written")
        context["series"] = cleaned
        return result
