"""
Regional hospital-load data: CSV ingest, repair of negative or missing reports,
weekday-dampening smoothing of death incidence, and the distortion measure
between raw and pre-processed series.
"""
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd
from pydantic import BaseModel

from .errors import DataValidationError

logger = logging.getLogger(__name__)

FIELDS: Tuple[str, ...] = ("H", "W", "D")
DEFAULT_THRESHOLDS: Tuple[float, ...] = (10, 9, 8, 7, 6, 5, 4, 3, 2)

# Provenance labels, in increasing order of how much a day was altered
PROVENANCE_ORDER = ("raw", "interpolated", "repaired", "smoothed")


class CsvSchema(BaseModel):
    """Column names of the regional input file."""
    date: str = "date"
    region: str = "region"
    hospital: str = "hospital"
    icu: str = "icu"
    dead_cumulative: str = "dead_cumulative"
    population: str = "population"

    @property
    def required(self) -> List[str]:
        return [self.date, self.region, self.hospital, self.icu, self.dead_cumulative]


@dataclass
class ObservationSeries:
    """Daily (H, W, D) counts of one region. Missing values are NaN."""
    region_id: str
    population: int
    dates: List[date]
    H: np.ndarray
    W: np.ndarray
    D: np.ndarray
    provenance: Optional[np.ndarray] = None

    def __post_init__(self):
        self.dates = [pd.Timestamp(d).date() for d in self.dates]
        self.H = np.asarray(self.H, dtype=float)
        self.W = np.asarray(self.W, dtype=float)
        self.D = np.asarray(self.D, dtype=float)
        n = len(self.dates)
        for name in FIELDS:
            if len(getattr(self, name)) != n:
                raise DataValidationError(
                    f"Region {self.region_id}: {name} has {len(getattr(self, name))} values for {n} dates"
                )
        for earlier, later in zip(self.dates[:-1], self.dates[1:]):
            if (later - earlier).days != 1:
                raise DataValidationError(
                    f"Region {self.region_id}: dates must be consecutive days ({earlier} -> {later})"
                )
        if self.provenance is None:
            self.provenance = np.array(["raw"] * n, dtype=object)
        else:
            self.provenance = np.asarray(self.provenance, dtype=object)

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def start(self) -> date:
        return self.dates[0]

    @property
    def end(self) -> date:
        return self.dates[-1]

    def observations(self) -> np.ndarray:
        """T x 3 array of (H, W, D)."""
        return np.column_stack([self.H, self.W, self.D]) if len(self) else np.zeros((0, 3))

    def daily_deaths(self) -> np.ndarray:
        """Day-over-day increments of D, with the first day counted from zero."""
        return np.diff(self.D, prepend=0.0)

    def copy(self, **changes) -> "ObservationSeries":
        base = dict(
            H=self.H.copy(), W=self.W.copy(), D=self.D.copy(),
            provenance=self.provenance.copy(), dates=list(self.dates),
        )
        base.update(changes)
        return replace(self, **base)

    def slice(self, start: Optional[date] = None, end: Optional[date] = None) -> "ObservationSeries":
        """Days in [start, end]."""
        keep = [i for i, d in enumerate(self.dates)
                if (start is None or d >= start) and (end is None or d <= end)]
        idx = np.array(keep, dtype=int)
        return self.copy(
            dates=[self.dates[i] for i in keep],
            H=self.H[idx], W=self.W[idx], D=self.D[idx], provenance=self.provenance[idx],
        )

    def to_frame(self, schema: Optional[CsvSchema] = None) -> pd.DataFrame:
        schema = schema or CsvSchema()
        return pd.DataFrame({
            schema.date: [d.isoformat() for d in self.dates],
            schema.region: self.region_id,
            schema.hospital: self.H,
            schema.icu: self.W,
            schema.dead_cumulative: self.D,
            schema.population: self.population,
            "provenance": self.provenance,
        })

    @classmethod
    def from_arrays(cls, region_id: str, start: date, H: Sequence[float], W: Sequence[float],
                    D: Sequence[float], population: int = 0) -> "ObservationSeries":
        n = len(H)
        return cls(
            region_id=region_id,
            population=population,
            dates=[start + timedelta(days=k) for k in range(n)],
            H=np.asarray(H, dtype=float),
            W=np.asarray(W, dtype=float),
            D=np.asarray(D, dtype=float),
        )


@dataclass
class CleaningReport:
    """What the pre-processing changed in one region."""
    region_id: str
    repaired_negatives: int = 0
    interpolated_gaps: int = 0
    marked_missing: int = 0
    residual_deficit: float = 0.0
    smoothing_moves: int = 0
    d_smooth: float = 0.0
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return {
            "region_id": self.region_id,
            "repaired_negatives": self.repaired_negatives,
            "interpolated_gaps": self.interpolated_gaps,
            "marked_missing": self.marked_missing,
            "residual_deficit": self.residual_deficit,
            "smoothing_moves": self.smoothing_moves,
            "d_smooth": self.d_smooth,
            "warnings": list(self.warnings),
        }


def _mark(provenance: np.ndarray, index: Iterable[int], label: str):
    rank = PROVENANCE_ORDER.index(label)
    for i in index:
        if PROVENANCE_ORDER.index(provenance[i]) < rank:
            provenance[i] = label


# ---------------------------------------------------------------------------
# Ingest
# ---------------------------------------------------------------------------

def read_regional_csv(path: Union[str, Path], schema: Optional[CsvSchema] = None,
                      populations: Optional[Dict[str, int]] = None) -> Tuple[List[ObservationSeries], List[str]]:
    """Parse a regional CSV; returns the series and the per-row warnings.

    Rows with an unparseable date or empty region are skipped with a warning;
    unparseable counts become missing values with a warning. A date that does
    not advance within a region is a hard error naming the line.
    """
    schema = schema or CsvSchema()
    populations = populations or {}
    path = Path(path)
    if not path.exists():
        raise DataValidationError("Input file not found", path=str(path))

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise DataValidationError("Input file has no header", path=str(path)) from e
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataValidationError(f"Input file cannot be parsed: {e}", path=str(path)) from e

    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in schema.required if c not in frame.columns]
    if missing:
        raise DataValidationError(f"Missing required columns {missing}", path=str(path), line=1)

    warnings: List[str] = []
    rows: Dict[str, List[Tuple[date, float, float, float, int]]] = {}
    region_population: Dict[str, int] = {}
    has_population = schema.population in frame.columns

    for position, row in enumerate(frame.itertuples(index=False)):
        record = dict(zip(frame.columns, row))
        line = position + 2
        region = record[schema.region].strip()
        day = pd.to_datetime(record[schema.date].strip(), format="%Y-%m-%d", errors="coerce")
        if not region or pd.isna(day):
            warnings.append(f"line {line}: unparseable date or empty region, row skipped")
            continue

        values = []
        for column in (schema.hospital, schema.icu, schema.dead_cumulative):
            text = record[column].strip()
            if text == "" or text.upper() == "NA":
                values.append(np.nan)
                continue
            value = pd.to_numeric(text, errors="coerce")
            if pd.isna(value):
                warnings.append(f"line {line}: non-numeric {column}={text!r}, treated as missing")
            values.append(float(value))

        region_rows = rows.setdefault(region, [])
        if region_rows and day.date() <= region_rows[-1][0]:
            raise DataValidationError(
                f"Date {day.date()} for region {region} does not advance past {region_rows[-1][0]}",
                path=str(path), line=line,
            )
        region_rows.append((day.date(), *values, line))

        if has_population and record[schema.population].strip():
            pop = pd.to_numeric(record[schema.population].strip(), errors="coerce")
            if pd.isna(pop) or pop < 0:
                warnings.append(f"line {line}: invalid population {record[schema.population]!r}")
            else:
                region_population[region] = int(pop)

    series_list = []
    for region, region_rows in rows.items():
        observed = pd.DataFrame(region_rows, columns=["date", "H", "W", "D", "line"]).set_index("date")
        full_index = [region_rows[0][0] + timedelta(days=k)
                      for k in range((region_rows[-1][0] - region_rows[0][0]).days + 1)]
        observed = observed.reindex(full_index)
        gaps = int(observed["line"].isna().sum())
        if gaps:
            warnings.append(f"region {region}: {gaps} missing days filled with missing markers")
        population = populations.get(region, region_population.get(region, 0))
        series_list.append(ObservationSeries(
            region_id=region,
            population=int(population),
            dates=full_index,
            H=observed["H"].to_numpy(dtype=float),
            W=observed["W"].to_numpy(dtype=float),
            D=observed["D"].to_numpy(dtype=float),
        ))
    return series_list, warnings


def parse_regional_csv(path: Union[str, Path], schema: Optional[CsvSchema] = None,
                       populations: Optional[Dict[str, int]] = None) -> List[ObservationSeries]:
    """One ObservationSeries per region in order of first appearance."""
    series_list, warnings = read_regional_csv(path, schema, populations)
    for message in warnings:
        logger.warning(f"{path}: {message}")
    return series_list


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------

def _remove_deficit(inc: np.ndarray, t: int, deficit: float, kernel_width: int) -> float:
    """Take ``deficit`` out of the ``kernel_width`` days before ``t``; returns what could not be removed.

    Day ``t - 1 - age`` gets weight ``kernel_width - age``. A day never goes below
    zero; whatever it cannot give is shared among the others by the same weights.
    """
    days = np.arange(t - 1, max(-1, t - 1 - kernel_width), -1)
    weights = (kernel_width - np.arange(len(days))).astype(float)
    active = inc[days] > 0
    remaining = deficit
    while remaining > 0 and active.any():
        share = np.where(active, weights, 0.0)
        share = remaining * share / share.sum()
        saturated = active & (share >= inc[days])
        if not saturated.any():
            inc[days] -= share
            return 0.0
        remaining -= inc[days][saturated].sum()
        inc[days[saturated]] = 0.0
        active &= ~saturated
    return max(remaining, 0.0)


def _fill_gaps(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Linearly interpolate interior gaps; returns the values and the interpolated mask."""
    series = pd.Series(values)
    filled = series.interpolate(method="linear", limit_area="inside")
    mask = series.isna().to_numpy() & filled.notna().to_numpy()
    return filled.to_numpy(dtype=float), mask


def clean_series(s: ObservationSeries, kernel_width: int = 7,
                 outlier_dates: Optional[Sequence[date]] = None) -> Tuple[ObservationSeries, CleaningReport]:
    """Repair negative values and gaps.

    H and W are levels: negatives are set to 0. D is cumulative: a negative
    daily increment is set to 0 and the deficit removed from the preceding
    ``kernel_width`` days with linearly decaying weights. Interior gaps are
    interpolated; gaps before the first report stay missing.
    """
    report = CleaningReport(region_id=s.region_id)
    out = s.copy()
    n = len(out)
    if n == 0:
        return out, report

    if outlier_dates:
        flagged = set(outlier_dates)
        for i, d in enumerate(out.dates):
            if d in flagged:
                for name in FIELDS:
                    getattr(out, name)[i] = np.nan
                report.marked_missing += 1

    for name in FIELDS:
        values = getattr(out, name)
        if np.isnan(values).all():
            report.warnings.append(f"{name} is missing on every day")
            continue
        filled, mask = _fill_gaps(values)
        report.interpolated_gaps += int(mask.sum())
        _mark(out.provenance, np.flatnonzero(mask), "interpolated")
        leading = int(np.argmax(~np.isnan(values)))
        report.marked_missing += leading
        setattr(out, name, filled)

    for name in ("H", "W"):
        values = getattr(out, name)
        negative = np.flatnonzero(values < 0)
        values[negative] = 0.0
        report.repaired_negatives += len(negative)
        _mark(out.provenance, negative, "repaired")

    present = np.flatnonzero(~np.isnan(out.D))
    if len(present):
        a, b = present[0], present[-1] + 1
        inc = np.diff(out.D[a:b], prepend=0.0)
        before = inc.copy()
        for t in range(1, len(inc)):
            if inc[t] < 0:
                deficit = -inc[t]
                inc[t] = 0.0
                report.repaired_negatives += 1
                residual = _remove_deficit(inc, t, deficit, kernel_width)
                if residual > 0:
                    report.residual_deficit += residual
                    report.warnings.append(
                        f"{out.dates[a + t]}: deficit of {residual:g} deaths exceeds the preceding {kernel_width} days"
                    )
        changed = np.flatnonzero(inc != before) + a
        _mark(out.provenance, changed, "repaired")
        out.D[a:b] = np.cumsum(inc)

    if report.residual_deficit > 0:
        logger.warning(f"Region {s.region_id}: unresolved death deficit {report.residual_deficit:g}")
    return out, report


# ---------------------------------------------------------------------------
# Smoothing
# ---------------------------------------------------------------------------

def _weekday_deficit(inc: np.ndarray, weekdays: np.ndarray) -> np.ndarray:
    means = np.array([inc[weekdays == d].mean() if np.any(weekdays == d) else 0.0 for d in range(7)])
    return np.maximum(means.mean() - means, 0.0)


def _apportion(amount: float, weights: np.ndarray) -> np.ndarray:
    """Split ``amount`` in proportion to ``weights`` in whole units (largest remainder).

    The shares sum to ``amount`` exactly; a fractional part of ``amount``
    goes to the target with the largest remainder.
    """
    exact = amount * weights / weights.sum()
    shares = np.floor(exact)
    remainder = amount - shares.sum()
    units = int(np.floor(remainder + 1e-9))
    order = np.argsort(-(exact - shares), kind="stable")
    shares[order[:units]] += 1.0
    shares[order[0]] += remainder - units
    return shares


def smooth_series(s: ObservationSeries, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                  history: int = 28, spread: int = 7,
                  report: Optional[CleaningReport] = None) -> ObservationSeries:
    """Dampen outliers and weekday effects in the daily death incidence.

    For every threshold ``k`` (largest first), day ``t`` is an outlier when its
    incidence exceeds ``m + k * sqrt(m)`` with ``m`` the mean over the preceding
    ``history`` days. The most extreme outlier is cut to the threshold and the
    excess is moved to the ``spread`` preceding days, weighted by how far each
    weekday's mean falls below the weekly mean. Repeats until no day exceeds
    the threshold. Whole deaths are moved, so integer counts stay integer and
    the total number of deaths is unchanged.
    """
    out = s.copy()
    present = np.flatnonzero(~np.isnan(out.D))
    if len(present) < spread:
        message = f"Region {s.region_id}: {len(present)} days of deaths is too short to smooth"
        logger.warning(message)
        if report is not None:
            report.warnings.append(message)
        return out

    a, b = present[0], present[-1] + 1
    inc = np.diff(out.D[a:b], prepend=0.0)
    base_level = inc[0]
    inc[0] = 0.0
    original = inc.copy()
    weekdays = np.array([d.weekday() for d in out.dates[a:b]])
    n = len(inc)
    cumulative = np.concatenate([[0.0], np.cumsum(inc)])
    moves = 0
    max_moves = 50 * n

    for k in sorted(thresholds, reverse=True):
        while moves < max_moves:
            cumulative = np.concatenate([[0.0], np.cumsum(inc)])
            t_idx = np.arange(spread + 1, n)
            lo = np.maximum(t_idx - history, 1)
            m = (cumulative[t_idx] - cumulative[lo]) / (t_idx - lo)
            scale = np.sqrt(np.maximum(m, 1.0))
            threshold = m + k * scale
            z = (inc[t_idx] - m) / scale
            over = inc[t_idx] > threshold + 1e-12
            if not over.any():
                break
            worst = int(np.argmax(np.where(over, z, -np.inf)))
            t = int(t_idx[worst])
            cut = np.floor(threshold[worst])
            excess = inc[t] - cut
            inc[t] = cut

            targets = np.arange(t - spread, t)
            weights = _weekday_deficit(inc[1:], weekdays[1:])[weekdays[targets]]
            if weights.sum() <= 0:
                weights = np.ones(spread)
            inc[targets] += _apportion(excess, weights)
            moves += 1
        else:
            message = f"Region {s.region_id}: smoothing stopped after {max_moves} moves at threshold {k}"
            logger.warning(message)
            if report is not None:
                report.warnings.append(message)

    inc[0] = base_level
    original[0] = base_level
    out.D[a:b] = np.cumsum(inc)
    _mark(out.provenance, np.flatnonzero(~np.isclose(inc, original, rtol=0.0, atol=1e-12)) + a, "smoothed")
    if report is not None:
        report.smoothing_moves += moves
    return out


def weekday_profile(s: ObservationSeries) -> pd.Series:
    """Mean daily death incidence per weekday (Monday first)."""
    inc = s.daily_deaths()[1:]
    days = pd.to_datetime(pd.Series(s.dates[1:]))
    frame = pd.DataFrame({"weekday": days.dt.dayofweek, "incidence": inc}).dropna()
    profile = frame.groupby("weekday")["incidence"].mean().reindex(range(7))
    profile.index = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"]
    return profile


def smoothing_distance(raw: ObservationSeries, smooth: ObservationSeries) -> float:
    """Mean over days of the largest relative change among H, W and D.

    Each change is relative to ``max(1, |raw|)``; components missing on
    either side are skipped, and days with nothing to compare are left out.
    """
    if raw.dates != smooth.dates:
        raise DataValidationError(
            f"Series for {raw.region_id} and {smooth.region_id} cover different dates"
        )
    if len(raw) == 0:
        return 0.0
    x = raw.observations()
    y = smooth.observations()
    with np.errstate(invalid="ignore"):
        relative = np.abs(y - x) / np.maximum(1.0, np.abs(x))
    comparable = ~np.isnan(relative)
    days = comparable.any(axis=1)
    if not days.any():
        return 0.0
    per_day = np.where(comparable, relative, -np.inf).max(axis=1)
    return float(per_day[days].mean())


def preprocess(s: ObservationSeries, kernel_width: int = 7,
               thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
               outlier_dates: Optional[Sequence[date]] = None) -> Tuple[ObservationSeries, CleaningReport]:
    """clean_series followed by smooth_series, with the distortion recorded in the report."""
    cleaned, report = clean_series(s, kernel_width=kernel_width, outlier_dates=outlier_dates)
    smoothed = smooth_series(cleaned, thresholds=thresholds, report=report)
    report.d_smooth = smoothing_distance(s, smoothed)
    return smoothed, report
