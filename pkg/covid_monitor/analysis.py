"""
Posterior post-processing: filtered hidden states, deaths per compartment,
IFR per two-month period, CFRs, predictive ensembles and forecast scores.

Every summary is a pandas frame; ``to_tidy`` turns one into the long
(date, quantity, statistic, value) layout used for CSV output.
"""
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist, pdist

from .bootstrap import interval_overlap_check, point_robustness
from .data_pipeline import FIELDS, ObservationSeries
from .errors import DataValidationError, MonitorError, SamplerError
from .kalman import FilterResult, NoiseConfig, filter_series, predict_ahead
from .model import (
    D,
    E,
    H,
    I,
    R,
    STATES,
    W,
    DynamicSchedule,
    ParameterVector,
    cfr,
    derive_fractions,
    marginal_mortality,
)
from .priors import SeedLike, as_generator
from .sampler import PosteriorChain

logger = logging.getLogger(__name__)

STATISTICS: Tuple[str, ...] = ("mean", "lo95", "lo68", "median", "hi68", "hi95")
FORECAST_COLUMNS: Tuple[str, ...] = ("date", "compartment", "mean", "sd", "lo68", "hi68", "lo95", "hi95")
_LEVELS = (0.025, 0.16, 0.5, 0.84, 0.975)


def summarise_draws(draws: np.ndarray) -> Dict[str, np.ndarray]:
    """Mean and equal-tailed 68/95% limits over the first axis."""
    draws = np.asarray(draws, dtype=float)
    if len(draws) == 0:
        raise SamplerError("No draws to summarise")
    q = np.quantile(draws, _LEVELS, axis=0)
    return {"mean": draws.mean(axis=0), "lo95": q[0], "lo68": q[1], "median": q[2], "hi68": q[3], "hi95": q[4]}


def to_tidy(frame: pd.DataFrame, quantity_column: str = "quantity") -> pd.DataFrame:
    """Long layout: one row per (date, quantity, statistic)."""
    id_vars = [c for c in ("date", quantity_column) if c in frame.columns]
    value_vars = [c for c in frame.columns if c not in id_vars]
    tidy = frame.melt(id_vars=id_vars, value_vars=value_vars, var_name="statistic", value_name="value")
    if quantity_column != "quantity" and quantity_column in tidy.columns:
        tidy = tidy.rename(columns={quantity_column: "quantity"})
    return tidy


def _draw_indices(n: int, n_draws: Optional[int]) -> np.ndarray:
    if n == 0:
        raise SamplerError("Empty chain")
    if n_draws is None or n_draws >= n:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, n_draws).round().astype(int))


def _points(chain: PosteriorChain, n_draws: Optional[int]) -> List[Tuple[ParameterVector, DynamicSchedule]]:
    return [chain.point(i) for i in _draw_indices(len(chain), n_draws)]


def replay_filter(chain: PosteriorChain, series: ObservationSeries, noise_cfg: Optional[NoiseConfig] = None,
                  n_draws: Optional[int] = 200) -> List[Tuple[ParameterVector, DynamicSchedule, FilterResult]]:
    """Filter ``series`` once per (thinned) posterior sample."""
    out = []
    failed = 0
    for p, schedule in _points(chain, n_draws):
        try:
            out.append((p, schedule, filter_series(p, schedule, series, noise_cfg)))
        except MonitorError as e:
            failed += 1
            logger.debug(f"Skipping posterior sample: {e}")
    if failed:
        logger.warning(f"{series.region_id}: {failed} posterior samples could not be filtered")
    if not out:
        raise SamplerError("No posterior sample could be filtered")
    return out


@dataclass
class HiddenStateTrajectory:
    """Per-day posterior summaries of the filtered states and derived series."""
    dates: List[date]
    summary: pd.DataFrame
    draws: Dict[str, np.ndarray] = field(default_factory=dict)

    def quantity(self, name: str) -> pd.DataFrame:
        return self.summary[self.summary["quantity"] == name].reset_index(drop=True)

    def to_tidy(self) -> pd.DataFrame:
        return to_tidy(self.summary)


def _anchor_offsets(recovered: np.ndarray, dates: Sequence[date],
                    anchor: Tuple[date, float]) -> np.ndarray:
    when, fraction = anchor
    if when not in dates:
        raise DataValidationError(f"Anchor date {when} lies outside the filtered period {dates[0]}..{dates[-1]}")
    k = list(dates).index(when)
    return fraction - recovered[:, k]


def hidden_states(chain: PosteriorChain, series: ObservationSeries, noise_cfg: Optional[NoiseConfig] = None,
                  recovered_anchor: Optional[Tuple[date, float]] = None,
                  n_draws: Optional[int] = 200) -> HiddenStateTrajectory:
    """Posterior bands of the filtered hidden states.

    Besides the eight states the trajectory holds the symptomatic incidence
    sigma * E2I * E and, when the population is known, the recovered fraction
    R / population. With ``recovered_anchor=(date, fraction)`` every sample's
    recovered fraction is shifted so that it equals ``fraction`` on ``date``.
    """
    dates = list(series.dates)
    if len(dates) == 0:
        return HiddenStateTrajectory(dates, pd.DataFrame(columns=["date", "quantity", *STATISTICS]))
    replays = replay_filter(chain, series, noise_cfg, n_draws)
    means = np.array([result.means for _, _, result in replays])

    draws: Dict[str, np.ndarray] = {name: means[:, :, k] for k, name in enumerate(STATES)}
    draws["symptomatic_incidence"] = np.array([
        p.sigma * p.E2I * np.maximum(result.means[:, E], 0.0) for p, _, result in replays
    ])
    if series.population > 0:
        recovered = means[:, :, R] / series.population
        if recovered_anchor is not None:
            recovered = recovered + _anchor_offsets(recovered, dates, recovered_anchor)[:, None]
            if np.any((recovered < 0) | (recovered > 1)):
                logger.warning("Anchored recovered fraction leaves [0, 1]; clipping")
        draws["recovered_fraction"] = np.clip(recovered, 0.0, 1.0)
    elif recovered_anchor is not None:
        raise DataValidationError(f"Region {series.region_id} has no population; cannot anchor the recovered fraction")

    frames = []
    for name, values in draws.items():
        stats = summarise_draws(values)
        frames.append(pd.DataFrame({"date": dates, "quantity": name, **stats}))
    return HiddenStateTrajectory(dates, pd.concat(frames, ignore_index=True), draws)


def _channel_inflows(p: ParameterVector, schedule: DynamicSchedule, result: FilterResult) -> np.ndarray:
    """Per-day death inflows (I, H, W) predicted from the previous filtered state."""
    T = len(result.dates)
    inflow = np.zeros((T, 3))
    for k in range(1, T):
        f = derive_fractions(p, schedule.ifr_per_window[result.window_index[k]])
        x = np.maximum(result.means[k - 1], 0.0)
        inflow[k] = (p.gamma_I * f.F2d * x[I], p.gamma_H * f.F3d * x[H], p.gamma_W * f.F4 * x[W])
    return inflow


def death_channel_totals(p: ParameterVector, schedule: DynamicSchedule, result: FilterResult) -> np.ndarray:
    """Deaths from I, H and W summed over the filtered period."""
    return _channel_inflows(p, schedule, result)[1:].sum(axis=0)


def death_decomposition(chain: PosteriorChain, series: ObservationSeries,
                        noise_cfg: Optional[NoiseConfig] = None, n_draws: Optional[int] = 200) -> pd.DataFrame:
    """Deaths over the period by the compartment they occurred in.

    Per posterior sample the daily inflows gamma_I*F2d*I, gamma_H*F3d*H and
    gamma_W*F4*W are accumulated along the filtered trajectory. ``D_total``
    is the increase of the filtered cumulative D over the same period; the
    three channels add up to it when the data follow the model recursion.
    """
    replays = replay_filter(chain, series, noise_cfg, n_draws)
    totals = np.zeros((len(replays), 4))
    for j, (p, schedule, result) in enumerate(replays):
        totals[j] = (*death_channel_totals(p, schedule, result), result.means[-1, D] - result.means[0, D])

    channels, filtered = totals[:, :3].sum(axis=1), totals[:, 3]
    gap = np.abs(channels - filtered) / np.maximum(filtered, 1.0)
    if np.median(gap) > 0.01:
        logger.warning(f"{series.region_id}: death channels differ from the filtered D increase "
                    f"by {np.median(gap):.1%} (median over samples)")

    stats = summarise_draws(totals)
    return pd.DataFrame({"quantity": ["D_I", "D_H", "D_W", "D_total"], **stats})


def ifr_window_summary(chain: PosteriorChain, boot_chains: Optional[Sequence[PosteriorChain]] = None,
                       windows_per_period: int = 2, alpha: float = 0.68) -> pd.DataFrame:
    """IFR per period of ``windows_per_period`` consecutive windows with robustness flags.

    A period's IFR is the average of its windows' IFR in each sample. With
    bootstrap chains, the bias and interval flags of the period are attached.
    """
    columns = [j for j, n in enumerate(chain.names) if n.startswith("IFR[")]
    if not columns:
        raise SamplerError("Chain has no IFR columns")
    if len(chain) == 0:
        raise SamplerError("Empty chain")
    boundaries = chain.window_boundaries
    rows = []
    for first in range(0, len(columns), windows_per_period):
        group = columns[first:first + windows_per_period]
        values = chain.samples[:, group].mean(axis=1)
        stats = {k: float(v) for k, v in summarise_draws(values).items()}
        row = {"period": first // windows_per_period, "start": boundaries[first], **stats}
        if boot_chains:
            boot_values = [c.samples[:, group].mean(axis=1) for c in boot_chains]
            bias = float(np.sqrt(np.mean([(b.mean() - values.mean()) ** 2 for b in boot_values])))
            pooled = summarise_draws(np.concatenate(boot_values))
            row["bias"] = bias
            row["point_robust"] = point_robustness(bias, (stats["lo68"], stats["hi68"]))
            row["interval_robust"] = interval_overlap_check(
                (stats["lo68"], stats["hi68"]), (float(pooled["lo68"]), float(pooled["hi68"])), alpha
            )
        rows.append(row)
    return pd.DataFrame(rows)


def cfr_summary(chain: PosteriorChain, n_draws: Optional[int] = None) -> pd.DataFrame:
    """CFR of I, H and W and the marginal mortalities per posterior sample, at the window-averaged IFR."""
    values = []
    skipped = 0
    for p, schedule in _points(chain, n_draws):
        try:
            f = derive_fractions(p, float(np.mean(schedule.ifr_per_window)))
        except MonitorError:
            skipped += 1
            continue
        mortality = marginal_mortality(p, f)
        values.append([cfr(f, "I"), cfr(f, "H"), cfr(f, "W"),
                       mortality["I_MORT"], mortality["H_MORT"], mortality["W_MORT"]])
    if skipped:
        logger.warning(f"Skipped {skipped} infeasible samples in the CFR summary")
    stats = summarise_draws(np.array(values))
    return pd.DataFrame({"quantity": ["CFR_I", "CFR_H", "CFR_W", "I_MORT", "H_MORT", "W_MORT"], **stats})


def incidence_comparison(trajectory: HiddenStateTrajectory, positives: pd.Series) -> pd.DataFrame:
    """Model symptomatic incidence next to reported positive tests and their ratio.

    Positive tests are never used for inference; this is a comparison only.
    """
    incidence = trajectory.quantity("symptomatic_incidence").set_index("date")["mean"]
    positives = positives.copy()
    positives.index = [pd.Timestamp(d).date() for d in positives.index]
    frame = pd.DataFrame({"incidence": incidence}).join(positives.rename("positives"), how="inner")
    if frame.empty:
        raise DataValidationError("Positive-test series does not overlap the filtered period")
    with np.errstate(divide="ignore", invalid="ignore"):
        frame["ratio"] = np.where(frame["positives"] > 0, frame["incidence"] / frame["positives"], np.nan)
    return frame.reset_index().rename(columns={"index": "date"})


# ---------------------------------------------------------------------------
# Forecasts
# ---------------------------------------------------------------------------

@dataclass
class PosteriorForecast:
    """Ensemble forecast of (H, W, D); ``ensemble[h]`` holds the members for ``dates[h]``."""
    dates: List[date]
    ensemble: np.ndarray

    def summary(self) -> pd.DataFrame:
        frames = []
        for j, name in enumerate(FIELDS):
            stats = summarise_draws(self.ensemble[:, :, j].T)
            frames.append(pd.DataFrame({
                "date": self.dates, "compartment": name,
                "sd": self.ensemble[:, :, j].std(axis=1), **stats,
            }))
        return pd.concat(frames, ignore_index=True)[list(FORECAST_COLUMNS)]

    def members(self) -> Dict[date, np.ndarray]:
        return {d: self.ensemble[h] for h, d in enumerate(self.dates)}


def posterior_predictive(chain: PosteriorChain, series: ObservationSeries, horizon: int,
                         noise_cfg: Optional[NoiseConfig] = None, n_draws: Optional[int] = 200,
                         n_per_draw: int = 10, seed: SeedLike = None) -> PosteriorForecast:
    """Forecast ensemble: filter each sample to the last day, predict ahead and draw observations."""
    rng = as_generator(seed)
    replays = replay_filter(chain, series, noise_cfg, n_draws)
    members = []
    for p, schedule, result in replays:
        F_last = result.matrix_on(len(result.dates) - 1)
        prediction = predict_ahead(result.final_state, F_last, horizon, noise_cfg)
        for h in range(horizon):
            members.append((h, rng.multivariate_normal(prediction.mean[h], prediction.cov[h], size=n_per_draw,
                                                       method="cholesky")))
    ensemble = np.zeros((horizon, len(replays) * n_per_draw, len(FIELDS)))
    fill = np.zeros(horizon, dtype=int)
    for h, block in members:
        ensemble[h, fill[h]:fill[h] + len(block)] = block
        fill[h] += len(block)
    dates = [series.end + timedelta(days=h + 1) for h in range(horizon)]
    return PosteriorForecast(dates, ensemble)


def energy_score(members: np.ndarray, actual: np.ndarray) -> float:
    """mean ||X - y|| - 0.5 mean ||X - X'|| over all ordered member pairs."""
    members = np.atleast_2d(np.asarray(members, dtype=float))
    actual = np.asarray(actual, dtype=float)
    m = len(members)
    first = cdist(members, actual[None, :]).mean()
    second = 2.0 * pdist(members).sum() / (m * m) if m > 1 else 0.0
    return float(first - 0.5 * second)


@dataclass
class ForecastScore:
    coverage68: float
    coverage95: float
    nrmse: Dict[str, float]
    energy_score: Optional[float]
    n: int

    def to_dict(self) -> Dict[str, object]:
        return {"coverage68": self.coverage68, "coverage95": self.coverage95, "nrmse": self.nrmse,
                "energy_score": self.energy_score, "n": self.n}


def _actual_frame(actuals: Union[ObservationSeries, pd.DataFrame]) -> pd.DataFrame:
    if isinstance(actuals, ObservationSeries):
        return pd.DataFrame({"date": actuals.dates, "H": actuals.H, "W": actuals.W, "D": actuals.D})
    frame = actuals.copy()
    frame["date"] = [pd.Timestamp(d).date() for d in frame["date"]]
    return frame


def forecast_scores(predictions: pd.DataFrame, actuals: Union[ObservationSeries, pd.DataFrame],
                    ensembles: Optional[Dict[date, np.ndarray]] = None) -> ForecastScore:
    """Interval coverage, NRMSE per compartment and the mean energy score.

    ``predictions`` has columns date, compartment, mean, lo68, hi68, lo95, hi95;
    ``ensembles`` maps a date to an (members x 3) array over (H, W, D).
    """
    truth = _actual_frame(actuals).melt(id_vars="date", value_vars=list(FIELDS),
                                        var_name="compartment", value_name="actual")
    predictions = predictions.copy()
    predictions["date"] = [pd.Timestamp(d).date() for d in predictions["date"]]
    joined = predictions.merge(truth, on=["date", "compartment"], how="inner")
    joined = joined[np.isfinite(joined["actual"].to_numpy(dtype=float))]
    if joined.empty:
        raise DataValidationError("Forecasts and observations share no dates")

    actual = joined["actual"].to_numpy(dtype=float)
    inside68 = (joined["lo68"] <= actual) & (actual <= joined["hi68"])
    inside95 = (joined["lo95"] <= actual) & (actual <= joined["hi95"])

    nrmse = {}
    for name, group in joined.groupby("compartment"):
        err = group["mean"].to_numpy(dtype=float) - group["actual"].to_numpy(dtype=float)
        scale = group["actual"].abs().mean()
        nrmse[name] = float(np.sqrt(np.mean(err ** 2)) / scale) if scale > 0 else float("nan")

    es = None
    if ensembles:
        by_date = _actual_frame(actuals).set_index("date")
        scores = [
            energy_score(members, by_date.loc[d, list(FIELDS)].to_numpy(dtype=float))
            for d, members in ensembles.items()
            if d in by_date.index and np.all(np.isfinite(by_date.loc[d, list(FIELDS)].to_numpy(dtype=float)))
        ]
        es = float(np.mean(scores)) if scores else None

    return ForecastScore(float(inside68.mean()), float(inside95.mean()), nrmse, es, len(joined))
