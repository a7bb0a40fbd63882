"""
Parametric bootstrap: synthetic data from a known parameter point, bias of
the approximate posterior and robustness checks of point estimates and
credible intervals.
"""
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
import logging
import math

import numpy as np
import pandas as pd

from .beta_optimizer import (
    BetaTrajectory,
    FrozenModel,
    HorizonConfig,
    initial_beta,
    optimize_receding,
    r_t_upper,
)
from .data_pipeline import ObservationSeries
from .errors import MonitorError, SamplerError
from .io import write_csv, write_json
from .kalman import NoiseConfig, filter_series, measurement_noise
from .model import (
    A,
    D,
    E,
    H,
    I,
    N_STATES,
    OBSERVED,
    PHI,
    R,
    STATIC_PARAMETERS,
    W,
    DynamicSchedule,
    ParameterVector,
    derive_fractions,
)
from .priors import DYNAMIC_PARAMETERS, PriorSet, SeedLike, as_generator, unpack_point
from .sampler import AmConfig, PosteriorChain, am_run, seed_record, weighted_quantile

logger = logging.getLogger(__name__)

DEATH_CHANNELS: Tuple[str, ...] = ("D_I", "D_H", "D_W")


@dataclass
class SyntheticDataset:
    """Simulated observations together with the hidden truth that produced them."""
    series: ObservationSeries
    parameters: ParameterVector
    schedule: DynamicSchedule
    beta: np.ndarray
    seed: Optional[Dict[str, Any]]
    states: np.ndarray
    exposures: np.ndarray
    death_channels: np.ndarray

    def truth(self) -> Dict[str, Any]:
        return {
            "region_id": self.series.region_id,
            "parameters": self.parameters.to_dict(),
            "window_boundaries": list(self.schedule.window_boundaries),
            "r_t_per_window": list(self.schedule.r_t_per_window),
            "ifr_per_window": list(self.schedule.ifr_per_window),
            "beta": self.beta,
            "seed": self.seed,
            "death_channels": dict(zip(DEATH_CHANNELS, self.death_channels[-1])),
        }

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Same CSV layout as ingested data plus a JSON truth sidecar."""
        path = Path(path)
        write_csv(self.series.to_frame(), path)
        write_json(self.truth(), path.with_suffix(".truth.json"))
        return path


def _exits(rng: np.random.Generator, count: int, rate: float, weights: Sequence[float]) -> np.ndarray:
    """Split ``count`` individuals between competing exits and staying."""
    if count <= 0:
        return np.zeros(len(weights), dtype=np.int64)
    leave = -math.expm1(-rate)
    p = np.clip(np.asarray(weights, dtype=float), 0.0, None) * leave
    stay = max(0.0, 1.0 - p.sum())
    return rng.multinomial(count, np.r_[p, stay])[:-1]


def simulate_synthetic(p: ParameterVector, daily_beta: Union[BetaTrajectory, Sequence[float]],
                       schedule: DynamicSchedule, T: int, init: Sequence[float],
                       seed: SeedLike = None, start: Optional[date] = None,
                       noise_cfg: Optional[NoiseConfig] = None, region_id: str = "synthetic",
                       population: int = 0) -> SyntheticDataset:
    """Daily stochastic simulation of the compartment model.

    Each day every compartment loses individuals with probability
    1 - exp(-rate), split multinomially between its exits by the fractions of
    the window's IFR. New exposures are Poisson with mean beta * phi and phi
    follows the exact exponential update. Observations are the true H, W and
    D plus Gaussian measurement noise, rounded and clamped at zero; the
    observed D is kept nondecreasing.

    Args:
        daily_beta: one value per transition (at least ``T - 1`` values)
        init: initial state [I, A, E, phi, H, W, D, R]
    """
    rng = as_generator(seed)
    noise_cfg = noise_cfg or NoiseConfig()
    beta = np.asarray(daily_beta.beta if isinstance(daily_beta, BetaTrajectory) else daily_beta, dtype=float)
    if T < 1:
        raise MonitorError(f"Simulation needs at least one day, got T={T}")
    if len(beta) < T - 1:
        raise MonitorError(f"Daily beta covers {len(beta)} transitions, {T - 1} needed")
    init = np.asarray(init, dtype=float)
    if len(init) != N_STATES or np.any(init < 0):
        raise MonitorError("Initial state must hold eight nonnegative values")

    start = start or schedule.window_boundaries[0]
    dates = [start + timedelta(days=t) for t in range(T)]
    window = schedule.window_indices(dates)
    fractions = {int(k): derive_fractions(p, schedule.ifr_per_window[int(k)]) for k in set(window.tolist())}
    decay = math.exp(-p.rho)

    states = np.zeros((T, N_STATES))
    exposures = np.zeros(T)
    channels = np.zeros((T, len(DEATH_CHANNELS)))
    x = np.round(init)
    x[PHI] = init[PHI]
    states[0] = x
    for t in range(T - 1):
        f = fractions[int(window[t])]
        n = x.astype(np.int64)
        i_out = _exits(rng, n[I], p.gamma_I, [f.F2, f.F2d, 1.0 - f.F2 - f.F2d])
        a_out = _exits(rng, n[A], p.gamma_A, [f.F1, 1.0 - f.F1])
        e_out = _exits(rng, n[E], p.sigma, [f.F0, 1.0 - f.F0])
        h_out = _exits(rng, n[H], p.gamma_H, [f.F3, f.F3d, 1.0 - f.F3 - f.F3d])
        w_out = _exits(rng, n[W], p.gamma_W, [f.F4, 1.0 - f.F4])
        new = rng.poisson(max(beta[t], 0.0) * max(x[PHI], 0.0))

        nxt = x.copy()
        nxt[I] += e_out[0] + a_out[0] - i_out.sum()
        nxt[A] += e_out[1] - a_out.sum()
        nxt[E] += new - e_out.sum()
        nxt[H] += i_out[0] + w_out[1] - h_out.sum()
        nxt[W] += h_out[0] - w_out.sum()
        nxt[D] += i_out[1] + h_out[1] + w_out[0]
        nxt[R] += i_out[2] + a_out[1] + h_out[2]
        nxt[PHI] = decay * x[PHI] + (1.0 - decay) * (x[I] + p.theta_A_star * x[A] + p.theta_E_star * x[E])

        exposures[t + 1] = new
        channels[t + 1] = channels[t] + (i_out[1], h_out[1], w_out[0])
        x = nxt
        states[t + 1] = x

    truth = states[:, list(OBSERVED)]
    sd = np.sqrt(np.array([np.diag(measurement_noise(s, noise_cfg)) for s in states]))
    observed = np.maximum(np.round(truth + sd * rng.standard_normal(truth.shape)), 0.0)
    # An empty compartment is reported as empty
    observed[truth <= 0] = 0.0
    observed[:, 2] = np.maximum.accumulate(observed[:, 2])

    series = ObservationSeries.from_arrays(region_id, start, observed[:, 0], observed[:, 1],
                                           observed[:, 2], population=population)
    return SyntheticDataset(series, p, schedule, beta[:T - 1], seed_record(seed), states, exposures, channels)


def simulate_scenario(p: ParameterVector, schedule: DynamicSchedule, T: int, init: Sequence[float],
                      seed: SeedLike = None, noise_cfg: Optional[NoiseConfig] = None,
                      region_id: str = "synthetic", population: int = 0) -> SyntheticDataset:
    """Simulation with beta held at the value implied by each window's R_t."""
    start = schedule.window_boundaries[0]
    dates = [start + timedelta(days=t) for t in range(max(T - 1, 0))]
    beta = initial_beta(FrozenModel(p, schedule, noise_cfg or NoiseConfig()), dates)
    return simulate_synthetic(p, beta, schedule, T, init, seed=seed, start=start, noise_cfg=noise_cfg,
                              region_id=region_id, population=population)


# ---------------------------------------------------------------------------
# Bias and robustness
# ---------------------------------------------------------------------------

def collapse_dynamic(samples: np.ndarray, names: Sequence[str]) -> Tuple[np.ndarray, List[str]]:
    """Replace the per-window dynamic columns by their average over windows."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    names = list(names)
    columns = [samples[:, names.index(n)] for n in STATIC_PARAMETERS]
    for parameter in DYNAMIC_PARAMETERS:
        idx = [j for j, n in enumerate(names) if n.startswith(f"{parameter}[")]
        if not idx:
            raise SamplerError(f"Chain has no {parameter} columns")
        columns.append(samples[:, idx].mean(axis=1))
    return np.column_stack(columns), list(STATIC_PARAMETERS) + list(DYNAMIC_PARAMETERS)


def point_robustness(bias: float, cri68: Tuple[float, float]) -> bool:
    """False when the bias is at least half the width of the 68% interval."""
    lo, hi = cri68
    if not hi >= lo:
        raise MonitorError(f"Empty credible interval [{lo}, {hi}]")
    return abs(bias) < 0.5 * (hi - lo)


def interval_overlap_check(a: Tuple[float, float], b: Tuple[float, float], alpha: float = 0.68) -> bool:
    """True when the overlap of two intervals is at least ``alpha`` of their convex hull."""
    (a_lo, a_hi), (b_lo, b_hi) = a, b
    if a_hi < a_lo or b_hi < b_lo:
        raise MonitorError("Interval bounds are reversed")
    hull = max(a_hi, b_hi) - min(a_lo, b_lo)
    if hull == 0:
        return True
    if a_hi == a_lo or b_hi == b_lo:
        return a_lo == b_lo and a_hi == b_hi
    overlap = max(0.0, min(a_hi, b_hi) - max(a_lo, b_lo))
    return overlap >= alpha * hull


@dataclass
class BiasReport:
    """Per-dimension bias with the mean square error decomposition."""
    names: List[str]
    mean: np.ndarray
    sd: np.ndarray
    bias: np.ndarray
    replicate_bias: np.ndarray
    cov: np.ndarray
    cob: np.ndarray
    nrmse: np.ndarray
    point_robust: np.ndarray
    interval_robust: np.ndarray
    n_boot: int

    @property
    def variance(self) -> np.ndarray:
        return self.sd ** 2

    def medians(self) -> Dict[str, float]:
        return {
            "CoV": float(np.median(self.cov)),
            "CoB": float(np.median(self.cob)),
            "NRMSE": float(np.median(self.nrmse)),
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "parameter": self.names, "mean": self.mean, "sd": self.sd, "bias": self.bias,
            "CoV": self.cov, "CoB": self.cob, "NRMSE": self.nrmse,
            "point_robust": self.point_robust, "interval_robust": self.interval_robust,
        })


def bootstrap_stats(reference: Union[PosteriorChain, np.ndarray], bias: Sequence[float],
                    names: Optional[Sequence[str]] = None) -> Dict[str, Any]:
    """Coefficients of variation and bias and the normalised RMSE per dimension."""
    if isinstance(reference, PosteriorChain):
        values, names = collapse_dynamic(reference.samples, reference.names)
    else:
        values = np.atleast_2d(np.asarray(reference, dtype=float))
        names = list(names) if names is not None else [f"x{k}" for k in range(values.shape[1])]
    if len(values) == 0:
        raise SamplerError("Empty reference chain")
    bias = np.asarray(bias, dtype=float)
    if bias.shape != (values.shape[1],):
        raise SamplerError(f"Bias has {bias.size} entries for {values.shape[1]} dimensions")
    mu = values.mean(axis=0)
    if np.any(mu == 0):
        zero = [n for n, m in zip(names, mu) if m == 0]
        raise MonitorError(f"Zero posterior mean in {zero}; relative statistics are undefined")
    sigma = values.std(axis=0)
    cov = sigma / mu
    cob = np.abs(bias) / mu
    nrmse = np.sqrt(sigma ** 2 + bias ** 2) / mu
    return {
        "names": list(names), "mean": mu, "sd": sigma, "CoV": cov, "CoB": cob, "NRMSE": nrmse,
        "median": {"CoV": float(np.median(cov)), "CoB": float(np.median(cob)), "NRMSE": float(np.median(nrmse))},
    }


def _interval(values: np.ndarray, level: float) -> Tuple[float, float]:
    tail = 0.5 * (1.0 - level)
    lo, hi = weighted_quantile(values, np.ones(len(values)), [tail, 1.0 - tail])
    return float(lo), float(hi)


def bias_estimate(reference: PosteriorChain, boot_chains: Sequence[PosteriorChain],
                  n_boot: Optional[int] = None, alpha: float = 0.68) -> BiasReport:
    """Root-mean-square of the replicate biases E[boot_i] - E[reference] per dimension.

    Dynamic parameters enter as their average over windows. The interval
    check compares the reference 68% interval with that of the pooled
    replicates.
    """
    boot_chains = list(boot_chains)[:n_boot] if n_boot is not None else list(boot_chains)
    if not boot_chains:
        raise SamplerError("No bootstrap chains")
    ref_values, names = collapse_dynamic(reference.samples, reference.names)
    boot_values = []
    for chain in boot_chains:
        if chain.names[:len(STATIC_PARAMETERS)] != reference.names[:len(STATIC_PARAMETERS)]:
            raise SamplerError("Bootstrap chain dimensions do not match the reference")
        values, _ = collapse_dynamic(chain.samples, chain.names)
        if len(values) == 0:
            raise SamplerError("Empty bootstrap chain")
        boot_values.append(values)

    ref_mean = ref_values.mean(axis=0)
    replicate = np.array([v.mean(axis=0) - ref_mean for v in boot_values])
    bias = np.sqrt(np.mean(replicate ** 2, axis=0))
    stats = bootstrap_stats(ref_values, bias, names)

    pooled = np.vstack(boot_values)
    point_flags, overlap_flags = [], []
    for k in range(len(names)):
        ref_cri = _interval(ref_values[:, k], 0.68)
        point_flags.append(point_robustness(bias[k], ref_cri))
        overlap_flags.append(interval_overlap_check(ref_cri, _interval(pooled[:, k], 0.68), alpha))
    return BiasReport(
        names=names, mean=stats["mean"], sd=stats["sd"], bias=bias, replicate_bias=replicate,
        cov=stats["CoV"], cob=stats["CoB"], nrmse=stats["NRMSE"],
        point_robust=np.array(point_flags), interval_robust=np.array(overlap_flags),
        n_boot=len(boot_chains),
    )


@dataclass
class BootstrapResult:
    report: BiasReport
    datasets: List[SyntheticDataset]
    chains: List[PosteriorChain]
    beta: BetaTrajectory
    extra: Dict[str, Any] = field(default_factory=dict)


def parametric_bootstrap(reference: PosteriorChain, series: ObservationSeries, priors: PriorSet,
                         am_cfg: Optional[AmConfig] = None, horizon_cfg: Optional[HorizonConfig] = None,
                         n_boot: int = 3, seed: SeedLike = None,
                         noise_cfg: Optional[NoiseConfig] = None) -> BootstrapResult:
    """Reference MMSE -> daily beta -> ``n_boot`` synthetic sets -> one chain each -> bias."""
    noise_cfg = noise_cfg or NoiseConfig()
    am_cfg = am_cfg or AmConfig()
    p, schedule = unpack_point(reference.mmse(), reference.window_boundaries)
    frozen = FrozenModel(p, schedule, noise_cfg, r_t_max=r_t_upper(priors))
    trajectory = optimize_receding(series, frozen, horizon_cfg)
    x0 = np.maximum(filter_series(p, schedule, series, noise_cfg).means[0], 0.0)

    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    datasets, chains = [], []
    for b, stream in enumerate(root.spawn(n_boot)):
        sim_seed, chain_seed = stream.spawn(2)
        dataset = simulate_synthetic(p, trajectory, schedule, len(series), x0, seed=sim_seed,
                                     start=series.start, noise_cfg=noise_cfg,
                                     region_id=f"{series.region_id}-boot{b}", population=series.population)
        logger.info(f"Bootstrap replicate {b + 1}/{n_boot} for {series.region_id}: sampling")
        chain = am_run(priors, dataset.series, am_cfg, seed=chain_seed, noise_cfg=noise_cfg,
                       window_boundaries=reference.window_boundaries, initial=reference.mmse())
        datasets.append(dataset)
        chains.append(chain)
    report = bias_estimate(reference, chains)
    return BootstrapResult(report, datasets, chains, trajectory)
