"""
Adaptive Metropolis sampling of the parameter posterior with the Kalman
marginal likelihood, plus convergence diagnostics and posterior summaries.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union
import logging
import math

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import linalg

from .data_pipeline import ObservationSeries
from .errors import MonitorError, SamplerError
from .io import read_json, write_csv, write_json
from .kalman import NoiseConfig, marginal_loglik
from .model import DynamicSchedule, ParameterVector, make_windows
from .priors import (
    PriorSet,
    SeedLike,
    as_generator,
    prior_logpdf,
    unpack_point,
)

logger = logging.getLogger(__name__)

LoglikFn = Callable[[np.ndarray], float]

# Label used for the single window of a chain run without any data
EMPTY_SERIES_START = date(1970, 1, 1)


class AmConfig(BaseModel):
    """Adaptive Metropolis settings.

    ``t0`` counts accepted proposals; ``math.inf`` disables adaptation.
    ``n_samples`` are kept per chain after ``burn_in`` discarded iterations.
    """
    c0_scale: float = Field(default=0.001, gt=0)
    t0: float = Field(default=10, gt=0)
    s: Optional[float] = Field(default=None, gt=0)
    epsilon_reg: float = Field(default=1e-6, gt=0)
    n_chains: int = Field(default=4, ge=1)
    n_samples: int = Field(default=50_000, ge=1)
    burn_in: int = Field(default=10_000, ge=0)
    warm_start_burn_in: int = Field(default=1_000, ge=0)
    checkpoint_every: int = Field(default=5_000, ge=1)

    def step_scale(self, d: int) -> float:
        return self.s if self.s is not None else 0.05 * 2.4 ** (2.0 / d)


@dataclass
class PosteriorChain:
    """Retained samples of one chain with acceptance bookkeeping."""
    names: List[str]
    samples: np.ndarray
    log_posterior: np.ndarray
    accepted: np.ndarray
    window_boundaries: List[date]
    seed: Optional[Dict[str, Any]] = None
    region_id: str = ""
    population: int = 0
    burn_in: int = 0
    failed_likelihoods: int = 0
    cov_checkpoints: List[Tuple[int, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.samples.size == 0:
            self.samples = self.samples.reshape(0, len(self.names))
        self.log_posterior = np.asarray(self.log_posterior, dtype=float)
        self.accepted = np.asarray(self.accepted, dtype=bool)
        if self.samples.shape[1] != len(self.names):
            raise SamplerError(f"Chain has {self.samples.shape[1]} columns for {len(self.names)} names")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.mean()) if len(self.accepted) else 0.0

    def column(self, name: str) -> np.ndarray:
        return self.samples[:, self.names.index(name)]

    def point(self, i: int) -> Tuple[ParameterVector, DynamicSchedule]:
        return unpack_point(self.samples[i], self.window_boundaries)

    def mmse(self) -> np.ndarray:
        """Posterior mean point."""
        if len(self) == 0:
            raise SamplerError("Empty chain has no posterior mean")
        return self.samples.mean(axis=0)

    def map_point(self) -> np.ndarray:
        if len(self) == 0:
            raise SamplerError("Empty chain has no maximum")
        return self.samples[int(np.argmax(self.log_posterior))]

    def discard(self, n: int) -> "PosteriorChain":
        """Chain without its first ``n`` retained samples."""
        return PosteriorChain(
            names=list(self.names), samples=self.samples[n:], log_posterior=self.log_posterior[n:],
            accepted=self.accepted[n:], window_boundaries=list(self.window_boundaries), seed=self.seed,
            region_id=self.region_id, population=self.population, burn_in=self.burn_in + n,
            failed_likelihoods=self.failed_likelihoods, cov_checkpoints=list(self.cov_checkpoints),
        )

    @classmethod
    def pool(cls, chains: Sequence["PosteriorChain"]) -> "PosteriorChain":
        """Concatenate chains of the same region."""
        if not chains:
            raise SamplerError("Nothing to pool")
        first = chains[0]
        for chain in chains[1:]:
            if chain.names != first.names:
                raise SamplerError("Chains have different dimensions")
        return cls(
            names=list(first.names),
            samples=np.vstack([c.samples for c in chains]),
            log_posterior=np.concatenate([c.log_posterior for c in chains]),
            accepted=np.concatenate([c.accepted for c in chains]),
            window_boundaries=list(first.window_boundaries),
            region_id=first.region_id,
            population=first.population,
            failed_likelihoods=sum(c.failed_likelihoods for c in chains),
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.samples, columns=self.names)
        frame.insert(0, "accepted", self.accepted.astype(int))
        frame.insert(0, "log_posterior", self.log_posterior)
        return frame

    def to_csv(self, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
        """Write samples as CSV with a JSON sidecar next to it."""
        path = Path(path)
        write_csv(self.to_frame(), path)
        sidecar = {
            "region_id": self.region_id,
            "population": self.population,
            "names": self.names,
            "window_boundaries": [d.isoformat() for d in self.window_boundaries],
            "seed": self.seed,
            "n_samples": len(self),
            "burn_in": self.burn_in,
            "acceptance_rate": self.acceptance_rate,
            "failed_likelihoods": self.failed_likelihoods,
            "final_proposal_cov": self.cov_checkpoints[-1][1] if self.cov_checkpoints else None,
        }
        sidecar.update(extra or {})
        write_json(sidecar, path.with_suffix(".json"))
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "PosteriorChain":
        path = Path(path)
        sidecar = read_json(path.with_suffix(".json"))
        frame = pd.read_csv(path)
        names = list(sidecar["names"])
        checkpoints = []
        if sidecar.get("final_proposal_cov") is not None:
            checkpoints.append((-1, np.asarray(sidecar["final_proposal_cov"], dtype=float)))
        return cls(
            names=names,
            samples=frame[names].to_numpy(dtype=float),
            log_posterior=frame["log_posterior"].to_numpy(dtype=float),
            accepted=frame["accepted"].to_numpy(dtype=int).astype(bool),
            window_boundaries=[date.fromisoformat(d) for d in sidecar["window_boundaries"]],
            seed=sidecar.get("seed"),
            region_id=sidecar.get("region_id", ""),
            population=int(sidecar.get("population", 0)),
            burn_in=int(sidecar.get("burn_in", 0)),
            failed_likelihoods=int(sidecar.get("failed_likelihoods", 0)),
            cov_checkpoints=checkpoints,
        )


class KalmanLikelihood:
    """Picklable log-likelihood of a sampler-space point for one regional series."""

    def __init__(self, series: ObservationSeries, window_boundaries: Sequence[date],
                 noise_cfg: Optional[NoiseConfig] = None):
        self.series = series
        self.window_boundaries = list(window_boundaries)
        self.noise_cfg = noise_cfg or NoiseConfig()

    def __call__(self, point: np.ndarray) -> float:
        p, schedule = unpack_point(point, self.window_boundaries)
        return marginal_loglik(p, schedule, self.series, self.noise_cfg)


def seed_record(seed: SeedLike) -> Optional[Dict[str, Any]]:
    if isinstance(seed, np.random.SeedSequence):
        return {"entropy": seed.entropy, "spawn_key": list(seed.spawn_key)}
    if isinstance(seed, (int, np.integer)):
        return {"entropy": int(seed), "spawn_key": []}
    return None


def _windows_for(priors: PriorSet, series: ObservationSeries,
                 window_boundaries: Optional[Sequence[date]]) -> List[date]:
    if window_boundaries is not None:
        return list(window_boundaries)
    if len(series) == 0:
        return [EMPTY_SERIES_START]
    return list(make_windows(series.start, series.end, priors.window_length_days))


def am_run(priors: PriorSet, series: ObservationSeries, cfg: Optional[AmConfig] = None,
           seed: SeedLike = None, noise_cfg: Optional[NoiseConfig] = None,
           window_boundaries: Optional[Sequence[date]] = None,
           initial: Optional[np.ndarray] = None, warm_start: bool = False,
           loglik_fn: Optional[LoglikFn] = None) -> PosteriorChain:
    """Run one Adaptive Metropolis chain.

    Proposals are Gaussian around the current point in coordinates scaled to
    the prior support. The proposal covariance is ``c0_scale * I`` until
    ``t0`` proposals have been accepted, then ``s * cov(history) + s * eps * I``
    over every state visited so far. Proposals outside the prior support are
    rejected without evaluating the likelihood; a likelihood that fails to
    evaluate also counts as a rejection.

    Args:
        initial: starting point; drawn from the prior when omitted
        warm_start: the starting point comes from a stored chain, so burn-in is shortened
        loglik_fn: replaces the Kalman marginal likelihood (tests, prior runs)
    """
    cfg = cfg or AmConfig()
    rng = as_generator(seed)
    boundaries = _windows_for(priors, series, window_boundaries)
    n_windows = len(boundaries)
    names = priors.dimension_names(n_windows)
    lower, upper = priors.bounds(n_windows)
    free = upper > lower
    width = np.where(free, upper - lower, 1.0)
    d = int(free.sum())

    if loglik_fn is None:
        loglik_fn = KalmanLikelihood(series, boundaries, noise_cfg) if len(series) >= 2 else (lambda x: 0.0)

    failures = 0

    def log_target(x: np.ndarray) -> float:
        nonlocal failures
        lp = prior_logpdf(priors, x)
        if not np.isfinite(lp):
            return -np.inf
        try:
            ll = float(loglik_fn(x))
        except (MonitorError, ArithmeticError, ValueError, np.linalg.LinAlgError) as e:
            failures += 1
            logger.debug(f"Likelihood failed, proposal rejected: {e}")
            return -np.inf
        if not np.isfinite(ll):
            failures += 1
            return -np.inf
        return lp + ll

    # Starting point
    if initial is not None:
        x = np.asarray(initial, dtype=float).copy()
        current = log_target(x)
        if not np.isfinite(current):
            raise SamplerError("Initial point has zero posterior density")
    else:
        for _ in range(1000):
            x = np.array([desc.sample(rng) for desc in priors.descriptors(n_windows)])
            current = log_target(x)
            if np.isfinite(current):
                break
        else:
            raise SamplerError("No prior draw with finite posterior density in 1000 attempts")

    burn_in = cfg.warm_start_burn_in if warm_start else cfg.burn_in
    if warm_start:
        logger.info(f"Warm start for {series.region_id or 'chain'}: burn-in shortened to {burn_in}")

    total = burn_in + cfg.n_samples
    s = cfg.step_scale(max(d, 1))
    u = (x - lower) / width

    # Running mean and scatter of the visited states (free coordinates only)
    count = 1
    running_mean = u[free].copy()
    scatter = np.zeros((d, d))

    samples = np.zeros((cfg.n_samples, len(names)))
    log_post = np.zeros(cfg.n_samples)
    flags = np.zeros(cfg.n_samples, dtype=bool)
    checkpoints: List[Tuple[int, np.ndarray]] = []
    n_accepted = 0
    c0_chol = math.sqrt(cfg.c0_scale) * np.eye(d)

    for i in range(total):
        if d > 0 and n_accepted >= cfg.t0 and count > 1:
            C = s * scatter / (count - 1) + s * cfg.epsilon_reg * np.eye(d)
            chol = linalg.cholesky(C, lower=True)
        else:
            C, chol = None, c0_chol

        u_new = u.copy()
        u_new[free] = u[free] + chol @ rng.standard_normal(d)
        accepted = False
        if np.all((u_new[free] >= 0.0) & (u_new[free] <= 1.0)):
            x_new = np.where(free, lower + u_new * width, lower)
            proposed = log_target(x_new)
            if np.isfinite(proposed) and math.log(rng.uniform()) < proposed - current:
                u, x, current = u_new, x_new, proposed
                accepted = True
                n_accepted += 1

        # Welford update with the new chain state
        count += 1
        delta = u[free] - running_mean
        running_mean += delta / count
        scatter += np.outer(delta, u[free] - running_mean)

        if (i + 1) % cfg.checkpoint_every == 0:
            current_cov = C if C is not None else cfg.c0_scale * np.eye(d)
            checkpoints.append((i + 1, current_cov * np.outer(width[free], width[free])))

        if i >= burn_in:
            j = i - burn_in
            samples[j], log_post[j], flags[j] = x, current, accepted

    if failures:
        logger.info(f"{series.region_id or 'chain'}: {failures} proposals rejected after likelihood failures")
    return PosteriorChain(
        names=names, samples=samples, log_posterior=log_post, accepted=flags,
        window_boundaries=boundaries, seed=seed_record(seed), region_id=series.region_id,
        population=series.population, burn_in=burn_in, failed_likelihoods=failures,
        cov_checkpoints=checkpoints,
    )


def _run_chain(kwargs: Dict[str, Any]) -> PosteriorChain:
    return am_run(**kwargs)


def warm_start_points(chains: Sequence[PosteriorChain], priors: PriorSet,
                      window_boundaries: Sequence[date]) -> List[np.ndarray]:
    """Starting points from the last state of stored chains, mapped onto new windows.

    A window that did not exist in the stored chain takes the dynamic values
    of the latest stored window starting on or before it.
    """
    points = []
    n_static = len(priors.static)
    n_new = len(window_boundaries)
    for chain in chains:
        if len(chain) == 0:
            continue
        last = chain.samples[-1]
        old = np.array(chain.window_boundaries, dtype="datetime64[D]")
        n_old = len(old)
        new = np.array(list(window_boundaries), dtype="datetime64[D]")
        source = np.clip(np.searchsorted(old, new, side="right") - 1, 0, n_old - 1)
        dynamic = [last[n_static + j * n_old + source] for j in range(len(priors.dynamic))]
        point = np.concatenate([last[:n_static], *dynamic])
        if len(point) != n_static + len(priors.dynamic) * n_new or not np.isfinite(prior_logpdf(priors, point)):
            logger.warning(f"Stored chain for {chain.region_id} gives no usable warm start")
            continue
        points.append(point)
    return points


def run_chains(priors: PriorSet, series: ObservationSeries, cfg: Optional[AmConfig] = None,
               seed: SeedLike = None, jobs: int = 1, noise_cfg: Optional[NoiseConfig] = None,
               window_boundaries: Optional[Sequence[date]] = None,
               initial: Optional[Sequence[np.ndarray]] = None,
               loglik_fn: Optional[LoglikFn] = None) -> List[PosteriorChain]:
    """Independent chains, each on its own stream spawned from ``seed``."""
    cfg = cfg or AmConfig()
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = root.spawn(cfg.n_chains)
    tasks = []
    for c, stream in enumerate(streams):
        start = None if initial is None else initial[c % len(initial)]
        tasks.append(dict(
            priors=priors, series=series, cfg=cfg, seed=stream, noise_cfg=noise_cfg,
            window_boundaries=window_boundaries, initial=start, warm_start=start is not None,
            loglik_fn=loglik_fn,
        ))
    if jobs <= 1 or len(tasks) == 1:
        return [_run_chain(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_chain, tasks))


# ---------------------------------------------------------------------------
# Diagnostics and summaries
# ---------------------------------------------------------------------------

def _as_matrix(chain: Union[PosteriorChain, np.ndarray]) -> np.ndarray:
    if isinstance(chain, PosteriorChain):
        return chain.samples
    values = np.asarray(chain, dtype=float)
    return values[:, None] if values.ndim == 1 else values


def gelman_rubin(chains: Sequence[Union[PosteriorChain, np.ndarray]], dim: int) -> float:
    """Potential scale reduction factor of dimension ``dim`` across chains of equal length."""
    if len(chains) < 2:
        raise SamplerError("Gelman-Rubin needs at least two chains")
    columns = [_as_matrix(c)[:, dim] for c in chains]
    n = len(columns[0])
    if n < 2 or any(len(c) != n for c in columns):
        raise SamplerError("Gelman-Rubin needs chains of equal length (at least two samples)")
    values = np.vstack(columns)
    W = values.var(axis=1, ddof=1).mean()
    B = n * values.mean(axis=1).var(ddof=1)
    if W <= 0:
        logger.warning(f"Zero within-chain variance in dimension {dim}; Gelman-Rubin is infinite")
        return math.inf
    return math.sqrt(((n - 1) / n * W + B / n) / W)


def gelman_rubin_all(chains: Sequence[Union[PosteriorChain, np.ndarray]]) -> np.ndarray:
    d = _as_matrix(chains[0]).shape[1]
    return np.array([gelman_rubin(chains, k) for k in range(d)])


def weighted_quantile(values: np.ndarray, weights: np.ndarray, q: Sequence[float]) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    cumulative = (np.cumsum(w) - 0.5 * w) / w.sum()
    return np.interp(q, cumulative, v)


def _pooled(chains: Sequence[Union[PosteriorChain, np.ndarray]],
            weights: Optional[Sequence[float]]) -> Tuple[np.ndarray, np.ndarray]:
    if not chains:
        raise SamplerError("No chains to summarise")
    matrices = [_as_matrix(c) for c in chains]
    if any(m.shape[0] == 0 for m in matrices):
        raise SamplerError("Cannot summarise an empty chain")
    if len({m.shape[1] for m in matrices}) != 1:
        raise SamplerError("Chains have different dimensions")
    if weights is None:
        weights = [float(m.shape[0]) for m in matrices]
    if len(weights) != len(matrices):
        raise SamplerError(f"{len(weights)} weights for {len(matrices)} chains")
    # Every chain carries its weight in total, spread evenly over its samples
    per_sample = np.concatenate([np.full(m.shape[0], w / m.shape[0]) for m, w in zip(matrices, weights)])
    return np.vstack(matrices), per_sample


def posterior_summary(chains: Sequence[Union[PosteriorChain, np.ndarray]],
                      weights: Optional[Sequence[float]] = None,
                      names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Mean, sd and equal-tailed 68/95% intervals per dimension.

    With ``weights`` (e.g. regional populations) each chain contributes in
    proportion to its weight regardless of its length.
    """
    values, w = _pooled(chains, weights)
    if names is None:
        first = chains[0]
        names = first.names if isinstance(first, PosteriorChain) else [f"x{k}" for k in range(values.shape[1])]
    w = w / w.sum()
    mean = w @ values
    sd = np.sqrt(np.maximum(w @ (values - mean) ** 2, 0.0))
    rows = []
    for k, name in enumerate(names):
        lo95, lo68, median, hi68, hi95 = weighted_quantile(
            values[:, k], w, [0.025, 0.16, 0.5, 0.84, 0.975]
        )
        rows.append({
            "parameter": name, "mean": mean[k], "sd": sd[k], "lo95": lo95, "lo68": lo68,
            "median": median, "hi68": hi68, "hi95": hi95,
        })
    return pd.DataFrame(rows).set_index("parameter")


def pooled_samples(chains: Sequence[Union[PosteriorChain, np.ndarray]], weights: Sequence[float],
                   n: int, seed: SeedLike = None) -> np.ndarray:
    """Weighted resample across regional chains."""
    values, w = _pooled(chains, weights)
    rng = as_generator(seed)
    index = rng.choice(len(values), size=n, replace=True, p=w / w.sum())
    return values[index]
