"""
Daily transmission rate estimation.

The frozen model is propagated without measurement correction,
x_{k+1} = F(beta_k) x_k, and the daily betas minimise the Gaussian negative
log-likelihood of the data under the innovation covariances of a Kalman pass
at the frozen parameters, plus ``c`` times the squared day-to-day changes.
Long periods are solved in overlapping windows of ``prediction_horizon``
days, keeping the first ``step`` days of each.
"""
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from scipy.optimize import minimize

from .data_pipeline import ObservationSeries
from .errors import FilterError, OptimizationError
from .io import write_csv, write_json
from .kalman import LOG_2PI, NoiseConfig, ObservationModel, filter_series
from .model import (
    E,
    PHI,
    DynamicSchedule,
    ParameterVector,
    beta_from_r0,
    build_transition_matrix,
    derive_fractions,
    r0_from_beta,
)
from .priors import PriorSet

logger = logging.getLogger(__name__)

BETA_FLOOR = 1e-8


class HorizonConfig(BaseModel):
    """Receding-horizon settings. ``c=None`` picks the regularisation from the data."""
    prediction_horizon: int = Field(default=150, ge=1)
    step: int = Field(default=20, ge=1)
    c: Optional[float] = Field(default=None, ge=0)
    gtol: float = Field(default=1e-8, gt=0)
    ftol: float = Field(default=1e-12, gt=0)
    maxiter: int = Field(default=2000, ge=1)
    beta_lower: Optional[float] = Field(default=None, ge=0)
    beta_upper: Optional[float] = Field(default=None, gt=0)
    optimize_x0: bool = False

    @model_validator(mode="after")
    def _check_step(self) -> "HorizonConfig":
        if self.step > self.prediction_horizon:
            raise ValueError(
                f"step ({self.step}) must not exceed the prediction horizon ({self.prediction_horizon})"
            )
        if self.step == self.prediction_horizon:
            logger.warning("Windows do not overlap (step == prediction_horizon); expect junction artifacts")
        return self


@dataclass(frozen=True)
class FrozenModel:
    """Posterior point held fixed while the daily betas are estimated."""
    parameters: ParameterVector
    schedule: DynamicSchedule
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    # Upper end of the R_t prior support; None reads the packaged prior file
    r_t_max: Optional[float] = None


@dataclass
class BetaTrajectory:
    """Daily beta; ``beta[k]`` drives the transition from ``dates[k]`` to the next day."""
    dates: List[date]
    beta: np.ndarray
    r_t: np.ndarray
    objective: float
    c: float
    converged: bool = True
    windows: List[Dict[str, Any]] = field(default_factory=list)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.r_t = np.asarray(self.r_t, dtype=float)
        if np.any(self.beta <= 0):
            raise OptimizationError("Daily beta must be strictly positive")

    def __len__(self) -> int:
        return len(self.beta)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "date": [d.isoformat() for d in self.dates],
            "beta": self.beta,
            "R_t": self.r_t,
        })

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Trajectory CSV plus a JSON file with the per-window diagnostics."""
        path = Path(path)
        write_csv(self.to_frame(), path)
        windows = [{k: v for k, v in w.items() if k != "tail"} for w in self.windows]
        write_json({"objective": self.objective, "c": self.c, "converged": self.converged,
                    "windows": windows}, path.with_suffix(".json"))
        return path


class MeanFieldProblem:
    """Cost and adjoint gradient over one stretch of days.

    ``base_matrices[j]`` is the transition matrix of step j with a zero beta
    entry; ``observations[j]`` and ``innovation_covs[j]`` belong to the day
    reached after step j. Missing observation components are left out.
    """

    def __init__(self, base_matrices: Sequence[np.ndarray], observations: np.ndarray,
                 innovation_covs: np.ndarray, H_matrix: Optional[np.ndarray] = None):
        self.base = np.asarray(base_matrices, dtype=float)
        self.z = np.asarray(observations, dtype=float)
        self.H = H_matrix if H_matrix is not None else ObservationModel().H_matrix
        n, m = len(self.base), self.H.shape[0]
        if len(self.z) != n or len(innovation_covs) != n:
            raise OptimizationError("Matrices, observations and covariances must cover the same days")

        self.S = np.asarray(innovation_covs, dtype=float)
        self.mask = np.isfinite(self.z)
        self.S_inv = np.zeros((n, m, m))
        self.constant = 0.0
        for j in range(n):
            rows = np.flatnonzero(self.mask[j])
            if len(rows) == 0:
                continue
            S = self.S[j][np.ix_(rows, rows)]
            sign, log_det = np.linalg.slogdet(S)
            if sign <= 0 or not np.isfinite(log_det):
                raise FilterError("innovation covariance is singular", day=j + 1)
            self.S_inv[j][np.ix_(rows, rows)] = np.linalg.inv(S)
            self.constant += 0.5 * (log_det + len(rows) * LOG_2PI)
        self.z_filled = np.where(self.mask, self.z, 0.0)

    def __len__(self) -> int:
        return len(self.base)

    def window(self, start: int, stop: int) -> "MeanFieldProblem":
        return MeanFieldProblem(self.base[start:stop], self.z[start:stop], self.S[start:stop], self.H)

    def propagate(self, B: np.ndarray, x0: np.ndarray) -> np.ndarray:
        """States after each step (row j is the state reached by step j)."""
        xs = np.zeros((len(self), len(x0)))
        x = np.asarray(x0, dtype=float)
        for j in range(len(self)):
            F = self.base[j]
            x_next = F @ x
            x_next[E] += B[j] * x[PHI]
            xs[j] = x_next
            x = x_next
        return xs

    def _residuals(self, xs: np.ndarray) -> np.ndarray:
        return np.where(self.mask, self.z_filled - xs @ self.H.T, 0.0)

    def data_term(self, B: np.ndarray, x0: np.ndarray) -> float:
        """Quadratic part of the negative log-likelihood."""
        r = self._residuals(self.propagate(B, x0))
        return 0.5 * float(np.einsum("ki,kij,kj->", r, self.S_inv, r))

    @staticmethod
    def _differences(B: np.ndarray, previous: Optional[float]) -> np.ndarray:
        return np.diff(np.r_[previous, B]) if previous is not None else np.diff(B)

    def cost(self, B: np.ndarray, x0: np.ndarray, c: float, previous: Optional[float] = None) -> float:
        dB = self._differences(B, previous)
        return self.data_term(B, x0) + self.constant + c * float(dB @ dB)

    def gradient(self, B: np.ndarray, x0: np.ndarray, c: float,
                 previous: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Gradient with respect to ``B`` and to ``x0`` by the adjoint recursion."""
        n = len(self)
        x0 = np.asarray(x0, dtype=float)
        xs = self.propagate(B, x0)
        r = self._residuals(xs)
        # d cost / d x_j from the data term at each reached day
        local = -np.einsum("ij,kjl,kl->ki", self.H.T, self.S_inv, r)

        grad_B = np.zeros(n)
        adjoint = np.zeros(len(x0))
        for j in range(n - 1, -1, -1):
            adjoint = adjoint + local[j]
            source = xs[j - 1] if j > 0 else x0
            grad_B[j] = adjoint[E] * source[PHI]
            F = self.base[j].copy()
            F[E, PHI] += B[j]
            adjoint = F.T @ adjoint

        # Regulariser c * sum(dB^2)
        dB = self._differences(B, previous)
        reg = np.zeros(n)
        if previous is not None:
            reg += 2.0 * c * dB[:n]
            reg[:-1] -= 2.0 * c * dB[1:]
        else:
            reg[1:] += 2.0 * c * dB
            reg[:-1] -= 2.0 * c * dB
        return grad_B + reg, adjoint


def _base_matrices(frozen: FrozenModel, dates: Sequence[date]) -> List[np.ndarray]:
    p = frozen.parameters
    cache: Dict[int, np.ndarray] = {}
    out = []
    for k in frozen.schedule.window_indices(dates):
        k = int(k)
        if k not in cache:
            f = derive_fractions(p, frozen.schedule.ifr_per_window[k])
            cache[k] = build_transition_matrix(p, f, 0.0)
        out.append(cache[k])
    return out


def r_t_upper(priors: PriorSet) -> float:
    """Upper end of the R_t prior support."""
    return float(priors.dynamic["R_t"].support[1])


def beta_bounds(frozen: FrozenModel, cfg: HorizonConfig) -> Tuple[float, float]:
    """Bounds on the daily beta; the default upper bound is the image of the R_t support."""
    p = frozen.parameters
    f = derive_fractions(p, frozen.schedule.ifr_per_window[0])
    lower = cfg.beta_lower if cfg.beta_lower is not None else BETA_FLOOR
    if cfg.beta_upper is not None:
        upper = cfg.beta_upper
    else:
        r_t_max = frozen.r_t_max if frozen.r_t_max is not None else r_t_upper(PriorSet.default())
        upper = beta_from_r0(p, f, r_t_max)
    return max(lower, BETA_FLOOR), upper


def _problem_for(frozen: FrozenModel, series: ObservationSeries) -> Tuple[MeanFieldProblem, np.ndarray]:
    if len(series) < 2:
        raise OptimizationError("Daily beta estimation needs at least two days of data")
    result = filter_series(frozen.parameters, frozen.schedule, series, frozen.noise)
    base = _base_matrices(frozen, series.dates[:-1])
    problem = MeanFieldProblem(base, series.observations()[1:], result.innovation_covs[1:])
    return problem, result.means[0]


def meanfield_cost(B: Sequence[float], frozen: FrozenModel, series: ObservationSeries,
                   x0: Optional[np.ndarray] = None, c: float = 0.0) -> float:
    """Regularised negative mean-field log-likelihood of ``series`` under daily betas ``B``.

    ``B`` has one entry per transition (``len(series) - 1``). ``x0`` defaults
    to the filter's initial state at the frozen parameters.
    """
    B = np.asarray(B, dtype=float)
    problem, x_init = _problem_for(frozen, series)
    if len(B) != len(problem):
        raise OptimizationError(f"Expected {len(problem)} daily values, got {len(B)}")
    return problem.cost(B, x_init if x0 is None else np.asarray(x0, dtype=float), c)


def meanfield_gradient(B: Sequence[float], frozen: FrozenModel, series: ObservationSeries,
                       x0: Optional[np.ndarray] = None, c: float = 0.0) -> np.ndarray:
    B = np.asarray(B, dtype=float)
    problem, x_init = _problem_for(frozen, series)
    grad, _ = problem.gradient(B, x_init if x0 is None else np.asarray(x0, dtype=float), c)
    return grad


def finite_difference_gradient(problem: MeanFieldProblem, B: np.ndarray, x0: np.ndarray, c: float,
                               previous: Optional[float] = None, h: float = 1e-7) -> np.ndarray:
    """Central differences of the cost with respect to ``B``."""
    grad = np.zeros(len(B))
    for j in range(len(B)):
        step = h * max(1.0, abs(B[j]))
        up, down = B.copy(), B.copy()
        up[j] += step
        down[j] -= step
        grad[j] = (problem.cost(up, x0, c, previous) - problem.cost(down, x0, c, previous)) / (2.0 * step)
    return grad


def default_regularization(problem: MeanFieldProblem, B: np.ndarray, x0: np.ndarray,
                           relative_change: float = 0.1) -> float:
    """Weight at which a daily change of ``relative_change`` * mean(B) costs as much as the data misfit."""
    scale = relative_change * float(np.mean(B))
    if len(B) < 2 or scale <= 0:
        return 0.0
    return problem.data_term(B, x0) / ((len(B) - 1) * scale ** 2)


@dataclass
class WindowSolution:
    beta: np.ndarray
    x0: np.ndarray
    objective: float
    converged: bool
    iterations: int
    message: str


def optimize_window(problem: MeanFieldProblem, x0: np.ndarray, init_B: Sequence[float],
                    continuity: Optional[float], cfg: HorizonConfig, c: float,
                    bounds: Tuple[float, float], window: Optional[int] = None) -> WindowSolution:
    """Bound-constrained minimisation of the cost over one window.

    ``continuity`` is the last kept beta of the previous window; its change
    to the first beta of this window is penalised like any other day.
    A solver that stops before convergence returns its best iterate with
    ``converged=False``.
    """
    n = len(problem)
    lower, upper = bounds
    B0 = np.clip(np.asarray(init_B, dtype=float), lower, upper)
    if len(B0) != n:
        raise OptimizationError(f"Initial guess has {len(B0)} values for {n} days", window=window)
    x0 = np.asarray(x0, dtype=float)
    n_state = len(x0)

    if cfg.optimize_x0:
        def objective(v):
            B, x = v[:n], v[n:]
            g_B, g_x = problem.gradient(B, x, c, continuity)
            return problem.cost(B, x, c, continuity), np.r_[g_B, g_x]
        start = np.r_[B0, x0]
        box = [(lower, upper)] * n + [(0.0, None)] * n_state
    else:
        def objective(v):
            g_B, _ = problem.gradient(v, x0, c, continuity)
            return problem.cost(v, x0, c, continuity), g_B
        start = B0
        box = [(lower, upper)] * n

    try:
        res = minimize(objective, start, jac=True, method="L-BFGS-B", bounds=box,
                       options={"gtol": cfg.gtol, "ftol": cfg.ftol, "maxiter": cfg.maxiter})
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        raise OptimizationError(f"solver failed: {e}", window=window, original_exception=e) from e

    if not res.success:
        logger.warning(f"Window {window}: solver stopped without convergence ({res.message})")
    B = np.clip(res.x[:n], lower, upper)
    x = res.x[n:] if cfg.optimize_x0 else x0
    return WindowSolution(B, x, float(res.fun), bool(res.success), int(res.nit), str(res.message))


def initial_beta(frozen: FrozenModel, dates: Sequence[date]) -> np.ndarray:
    """Daily beta implied by the frozen windowed R_t."""
    p = frozen.parameters
    r_t, ifr = frozen.schedule.per_day(dates)
    return np.array([beta_from_r0(p, derive_fractions(p, i), r) for r, i in zip(r_t, ifr)])


def _to_r_t(frozen: FrozenModel, dates: Sequence[date], beta: np.ndarray) -> np.ndarray:
    p = frozen.parameters
    _, ifr = frozen.schedule.per_day(dates)
    return np.array([r0_from_beta(p, derive_fractions(p, i), b) for b, i in zip(beta, ifr)])


def optimize_receding(series: ObservationSeries, frozen: FrozenModel,
                      cfg: Optional[HorizonConfig] = None, x0: Optional[np.ndarray] = None,
                      init_B: Optional[Sequence[float]] = None) -> BetaTrajectory:
    """Daily beta over the whole series by overlapping windows.

    Each window spans ``prediction_horizon`` transitions and starts from the
    mean-field state reached with the betas already kept; only its first
    ``step`` days are kept, except for the final window which is kept whole.
    """
    cfg = cfg or HorizonConfig()
    problem, x_init = _problem_for(frozen, series)
    x_start = x_init if x0 is None else np.asarray(x0, dtype=float)
    dates = list(series.dates[:-1])
    n = len(problem)
    B_init = initial_beta(frozen, dates) if init_B is None else np.asarray(init_B, dtype=float)
    bounds = beta_bounds(frozen, cfg)
    B_init = np.clip(B_init, *bounds)
    c = cfg.c if cfg.c is not None else default_regularization(problem, B_init, x_start)
    logger.info(f"{series.region_id}: estimating {n} daily betas (c={c:.4g})")

    kept = np.zeros(n)
    windows: List[Dict[str, Any]] = []
    start, index = 0, 0
    converged = True
    x = x_start
    window_cfg = cfg
    while True:
        stop = min(start + cfg.prediction_horizon, n)
        sub = problem.window(start, stop)
        continuity = kept[start - 1] if start > 0 else None
        guess = B_init[start:stop]
        try:
            solution = optimize_window(sub, x, guess, continuity, window_cfg, c, bounds, window=index)
        except FilterError as e:
            raise OptimizationError(str(e), window=index, original_exception=e) from e
        final = stop == n
        keep = stop - start if final else min(cfg.step, stop - start)
        kept[start:start + keep] = solution.beta[:keep]
        converged = converged and solution.converged
        windows.append({
            "window": index, "start": dates[start].isoformat(), "stop": dates[stop - 1].isoformat(),
            "kept_days": keep, "objective": solution.objective, "converged": solution.converged,
            "iterations": solution.iterations, "tail": solution.beta[keep:],
        })
        if index == 0:
            x = x_start = solution.x0
            # Only the first window may move the initial state
            window_cfg = cfg.model_copy(update={"optimize_x0": False})
        if final:
            break
        x = sub.window(0, keep).propagate(solution.beta[:keep], x)[-1]
        start += keep
        index += 1

    B = np.maximum(kept, bounds[0])
    objective = problem.cost(B, x_start, c)
    return BetaTrajectory(dates=dates, beta=B, r_t=_to_r_t(frozen, dates, B), objective=objective,
                          c=c, converged=converged, windows=windows)


def junction_discontinuity(trajectory: BetaTrajectory) -> float:
    """Largest relative jump of beta across the junctions between kept windows."""
    jumps = []
    position = 0
    for w in trajectory.windows[:-1]:
        position += w["kept_days"]
        if 0 < position < len(trajectory):
            a, b = trajectory.beta[position - 1], trajectory.beta[position]
            jumps.append(abs(b - a) / max(abs(a), BETA_FLOOR))
    return max(jumps) if jumps else 0.0


def tail_deviation(trajectory: BetaTrajectory) -> float:
    """Largest relative difference between each window's discarded tail and the kept later estimate."""
    deviations = []
    position = 0
    for w in trajectory.windows[:-1]:
        position += w["kept_days"]
        tail = np.asarray(w["tail"], dtype=float)
        later = trajectory.beta[position:position + len(tail)]
        if len(later):
            deviations.append(float(np.max(np.abs(tail[:len(later)] - later) / np.maximum(later, BETA_FLOOR))))
    return max(deviations) if deviations else 0.0
