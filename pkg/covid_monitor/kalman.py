"""
Kalman filter over the compartment model.

Process noise follows the linear noise approximation: every flow encoded in
the transition matrix contributes a Poisson block, a term proportional to the
squared flow and a constant regularising term. Noise is evaluated at the
one-step-ahead predicted mean, clamped at zero.
"""
from dataclasses import dataclass, field
from datetime import date
from typing import List, Optional, Protocol, Sequence, Tuple, Union
import logging
import math

import numpy as np
from pydantic import BaseModel, Field
from scipy import linalg
from scipy.optimize import lsq_linear

from .data_pipeline import ObservationSeries
from .errors import FilterError, ModelError
from .model import (
    CUMULATIVE,
    NONCUMULATIVE,
    N_STATES,
    OBSERVED,
    PHI,
    CommuteNetwork,
    DynamicSchedule,
    ParameterVector,
    beta_from_r0,
    build_transition_matrix,
    derive_fractions,
    network_phi_update,
)

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class NoiseConfig(BaseModel):
    """Process and measurement noise settings."""
    epsilon: float = Field(default=0.05 ** 2, ge=0)
    q_diag: float = Field(default=1.0, ge=0)
    r0_H: float = Field(default=1.0, ge=0)
    r0_W: float = Field(default=1.0, ge=0)
    r0_D: float = Field(default=1.0, ge=0)
    rd_H: float = Field(default=0.001 ** 2, ge=0)
    rd_W: float = Field(default=0.001 ** 2, ge=0)
    rd_D: float = Field(default=0.001 ** 2, ge=0)

    @property
    def r0(self) -> np.ndarray:
        return np.array([self.r0_H, self.r0_W, self.r0_D])

    @property
    def rd(self) -> np.ndarray:
        return np.array([self.rd_H, self.rd_W, self.rd_D])


@dataclass(frozen=True)
class ObservationModel:
    """Selector of the measured states (H, W, D)."""
    H_matrix: np.ndarray = field(default_factory=lambda: np.eye(N_STATES)[list(OBSERVED)])

    @property
    def observed_states(self) -> Tuple[int, ...]:
        return tuple(int(np.argmax(row)) for row in self.H_matrix)


@dataclass
class FilterState:
    """Filtered state mean and covariance after day ``k``."""
    mean: np.ndarray
    cov: np.ndarray
    loglik: float = 0.0
    k: int = 0

    def is_valid(self, sym_tol: float = 1e-10, eig_tol: float = 1e-8) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.cov))))
        if np.max(np.abs(self.cov - self.cov.T)) > sym_tol * scale:
            return False
        return float(np.linalg.eigvalsh(self.cov).min()) >= -eig_tol * scale


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransitionTable:
    """The flows encoded in a transition matrix, as parallel index arrays."""
    source: np.ndarray
    destination: np.ndarray
    coefficient: np.ndarray
    # 1: full Poisson block; 2: Poisson variance on the destination only; 0: none
    poisson: np.ndarray

    @classmethod
    def from_matrix(cls, F: np.ndarray) -> "TransitionTable":
        dst, src = np.nonzero(F)
        off_diagonal = dst != src
        dst, src = dst[off_diagonal], src[off_diagonal]
        poisson = np.ones(len(src), dtype=int)
        # Shedding into phi is deterministic; infection out of phi does not deplete it
        poisson[dst == PHI] = 0
        poisson[src == PHI] = 2
        return cls(source=src, destination=dst, coefficient=F[dst, src], poisson=poisson)


def assemble_process_noise(F: np.ndarray, mean_state: np.ndarray, cfg: NoiseConfig,
                           table: Optional[TransitionTable] = None) -> np.ndarray:
    """Process noise covariance Q = Qp + Qv + Q0 summed over the flows of ``F``."""
    table = table or TransitionTable.from_matrix(F)
    n = F.shape[0]
    x = np.maximum(np.asarray(mean_state, dtype=float), 0.0)
    flux = table.coefficient * x[table.source]
    diagonal = cfg.epsilon * flux ** 2 + cfg.q_diag

    Q = np.zeros((n, n))
    np.add.at(Q, (table.source, table.source), diagonal)
    np.add.at(Q, (table.destination, table.destination), diagonal)

    full = table.poisson == 1
    src, dst, mu = table.source[full], table.destination[full], flux[full]
    np.add.at(Q, (src, src), mu)
    np.add.at(Q, (dst, dst), mu)
    np.add.at(Q, (src, dst), -mu)
    np.add.at(Q, (dst, src), -mu)

    into_only = table.poisson == 2
    np.add.at(Q, (table.destination[into_only], table.destination[into_only]), flux[into_only])
    return 0.5 * (Q + Q.T)


def measurement_noise(predicted_state: np.ndarray, cfg: NoiseConfig,
                      obs: Optional[ObservationModel] = None) -> np.ndarray:
    """Diagonal measurement covariance from the predicted (H, W, D)."""
    obs = obs or ObservationModel()
    y_hat = obs.H_matrix @ np.asarray(predicted_state, dtype=float)
    return np.diag(cfg.r0 + cfg.rd * y_hat ** 2)


class NoiseModel(Protocol):
    def process(self, F: np.ndarray, predicted_mean: np.ndarray) -> np.ndarray: ...

    def measurement(self, predicted_mean: np.ndarray) -> np.ndarray: ...


class CompartmentNoise:
    """State-dependent noise of the compartment model."""

    def __init__(self, cfg: Optional[NoiseConfig] = None, obs: Optional[ObservationModel] = None):
        self.cfg = cfg or NoiseConfig()
        self.obs = obs or ObservationModel()
        self._tables = {}

    def _table(self, F: np.ndarray) -> TransitionTable:
        key = F.tobytes()
        table = self._tables.get(key)
        if table is None:
            if len(self._tables) > 64:
                self._tables.clear()
            table = TransitionTable.from_matrix(F)
            self._tables[key] = table
        return table

    def process(self, F: np.ndarray, predicted_mean: np.ndarray) -> np.ndarray:
        return assemble_process_noise(F, predicted_mean, self.cfg, self._table(F))

    def measurement(self, predicted_mean: np.ndarray) -> np.ndarray:
        return measurement_noise(predicted_mean, self.cfg, self.obs)


class ConstantNoise:
    """State-independent noise; turns the filter into the exact linear-Gaussian recursion."""

    def __init__(self, Q: np.ndarray, R: np.ndarray):
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(R, dtype=float))

    def process(self, F: np.ndarray, predicted_mean: np.ndarray) -> np.ndarray:
        return self.Q

    def measurement(self, predicted_mean: np.ndarray) -> np.ndarray:
        return self.R


# ---------------------------------------------------------------------------
# Recursion
# ---------------------------------------------------------------------------

def kalman_predict(mean: np.ndarray, cov: np.ndarray, F: np.ndarray,
                   noise: NoiseModel) -> Tuple[np.ndarray, np.ndarray]:
    predicted = F @ mean
    P = F @ cov @ F.T + noise.process(F, predicted)
    return predicted, 0.5 * (P + P.T)


def kalman_update(mean: np.ndarray, cov: np.ndarray, y: np.ndarray, H_matrix: np.ndarray,
                  R: np.ndarray, day: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, float]:
    """Measurement update; returns the corrected mean and covariance and the log-likelihood increment.

    Raises:
        FilterError: if the innovation covariance is not positive definite
    """
    innovation = y - H_matrix @ mean
    PHt = cov @ H_matrix.T
    S = H_matrix @ PHt + R
    S = 0.5 * (S + S.T)
    try:
        factor = linalg.cho_factor(S, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as e:
        raise FilterError(f"innovation covariance is not positive definite: {e}", day=day) from e

    gain = linalg.cho_solve(factor, PHt.T).T
    updated = mean + gain @ innovation
    # Joseph form
    IKH = np.eye(len(mean)) - gain @ H_matrix
    P = IKH @ cov @ IKH.T + gain @ R @ gain.T
    P = 0.5 * (P + P.T)

    log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
    quadratic = float(innovation @ linalg.cho_solve(factor, innovation))
    increment = -0.5 * (quadratic + log_det + len(y) * LOG_2PI)
    return updated, P, increment


def _step(fs: FilterState, F: np.ndarray, y: Optional[np.ndarray], noise: NoiseModel,
          H_matrix: np.ndarray) -> Tuple[FilterState, np.ndarray, np.ndarray]:
    """One predict/update cycle; also returns the predicted mean and the full innovation covariance."""
    day = fs.k + 1
    predicted, P = kalman_predict(fs.mean, fs.cov, F, noise)
    R_full = noise.measurement(predicted)
    S_full = H_matrix @ P @ H_matrix.T + R_full
    if not np.all(np.isfinite(P)):
        raise FilterError("non-finite predicted covariance", day=day)

    if y is None:
        return FilterState(predicted, P, fs.loglik, day), predicted, S_full
    y = np.asarray(y, dtype=float)
    rows = np.flatnonzero(np.isfinite(y))
    if len(rows) == 0:
        return FilterState(predicted, P, fs.loglik, day), predicted, S_full

    mean, cov, increment = kalman_update(
        predicted, P, y[rows], H_matrix[rows], R_full[np.ix_(rows, rows)], day=day
    )
    return FilterState(mean, cov, fs.loglik + increment, day), predicted, S_full


def filter_step(fs: FilterState, F: np.ndarray, y: Optional[np.ndarray],
                cfg: Optional[NoiseConfig] = None, obs: Optional[ObservationModel] = None,
                noise: Optional[NoiseModel] = None) -> FilterState:
    """Advance the filter one day. Missing components of ``y`` (NaN) are not used."""
    obs = obs or ObservationModel()
    noise = noise or CompartmentNoise(cfg, obs)
    state, _, _ = _step(fs, F, y, noise, obs.H_matrix)
    return state


def _dominant_eigenvector(F_red: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eig(F_red)
    idx = int(np.argmax(np.abs(values)))
    value, vector = values[idx], vectors[:, idx]
    if abs(value.imag) > 1e-12:
        logger.warning(f"Dominant eigenvalue {value:.4g} is complex; using the real part of its eigenvector")
    # Rotate so the largest component is real before dropping the imaginary part
    vector = np.real(vector * np.exp(-1j * np.angle(vector[np.argmax(np.abs(vector))])))
    vector = vector / np.linalg.norm(vector)
    if vector.sum() < 0:
        vector = -vector
    return vector


def init_state(F: np.ndarray, obs: Optional[ObservationModel], y0: np.ndarray,
               cfg: Optional[NoiseConfig] = None) -> FilterState:
    """Initial state from the dominant mode of the non-cumulative dynamics.

    The non-cumulative states are taken proportional to the dominant
    eigenvector, as closely as positivity and the measured values allow.
    Measured cumulative states start at the data, unmeasured ones at zero.
    """
    obs = obs or ObservationModel()
    cfg = cfg or NoiseConfig()
    y0 = np.asarray(y0, dtype=float)
    observed = obs.observed_states
    reduced = list(NONCUMULATIVE)
    mean = np.zeros(N_STATES)

    measured_rows = [r for r, s in enumerate(observed) if s in reduced and np.isfinite(y0[r])]
    measured = [reduced.index(observed[r]) for r in measured_rows]
    free = [i for i in range(len(reduced)) if i not in measured]
    y_red = np.maximum(y0[measured_rows], 0.0)

    x_red = np.zeros(len(reduced))
    if np.any(y_red > 0):
        F_red = F[np.ix_(reduced, reduced)]
        v = _dominant_eigenvector(F_red)
        # Unknowns: the free states (>= 0) and the scale alpha
        n_free = len(free)
        A = np.zeros((len(reduced), n_free + 1))
        b = np.zeros(len(reduced))
        A[:n_free, :n_free] = np.eye(n_free)
        A[:n_free, n_free] = -v[free]
        A[n_free:, n_free] = v[measured]
        b[n_free:] = y_red
        lower = np.r_[np.zeros(n_free), -np.inf]
        upper = np.full(n_free + 1, np.inf)
        solution = lsq_linear(A, b, bounds=(lower, upper), method="bvls")
        x_red[free] = np.maximum(solution.x[:n_free], 0.0)
        x_red[measured] = y_red
    mean[reduced] = x_red

    for r, s in enumerate(observed):
        if s in CUMULATIVE:
            mean[s] = y0[r] if np.isfinite(y0[r]) else 0.0

    cov = np.diag((0.25 * mean) ** 2 + cfg.q_diag)
    return FilterState(mean=mean, cov=cov, loglik=0.0, k=0)


@dataclass
class FilterResult:
    """Whole filtered trajectory. Row 0 holds the initial state."""
    dates: List[date]
    means: np.ndarray
    covs: np.ndarray
    predicted_means: np.ndarray
    innovation_covs: np.ndarray
    loglik: float
    window_index: np.ndarray
    matrices: List[np.ndarray]

    @property
    def final_state(self) -> FilterState:
        return FilterState(self.means[-1].copy(), self.covs[-1].copy(), self.loglik, len(self.dates) - 1)

    def matrix_on(self, day: int) -> np.ndarray:
        return self.matrices[self.window_index[day]]


def window_matrices(static: ParameterVector, dyn: DynamicSchedule) -> List[np.ndarray]:
    """One transition matrix per window (beta from R_t, I -> D share from that window's IFR)."""
    matrices = []
    for r_t, ifr in zip(dyn.r_t_per_window, dyn.ifr_per_window):
        f = derive_fractions(static, ifr)
        matrices.append(build_transition_matrix(static, f, beta_from_r0(static, f, r_t)))
    return matrices


def run_filter(initial: FilterState, matrices: Sequence[np.ndarray], window_index: Sequence[int],
               ys: np.ndarray, noise: NoiseModel, H_matrix: np.ndarray
               ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
    """Fold the recursion over days 1..T-1, where day k uses ``matrices[window_index[k]]``.

    Returns filtered means, covariances, predicted means, innovation
    covariances and the total log-likelihood.
    """
    T = len(ys)
    n, m = len(initial.mean), H_matrix.shape[0]
    means = np.zeros((T, n))
    covs = np.zeros((T, n, n))
    predicted = np.zeros((T, n))
    S = np.full((T, m, m), np.nan)
    means[0], covs[0], predicted[0] = initial.mean, initial.cov, initial.mean
    state = initial
    for k in range(1, T):
        state, predicted[k], S[k] = _step(state, matrices[window_index[k]], ys[k], noise, H_matrix)
        means[k], covs[k] = state.mean, state.cov
    return means, covs, predicted, S, state.loglik


def filter_series(static: ParameterVector, dyn: DynamicSchedule, series: ObservationSeries,
                  cfg: Optional[NoiseConfig] = None, noise: Optional[NoiseModel] = None,
                  obs: Optional[ObservationModel] = None) -> FilterResult:
    """Filter a regional series under a static parameter point and a dynamic schedule."""
    cfg = cfg or NoiseConfig()
    obs = obs or ObservationModel()
    noise = noise or CompartmentNoise(cfg, obs)
    T = len(series)
    if T == 0:
        return FilterResult([], np.zeros((0, N_STATES)), np.zeros((0, N_STATES, N_STATES)),
                            np.zeros((0, N_STATES)), np.zeros((0, 3, 3)), 0.0,
                            np.zeros(0, dtype=int), [])
    matrices = window_matrices(static, dyn)
    window_index = dyn.window_indices(series.dates)
    ys = series.observations()
    initial = init_state(matrices[window_index[0]], obs, ys[0], cfg)
    try:
        means, covs, predicted, S, loglik = run_filter(
            initial, matrices, window_index, ys, noise, obs.H_matrix
        )
    except FilterError as e:
        where = series.dates[e.day] if e.day is not None else "?"
        raise FilterError(f"region {series.region_id} ({where}): {e}", day=e.day) from e
    return FilterResult(list(series.dates), means, covs, predicted, S, loglik, window_index, matrices)


def marginal_loglik(static: ParameterVector, dyn: DynamicSchedule, series: ObservationSeries,
                    cfg: Optional[NoiseConfig] = None, noise: Optional[NoiseModel] = None) -> float:
    """Log of the product of one-step-ahead predictive densities of the data."""
    if len(series) < 2:
        return 0.0
    return filter_series(static, dyn, series, cfg, noise).loglik


@dataclass
class Prediction:
    """Per-day predictive distribution of the measured states."""
    mean: np.ndarray
    cov: np.ndarray
    state_means: np.ndarray
    state_covs: np.ndarray

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diagonal(self.cov, axis1=1, axis2=2), 0.0))


def predict_ahead(fs: FilterState, F_sequence: Union[np.ndarray, Sequence[np.ndarray]], horizon: int,
                  cfg: Optional[NoiseConfig] = None, noise: Optional[NoiseModel] = None,
                  obs: Optional[ObservationModel] = None) -> Prediction:
    """Predict-only recursion for ``horizon`` days; the last matrix repeats if the sequence is short."""
    if horizon < 1:
        raise ModelError(f"Prediction horizon must be at least one day, got {horizon}")
    obs = obs or ObservationModel()
    noise = noise or CompartmentNoise(cfg, obs)
    if isinstance(F_sequence, np.ndarray) and F_sequence.ndim == 2:
        F_sequence = [F_sequence]
    F_sequence = list(F_sequence)

    Hm = obs.H_matrix
    n, m = len(fs.mean), Hm.shape[0]
    means = np.zeros((horizon, m))
    covs = np.zeros((horizon, m, m))
    state_means = np.zeros((horizon, n))
    state_covs = np.zeros((horizon, n, n))
    mean, cov = fs.mean, fs.cov
    for h in range(horizon):
        F = F_sequence[min(h, len(F_sequence) - 1)]
        mean, cov = kalman_predict(mean, cov, F, noise)
        means[h] = Hm @ mean
        covs[h] = Hm @ cov @ Hm.T + noise.measurement(mean)
        state_means[h], state_covs[h] = mean, cov
    return Prediction(means, covs, state_means, state_covs)


def filter_network(statics: Sequence[ParameterVector], dyns: Sequence[DynamicSchedule],
                   series_list: Sequence[ObservationSeries], network: CommuteNetwork,
                   cfg: Optional[NoiseConfig] = None) -> Tuple[float, List[FilterState]]:
    """Filter several regions jointly, exchanging infectious pressure after each predict step.

    Returns the summed log-likelihood and the final state of each region.
    """
    cfg = cfg or NoiseConfig()
    obs = ObservationModel()
    if not (len(statics) == len(dyns) == len(series_list) == network.D.shape[0]):
        raise ModelError("Network size must match the number of regions")
    dates = series_list[0].dates
    if any(s.dates != dates for s in series_list):
        raise ModelError("Coupled regions must cover the same dates")
    if len(dates) == 0:
        return 0.0, []

    noise = CompartmentNoise(cfg, obs)
    matrices = [window_matrices(p, d) for p, d in zip(statics, dyns)]
    indices = [d.window_indices(dates) for d in dyns]
    ys = [s.observations() for s in series_list]
    states = [init_state(matrices[r][indices[r][0]], obs, ys[r][0], cfg) for r in range(len(series_list))]

    for k in range(1, len(dates)):
        phi_prev = np.array([max(s.mean[PHI], 0.0) for s in states])
        predictions = [
            kalman_predict(s.mean, s.cov, matrices[r][indices[r][k]], noise)
            for r, s in enumerate(states)
        ]
        phi_bar = np.array([p[0][PHI] for p in predictions])
        phi_new = network_phi_update(phi_prev, network, phi_bar)
        updated = []
        for r, (predicted, P) in enumerate(predictions):
            predicted = predicted.copy()
            predicted[PHI] = phi_new[r]
            y = ys[r][k]
            rows = np.flatnonzero(np.isfinite(y))
            if len(rows) == 0:
                updated.append(FilterState(predicted, P, states[r].loglik, k))
                continue
            R = noise.measurement(predicted)
            mean, cov, increment = kalman_update(
                predicted, P, y[rows], obs.H_matrix[rows], R[np.ix_(rows, rows)], day=k
            )
            updated.append(FilterState(mean, cov, states[r].loglik + increment, k))
        states = updated
    return float(sum(s.loglik for s in states)), states
