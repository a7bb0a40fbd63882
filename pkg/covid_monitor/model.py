"""
Compartment model for the hospital-load monitor.

State ordering is [I, A, E, phi, H, W, D, R]:
symptomatic, asymptomatic, exposed, infectious pressure, hospital care,
intensive care, dead (cumulative) and recovered (cumulative).
"""
from dataclasses import dataclass, field, fields, replace
from datetime import date, timedelta
from typing import Dict, List, Sequence, Tuple
import logging
import math

import numpy as np
import pandas as pd

from .errors import InfeasibleParametersError, ModelError

logger = logging.getLogger(__name__)

STATES: Tuple[str, ...] = ("I", "A", "E", "phi", "H", "W", "D", "R")
I, A, E, PHI, H, W, D, R = range(8)
N_STATES = len(STATES)

# Indices of the non-cumulative states and of the measured states (H, W, D)
NONCUMULATIVE: Tuple[int, ...] = (I, A, E, PHI, H, W)
CUMULATIVE: Tuple[int, ...] = (D, R)
OBSERVED: Tuple[int, ...] = (H, W, D)

HOSP_MORT = 0.1322
SIR_MORT = 0.2129
LAMBDA0 = 8.0 / 24.0 * 5.0 / 7.0

STATIC_PARAMETERS: Tuple[str, ...] = (
    "sigma",
    "gamma_I",
    "gamma_H",
    "gamma_W",
    "E2I",
    "HOSP",
    "IC_HOSP",
    "theta_E_star",
    "theta_A_star",
    "tau_half",
)

_RATES = ("sigma", "gamma_I", "gamma_H", "gamma_W", "tau_half")
_FRACTIONS = ("E2I", "A2I", "HOSP", "IC_HOSP", "HOSP_MORT", "SIR_MORT")


@dataclass(frozen=True)
class ParameterVector:
    """The static model parameters; one point of the sampler's static block."""
    sigma: float
    gamma_I: float
    gamma_H: float
    gamma_W: float
    E2I: float
    HOSP: float
    IC_HOSP: float
    theta_E_star: float
    theta_A_star: float
    tau_half: float
    A2I: float = 0.0
    HOSP_MORT: float = HOSP_MORT
    SIR_MORT: float = SIR_MORT

    def __post_init__(self):
        for name in _RATES:
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ModelError(f"{name} must be strictly positive, got {value}")
        for name in _FRACTIONS:
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ModelError(f"{name} must lie in [0, 1], got {value}")
        for name in ("theta_E_star", "theta_A_star"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ModelError(f"{name} must be nonnegative, got {value}")

    @property
    def gamma_A(self) -> float:
        # Tied to the symptomatic infectious period
        return self.gamma_I

    @property
    def rho(self) -> float:
        return math.log(2.0) / self.tau_half

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in STATIC_PARAMETERS], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float], **fixed) -> "ParameterVector":
        if len(values) != len(STATIC_PARAMETERS):
            raise ModelError(
                f"Expected {len(STATIC_PARAMETERS)} static values, got {len(values)}"
            )
        kwargs = {name: float(v) for name, v in zip(STATIC_PARAMETERS, values)}
        kwargs.update(fixed)
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_values(self, **changes) -> "ParameterVector":
        return replace(self, **changes)


@dataclass(frozen=True)
class FractionSet:
    """Fates of individuals leaving a compartment with more than one exit."""
    F0: float
    F1: float
    F2: float
    F2d: float
    F3: float
    F3d: float
    F4: float

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (0.0 <= value <= 1.0):
                raise InfeasibleParametersError(f"{f.name} must lie in [0, 1], got {value}")
        if self.F2 + self.F2d > 1.0 + 1e-12:
            raise InfeasibleParametersError(
                f"Recovery fraction from I is negative (F2={self.F2}, F2d={self.F2d})"
            )
        if self.F3 + self.F3d > 1.0 + 1e-12:
            raise InfeasibleParametersError(
                f"Recovery fraction from H is negative (F3={self.F3}, F3d={self.F3d})"
            )


@dataclass(frozen=True)
class DynamicSchedule:
    """Piecewise-constant R_t and IFR over consecutive windows.

    ``window_boundaries`` holds the first day of every window; the last
    window runs until the end of the analysis period.
    """
    window_boundaries: Tuple[date, ...]
    r_t_per_window: Tuple[float, ...]
    ifr_per_window: Tuple[float, ...]

    def __post_init__(self):
        n = len(self.window_boundaries)
        if n == 0:
            raise ModelError("A schedule needs at least one window")
        if len(self.r_t_per_window) != n or len(self.ifr_per_window) != n:
            raise ModelError(
                f"Schedule has {n} windows but {len(self.r_t_per_window)} R_t "
                f"and {len(self.ifr_per_window)} IFR values"
            )
        for earlier, later in zip(self.window_boundaries[:-1], self.window_boundaries[1:]):
            if later <= earlier:
                raise ModelError("Window boundaries must be strictly increasing")
        if any(r < 0 for r in self.r_t_per_window):
            raise ModelError("R_t must be nonnegative")
        if any(not (0.0 <= v <= 1.0) for v in self.ifr_per_window):
            raise ModelError("IFR must lie in [0, 1]")

    @property
    def n_windows(self) -> int:
        return len(self.window_boundaries)

    def window_index(self, day: date) -> int:
        """Index of the window containing ``day``."""
        if day < self.window_boundaries[0]:
            raise ModelError(f"{day} precedes the first window ({self.window_boundaries[0]})")
        position = int(np.searchsorted(
            np.array(self.window_boundaries, dtype="datetime64[D]"),
            np.datetime64(day, "D"),
            side="right",
        ))
        return position - 1

    def window_indices(self, dates: Sequence[date]) -> np.ndarray:
        return np.array([self.window_index(d) for d in dates], dtype=int)

    def per_day(self, dates: Sequence[date]) -> Tuple[np.ndarray, np.ndarray]:
        """Daily (R_t, IFR) values over ``dates``."""
        idx = self.window_indices(dates)
        return np.asarray(self.r_t_per_window)[idx], np.asarray(self.ifr_per_window)[idx]


@dataclass
class CommuteNetwork:
    """Commuting connections between regions.

    ``D[i, j]`` is the proportion commuting into region ``i`` from region ``j``.
    """
    D: np.ndarray
    lam: float = LAMBDA0
    regions: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.D = np.asarray(self.D, dtype=float)
        if self.D.ndim != 2 or self.D.shape[0] != self.D.shape[1]:
            raise ModelError(f"Connection matrix must be square, got shape {self.D.shape}")
        if np.any(self.D < 0):
            raise ModelError("Connection matrix entries must be nonnegative")
        if np.any(np.diag(self.D) != 0):
            raise ModelError("Connection matrix must have a zero diagonal")
        if self.lam < 0:
            raise ModelError("Commuting intensity must be nonnegative")

    @property
    def d(self) -> np.ndarray:
        return self.D.sum(axis=0)

    @classmethod
    def from_csv(cls, path: str, lam: float = LAMBDA0) -> "CommuteNetwork":
        """Load a square matrix whose header and index are region names."""
        frame = pd.read_csv(path, index_col=0)
        if list(frame.index.astype(str)) != list(frame.columns.astype(str)):
            raise ModelError(f"Row and column regions differ in {path}")
        return cls(D=frame.to_numpy(dtype=float), lam=lam, regions=[str(r) for r in frame.index])


def make_windows(start: date, end: date, length: int = 28) -> Tuple[date, ...]:
    """First days of consecutive ``length``-day windows covering [start, end]."""
    if end < start:
        raise ModelError(f"Analysis period ends ({end}) before it starts ({start})")
    if length < 1:
        raise ModelError("Window length must be at least one day")
    n_days = (end - start).days + 1
    return tuple(start + timedelta(days=k) for k in range(0, n_days, length))


def derive_fractions(p: ParameterVector, ifr: float) -> FractionSet:
    """Fractions of every compartment's exits, with the I -> D share closing the IFR."""
    if not (0.0 <= ifr <= 1.0):
        raise ModelError(f"IFR must lie in [0, 1], got {ifr}")

    x = p.IC_HOSP * (1.0 - p.SIR_MORT)
    hospital_share = (p.HOSP_MORT + p.IC_HOSP) * p.SIR_MORT * p.HOSP / (1.0 - x)
    f2d = max(0.0, ifr / p.E2I - hospital_share) if p.E2I > 0 else 0.0

    if 1.0 - p.HOSP - f2d < 0:
        raise InfeasibleParametersError(
            f"IFR={ifr} with E2I={p.E2I} and HOSP={p.HOSP} leaves a negative recovery fraction from I"
        )

    return FractionSet(
        F0=p.E2I,
        F1=p.A2I,
        F2=p.HOSP,
        F2d=f2d,
        F3=p.IC_HOSP,
        F3d=p.SIR_MORT * p.HOSP_MORT,
        F4=p.SIR_MORT,
    )


def build_transition_matrix(p: ParameterVector, f: FractionSet, beta: float) -> np.ndarray:
    """Daily update matrix ``F`` with ``x_{k+1} = F x_k``; column = source, row = destination."""
    decay = math.exp(-p.rho)
    shed = 1.0 - decay
    F = np.zeros((N_STATES, N_STATES))

    F[I, I] = 1.0 - p.gamma_I
    F[I, A] = p.gamma_A * f.F1
    F[I, E] = p.sigma * f.F0

    F[A, A] = 1.0 - p.gamma_A
    F[A, E] = p.sigma * (1.0 - f.F0)

    F[E, E] = 1.0 - p.sigma
    F[E, PHI] = beta

    F[PHI, I] = shed
    F[PHI, A] = p.theta_A_star * shed
    F[PHI, E] = p.theta_E_star * shed
    F[PHI, PHI] = decay

    F[H, I] = p.gamma_I * f.F2
    F[H, H] = 1.0 - p.gamma_H
    F[H, W] = p.gamma_W * (1.0 - f.F4)

    F[W, H] = p.gamma_H * f.F3
    F[W, W] = 1.0 - p.gamma_W

    F[D, I] = p.gamma_I * f.F2d
    F[D, H] = p.gamma_H * f.F3d
    F[D, W] = p.gamma_W * f.F4
    F[D, D] = 1.0

    F[R, I] = p.gamma_I * (1.0 - f.F2 - f.F2d)
    F[R, A] = p.gamma_A * (1.0 - f.F1)
    F[R, H] = p.gamma_H * (1.0 - f.F3 - f.F3d)
    F[R, R] = 1.0
    return F


def with_beta(F: np.ndarray, beta: float) -> np.ndarray:
    """Copy of ``F`` with the transmission entry replaced."""
    out = F.copy()
    out[E, PHI] = beta
    return out


def _r0_factor(p: ParameterVector, f: FractionSet) -> float:
    return (
        p.theta_E_star / p.sigma
        + (1.0 - f.F0) * p.theta_A_star / p.gamma_A
        + (f.F0 + (1.0 - f.F0) * f.F1) / p.gamma_I
    )


def r0_from_beta(p: ParameterVector, f: FractionSet, beta: float) -> float:
    """Basic reproduction number implied by the transmission rate ``beta``."""
    return beta * _r0_factor(p, f)


def beta_from_r0(p: ParameterVector, f: FractionSet, r0: float) -> float:
    """Inverse of :func:`r0_from_beta`."""
    return r0 / _r0_factor(p, f)


def r0_phi(r0: float) -> float:
    """Reproduction number counted from infectious pressure to infectious pressure."""
    if r0 < 0:
        raise ModelError(f"Reproduction number must be nonnegative, got {r0}")
    return math.sqrt(r0)


def _hospital_fate(f: FractionSet) -> float:
    loop = f.F3 * (1.0 - f.F4)
    if loop >= 1.0:
        raise ModelError("Degenerate H <-> W loop: F3 * (1 - F4) >= 1")
    return (f.F3d + f.F3 * f.F4) / (1.0 - loop)


def cfr(f: FractionSet, compartment: str) -> float:
    """Probability of eventually dying given an individual enters ``compartment``.

    Solves the absorbing-chain fate system
    p_W = F4 + (1 - F4) p_H, p_H = F3d + F3 p_W and p_I = F2d + F2 p_H.
    """
    p_h = _hospital_fate(f)
    if compartment == "H":
        return p_h
    if compartment == "W":
        return f.F4 + (1.0 - f.F4) * p_h
    if compartment == "I":
        return f.F2d + f.F2 * p_h
    raise ModelError(f"CFR is defined for I, H and W, got {compartment!r}")


def marginal_mortality(p: ParameterVector, f: FractionSet) -> Dict[str, float]:
    """Split the death risk of a symptomatic case by the compartment it dies in."""
    x = f.F3 * (1.0 - f.F4)
    if x >= 1.0:
        raise ModelError("Degenerate H <-> W loop: F3 * (1 - F4) >= 1")
    return {
        "I_MORT": f.F2d,
        "H_MORT": f.F2 * f.F3d / (1.0 - x),
        "W_MORT": f.F2 * f.F3 * f.F4 / (1.0 - x),
    }


def network_phi_update(phi: np.ndarray, net: CommuteNetwork, phi_bar: np.ndarray) -> np.ndarray:
    """Add the commuting exchange of infectious pressure to the uncoupled update ``phi_bar``."""
    phi = np.asarray(phi, dtype=float)
    phi_bar = np.asarray(phi_bar, dtype=float)
    if np.any(phi < 0):
        raise ModelError("Infectious pressure must be nonnegative")
    return phi_bar + net.lam * (net.D @ phi - net.d * phi)
