"""
Prior distributions for the static and the per-window dynamic parameters.

A prior file is a JSON document with one descriptor per parameter::

    {"kind": "scaled-beta", "params": [2, 2.6], "lower": 0.14, "upper": 0.19}
"""
from datetime import date
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union
import json
import logging
import math

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator
from scipy import integrate, stats

from .errors import PriorError
from .model import (
    HOSP_MORT,
    LAMBDA0,
    SIR_MORT,
    STATIC_PARAMETERS,
    DynamicSchedule,
    ParameterVector,
)

logger = logging.getLogger(__name__)

DEFAULT_PRIOR_FILE = Path(__file__).parent / "data" / "default_priors.json"
DYNAMIC_PARAMETERS: Tuple[str, ...] = ("R_t", "IFR")

SeedLike = Union[None, int, np.random.SeedSequence, np.random.Generator]


def as_generator(seed: SeedLike) -> np.random.Generator:
    """Accept an integer seed, a SeedSequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class PriorDescriptor(BaseModel):
    """One prior distribution.

    ``square`` marks a parameter defined as the square of a draw from the
    described distribution (R_t from its infectious-pressure counterpart).
    """
    kind: Literal["scaled-beta", "truncated-lognormal", "uniform", "point-mass"]
    params: List[float] = Field(default_factory=list)
    lower: Optional[float] = None
    upper: Optional[float] = None
    square: bool = False

    @model_validator(mode="after")
    def _check(self) -> "PriorDescriptor":
        if self.kind == "point-mass":
            if len(self.params) != 1:
                raise ValueError("point-mass takes exactly one parameter (the value)")
            value = self.params[0]
            if self.lower is None:
                self.lower = value
            if self.upper is None:
                self.upper = value
            return self

        if self.lower is None or self.upper is None:
            raise ValueError(f"{self.kind} needs both lower and upper bounds")
        if not self.lower < self.upper:
            raise ValueError(f"lower ({self.lower}) must be below upper ({self.upper})")
        if self.kind == "scaled-beta":
            if len(self.params) != 2 or min(self.params) <= 0:
                raise ValueError("scaled-beta takes two positive shape parameters")
        elif self.kind == "truncated-lognormal":
            if len(self.params) != 2 or self.params[1] <= 0:
                raise ValueError("truncated-lognormal takes (log mean, positive log sd)")
            if self.lower < 0:
                raise ValueError("truncated-lognormal support must be nonnegative")
        elif self.params:
            raise ValueError("uniform takes no shape parameters")
        if self.square and self.lower < 0:
            raise ValueError("squared parameters need a nonnegative base support")
        return self

    @classmethod
    def point_mass(cls, value: float) -> "PriorDescriptor":
        return cls(kind="point-mass", params=[float(value)])

    @classmethod
    def scaled_beta(cls, a: float, b: float, lower: float, upper: float) -> "PriorDescriptor":
        return cls(kind="scaled-beta", params=[a, b], lower=lower, upper=upper)

    @property
    def is_point_mass(self) -> bool:
        return self.kind == "point-mass"

    @property
    def support(self) -> Tuple[float, float]:
        if self.square:
            return self.lower ** 2, self.upper ** 2
        return self.lower, self.upper

    def _base(self):
        """Frozen scipy distribution of the (unsquared) variable, in log space for lognormals."""
        if self.kind == "scaled-beta":
            a, b = self.params
            return stats.beta(a, b, loc=self.lower, scale=self.upper - self.lower)
        if self.kind == "uniform":
            return stats.uniform(loc=self.lower, scale=self.upper - self.lower)
        if self.kind == "truncated-lognormal":
            mu, sd = self.params
            lo = -np.inf if self.lower == 0 else (math.log(self.lower) - mu) / sd
            hi = (math.log(self.upper) - mu) / sd
            return stats.truncnorm(lo, hi, loc=mu, scale=sd)
        return None

    def _base_logpdf(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "truncated-lognormal":
            out = np.full(x.shape, -np.inf)
            positive = x > 0
            out[positive] = self._base().logpdf(np.log(x[positive])) - np.log(x[positive])
            return out
        return self._base().logpdf(x)

    def sample(self, rng: SeedLike = None, size: Optional[int] = None) -> Union[float, np.ndarray]:
        rng = as_generator(rng)
        if self.is_point_mass:
            value = self.params[0]
            return value if size is None else np.full(size, value)
        draw = self._base().rvs(size=size, random_state=rng)
        if self.kind == "truncated-lognormal":
            draw = np.exp(draw)
        if self.square:
            draw = np.square(draw)
        return float(draw) if size is None else np.asarray(draw, dtype=float)

    def logpdf(self, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        """Log density; ``-inf`` outside the support."""
        scalar = np.ndim(x) == 0
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.is_point_mass:
            out = np.where(x == self.params[0], 0.0, -np.inf)
        else:
            lo, hi = self.support
            out = np.full(x.shape, -np.inf)
            inside = (x >= lo) & (x <= hi)
            with np.errstate(divide="ignore", invalid="ignore"):
                if self.square:
                    root = np.sqrt(x[inside])
                    out[inside] = self._base_logpdf(root) - np.log(2.0 * root)
                else:
                    out[inside] = self._base_logpdf(x[inside])
            out[np.isnan(out)] = -np.inf
        return float(out[0]) if scalar else out

    def mean(self) -> float:
        if self.is_point_mass:
            return self.params[0]
        if self.kind in ("scaled-beta", "uniform") and not self.square:
            return float(self._base().mean())
        lo, hi = self.support
        value, _ = integrate.quad(lambda v: v * math.exp(self.logpdf(v)), lo, hi, limit=200)
        return value

    def std(self) -> float:
        if self.is_point_mass:
            return 0.0
        if self.kind in ("scaled-beta", "uniform") and not self.square:
            return float(self._base().std())
        lo, hi = self.support
        mean = self.mean()
        var, _ = integrate.quad(lambda v: (v - mean) ** 2 * math.exp(self.logpdf(v)), lo, hi, limit=200)
        return math.sqrt(var)


class PriorSet(BaseModel):
    """Priors for every inferred parameter, plus auxiliary priors used to derive others."""
    static: Dict[str, PriorDescriptor]
    dynamic: Dict[str, PriorDescriptor]
    auxiliary: Dict[str, PriorDescriptor] = Field(default_factory=dict)
    window_length_days: int = Field(default=28, ge=1)

    @model_validator(mode="after")
    def _check_names(self) -> "PriorSet":
        missing = set(STATIC_PARAMETERS) - set(self.static)
        extra = set(self.static) - set(STATIC_PARAMETERS)
        if missing or extra:
            raise ValueError(f"static priors mismatch (missing={sorted(missing)}, unknown={sorted(extra)})")
        if set(self.dynamic) != set(DYNAMIC_PARAMETERS):
            raise ValueError(f"dynamic priors must be exactly {DYNAMIC_PARAMETERS}")
        return self

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "PriorSet":
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                document = json.load(f)
        except FileNotFoundError as e:
            raise PriorError(f"Prior file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise PriorError(f"Prior file {path} is not valid JSON: {e}") from e
        try:
            return cls.model_validate(document)
        except ValidationError as e:
            raise PriorError(f"Invalid prior file {path}: {e}") from e

    @classmethod
    def default(cls) -> "PriorSet":
        return cls.from_json(DEFAULT_PRIOR_FILE)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    def with_static(self, name: str, descriptor: PriorDescriptor) -> "PriorSet":
        static = dict(self.static)
        static[name] = descriptor
        return self.model_copy(update={"static": static})

    # Sampler-space layout: the static block, then R_t per window, then IFR per window

    def dimension_names(self, n_windows: int) -> List[str]:
        names = list(STATIC_PARAMETERS)
        for parameter in DYNAMIC_PARAMETERS:
            names.extend(f"{parameter}[{k}]" for k in range(n_windows))
        return names

    def descriptors(self, n_windows: int) -> List[PriorDescriptor]:
        out = [self.static[name] for name in STATIC_PARAMETERS]
        for parameter in DYNAMIC_PARAMETERS:
            out.extend([self.dynamic[parameter]] * n_windows)
        return out

    def bounds(self, n_windows: int) -> Tuple[np.ndarray, np.ndarray]:
        supports = [d.support for d in self.descriptors(n_windows)]
        return np.array([s[0] for s in supports]), np.array([s[1] for s in supports])

    def mean_point(self, n_windows: int) -> np.ndarray:
        return np.array([d.mean() for d in self.descriptors(n_windows)])


def n_windows_of(priors: PriorSet, point: Sequence[float]) -> int:
    extra = len(point) - len(STATIC_PARAMETERS)
    if extra < 0 or extra % len(DYNAMIC_PARAMETERS):
        raise PriorError(f"Point of length {len(point)} does not match the parameter layout")
    return extra // len(DYNAMIC_PARAMETERS)


def pack_point(p: ParameterVector, schedule: DynamicSchedule) -> np.ndarray:
    return np.concatenate([
        p.to_array(),
        np.asarray(schedule.r_t_per_window, dtype=float),
        np.asarray(schedule.ifr_per_window, dtype=float),
    ])


def unpack_point(point: Sequence[float], window_boundaries: Sequence[date]) -> Tuple[ParameterVector, DynamicSchedule]:
    point = np.asarray(point, dtype=float)
    n_static = len(STATIC_PARAMETERS)
    n = len(window_boundaries)
    if len(point) != n_static + 2 * n:
        raise PriorError(f"Point of length {len(point)} does not fit {n} windows")
    p = ParameterVector.from_array(point[:n_static])
    schedule = DynamicSchedule(
        window_boundaries=tuple(window_boundaries),
        r_t_per_window=tuple(float(v) for v in point[n_static:n_static + n]),
        ifr_per_window=tuple(float(v) for v in point[n_static + n:]),
    )
    return p, schedule


def prior_sample(priors: PriorSet, seed: SeedLike, window_boundaries: Sequence[date]) -> Tuple[ParameterVector, DynamicSchedule]:
    """Draw one static parameter vector and one dynamic schedule from the priors."""
    rng = as_generator(seed)
    point = np.array([d.sample(rng) for d in priors.descriptors(len(window_boundaries))])
    return unpack_point(point, window_boundaries)


def prior_logpdf(priors: PriorSet, point: Sequence[float]) -> float:
    """Joint log prior density of a sampler-space point; ``-inf`` outside the support."""
    point = np.asarray(point, dtype=float)
    descriptors = priors.descriptors(n_windows_of(priors, point))
    total = 0.0
    for descriptor, value in zip(descriptors, point):
        lp = descriptor.logpdf(value)
        if lp == -np.inf:
            return -np.inf
        total += lp
    return total


def prior_mean_parameters(priors: PriorSet) -> ParameterVector:
    return ParameterVector(**{name: priors.static[name].mean() for name in STATIC_PARAMETERS})


def fit_scaled_beta(samples: np.ndarray, pad: float = 0.01) -> PriorDescriptor:
    """Method-of-moments scaled-beta fit on the sample range padded by ``pad``."""
    samples = np.asarray(samples, dtype=float)
    lo, hi = float(samples.min()), float(samples.max())
    spread = hi - lo
    if spread <= 1e-12 * max(1.0, abs(hi)):
        return PriorDescriptor.point_mass(float(samples.mean()))

    lower = max(0.0, lo - pad * spread)
    upper = hi + pad * spread
    width = upper - lower
    m = (samples.mean() - lower) / width
    v = samples.var() / width ** 2
    common = m * (1.0 - m) / v - 1.0
    if common <= 0:
        raise PriorError("Sample variance too large for a scaled-beta moment fit")
    return PriorDescriptor.scaled_beta(m * common, (1.0 - m) * common, lower, upper)


def derive_hosp_prior(n_samples: int = 100_000, seed: SeedLike = None,
                      priors: Optional[PriorSet] = None) -> PriorDescriptor:
    """Prior for HOSP implied by the IFR, E2I, IC_HOSP and I:HW priors.

    Assumes the death risk in I scales with the hospital risks by the factor I_HW
    and solves the resulting IFR balance for HOSP, sample by sample.
    """
    priors = priors or PriorSet.default()
    if "I_HW" not in priors.auxiliary:
        raise PriorError("Deriving the HOSP prior requires an auxiliary I_HW prior")
    rng = as_generator(seed)
    ifr_prior = priors.dynamic["IFR"]
    e2i_prior = priors.static["E2I"]
    ic_prior = priors.static["IC_HOSP"]
    ihw_prior = priors.auxiliary["I_HW"]

    collected: List[np.ndarray] = []
    remaining = n_samples
    for _ in range(100):
        ifr = ifr_prior.sample(rng, remaining)
        e2i = e2i_prior.sample(rng, remaining)
        ic = ic_prior.sample(rng, remaining)
        ihw = ihw_prior.sample(rng, remaining)

        x = ic * (1.0 - SIR_MORT)
        denominator = (1.0 + ihw) * (HOSP_MORT + ic) * SIR_MORT * e2i
        valid = (denominator > 0) & (e2i > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            hosp = ifr * (1.0 - x) / denominator
        valid &= np.isfinite(hosp)
        collected.append(hosp[valid])
        remaining -= int(valid.sum())
        if remaining <= 0:
            break
    else:
        raise PriorError("Could not draw enough valid HOSP samples")

    samples = np.concatenate(collected)[:n_samples]
    descriptor = fit_scaled_beta(samples)
    logger.info(f"Derived HOSP prior from {len(samples)} samples: {descriptor.model_dump()}")
    return descriptor


def sample_lambda(priors: PriorSet, seed: SeedLike = None) -> float:
    """Draw the commuting intensity from its auxiliary prior (the default when none is given)."""
    descriptor = priors.auxiliary.get("lambda")
    if descriptor is None:
        return LAMBDA0
    return float(descriptor.sample(as_generator(seed)))
