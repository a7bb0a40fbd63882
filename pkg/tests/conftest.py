import sys
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from covid_monitor.bootstrap import simulate_scenario
from covid_monitor.data_pipeline import ObservationSeries
from covid_monitor.model import DynamicSchedule, derive_fractions, make_windows
from covid_monitor.priors import PriorSet, prior_mean_parameters

START = date(2020, 3, 10)
SYNTHETIC_DAYS = 84
SYNTHETIC_R_T = (1.6, 0.9, 0.8)
SYNTHETIC_IFR = 0.007
SYNTHETIC_INIT = [200.0, 200.0, 400.0, 300.0, 30.0, 5.0, 0.0, 0.0]


@pytest.fixture(scope="session")
def priors() -> PriorSet:
    return PriorSet.default()


@pytest.fixture(scope="session")
def mean_params(priors):
    return prior_mean_parameters(priors)


@pytest.fixture
def fractions(mean_params):
    return derive_fractions(mean_params, SYNTHETIC_IFR)


def schedule_for(days: int, r_t=SYNTHETIC_R_T, ifr: float = SYNTHETIC_IFR, start: date = START) -> DynamicSchedule:
    windows = make_windows(start, start + timedelta(days=days - 1))
    r_t = tuple(r_t[k] if k < len(r_t) else r_t[-1] for k in range(len(windows)))
    return DynamicSchedule(windows, r_t, (ifr,) * len(windows))


@pytest.fixture
def schedule() -> DynamicSchedule:
    return schedule_for(SYNTHETIC_DAYS)


@pytest.fixture(scope="session")
def synthetic(mean_params):
    """84 days of a simulated region with known parameters."""
    return simulate_scenario(mean_params, schedule_for(SYNTHETIC_DAYS), SYNTHETIC_DAYS, SYNTHETIC_INIT,
                             seed=1, region_id="uppsala", population=400_000)


def constant_series(days: int, H: float = 10.0, W: float = 2.0, D0: float = 0.0, daily_deaths: float = 1.0,
                    region_id: str = "test", start: date = START, population: int = 100_000) -> ObservationSeries:
    return ObservationSeries.from_arrays(
        region_id, start,
        np.full(days, H), np.full(days, W), D0 + daily_deaths * np.arange(days),
        population=population,
    )


def write_region_csv(path: Path, series_list) -> Path:
    import pandas as pd
    frame = pd.concat([s.to_frame().drop(columns="provenance") for s in series_list], ignore_index=True)
    frame.to_csv(path, index=False)
    return path
