"""
Hospital-load monitoring: a compartment model of hospital care, intensive
care and deaths, fitted by Adaptive Metropolis on a Kalman filter likelihood.
"""
from .errors import (
    DataValidationError,
    FilterError,
    InfeasibleParametersError,
    ModelError,
    MonitorError,
    OptimizationError,
    PriorError,
    SamplerError,
)

__version__ = "1.0.0"

__all__ = [
    "DataValidationError",
    "FilterError",
    "InfeasibleParametersError",
    "ModelError",
    "MonitorError",
    "OptimizationError",
    "PriorError",
    "SamplerError",
    "__version__",
]
