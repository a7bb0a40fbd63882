from typing import Optional


class MonitorError(Exception):
    """Base exception for all monitoring-library errors."""
    pass


class ModelError(MonitorError):
    """Raised when model parameters violate their constraints."""
    pass


class InfeasibleParametersError(ModelError):
    """Raised when a parameter combination implies a negative recovery fraction."""
    pass


class PriorError(MonitorError):
    """Raised when a prior descriptor or prior file is invalid."""
    pass


class DataValidationError(MonitorError):
    """Raised when input data cannot be parsed or is inconsistent."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        parts = [message]
        if path is not None:
            parts.append(f"file: {path}")
        if line is not None:
            parts.append(f"line: {line}")
        super().__init__(" | ".join(parts))
        self.path = path
        self.line = line


class FilterError(MonitorError):
    """Raised when the Kalman recursion breaks down on a given day."""

    def __init__(self, message: str, day: Optional[int] = None):
        super().__init__(message if day is None else f"day {day}: {message}")
        self.day = day


class OptimizationError(MonitorError):
    """Raised when a receding-horizon window cannot be solved."""

    def __init__(self, message: str, window: Optional[int] = None,
                 original_exception: Optional[Exception] = None):
        super().__init__(message if window is None else f"window {window}: {message}")
        self.window = window
        self.original_exception = original_exception


class SamplerError(MonitorError):
    """Raised when chains are unusable (empty, mismatched dimensions or lengths)."""
    pass
