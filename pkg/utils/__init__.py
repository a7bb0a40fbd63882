"""Run logging for the monitor."""
from .logger import MonitorLogger

__all__ = ["MonitorLogger"]
