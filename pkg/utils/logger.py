import logging
from pathlib import Path
from typing import Optional, Dict, Any, Union
from datetime import datetime


class MonitorLogger:
    """Run logger for the monitoring pipeline with file and console output."""

    def __init__(self, log_level: str = "INFO", log_dir: Optional[Union[str, Path]] = "logs",
                 log_file: Optional[Union[str, Path]] = None):
        """Console output always; a log file unless both ``log_dir`` and ``log_file`` are None."""
        # Library modules log under "covid_monitor.*" and "stages.*"; attach to the root
        # so their records reach the same handlers.
        self.logger = logging.getLogger()
        self.logger.setLevel(log_level.upper())

        handlers = []
        if log_file is None and log_dir is not None:
            log_dir = Path(log_dir)
            log_dir.mkdir(parents=True, exist_ok=True)
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            log_file = log_dir / f"monitor_{timestamp}.log"

        if log_file is not None:
            file_handler = logging.FileHandler(log_file)
            file_handler.setFormatter(logging.Formatter(
                '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
                datefmt='%Y-%m-%d %H:%M:%S'
            ))
            handlers.append(file_handler)

        console_handler = logging.StreamHandler()
        console_handler.setFormatter(logging.Formatter(
            '%(asctime)s - %(levelname)s - %(message)s',
            datefmt='%H:%M:%S'
        ))

        # Replace handlers from an earlier run in the same process
        for handler in [h for h in self.logger.handlers if getattr(h, "_monitor", False)]:
            self.logger.removeHandler(handler)
            handler.close()
        handlers.append(console_handler)
        for handler in handlers:
            handler._monitor = True
            self.logger.addHandler(handler)

        self.log_file = Path(log_file) if log_file is not None else None

    def info(self, message: str, extra: Optional[Dict[str, Any]] = None):
        self.logger.info(message, extra=extra)

    def debug(self, message: str, extra: Optional[Dict[str, Any]] = None):
        self.logger.debug(message, extra=extra)

    def warning(self, message: str, extra: Optional[Dict[str, Any]] = None):
        self.logger.warning(message, extra=extra)

    def error(self, message: str, extra: Optional[Dict[str, Any]] = None):
        """Log an error message with the active traceback."""
        self.logger.error(message, extra=extra, exc_info=True)

    def log_metric(self, name: str, value: Any, region: Optional[str] = None):
        """Log a numeric result (acceptance rate, Gelman-Rubin, objective...)."""
        self.logger.info(f"METRIC: {name} = {value} (region: {region if region is not None else 'N/A'})")

    def log_phase_start(self, phase_name: str, metadata: Optional[Dict[str, Any]] = None):
        self.logger.info(f"PHASE_START: {phase_name}", extra={"metadata": metadata or {}})

    def log_phase_end(self, phase_name: str, status: str, metadata: Optional[Dict[str, Any]] = None):
        self.logger.info(f"PHASE_END: {phase_name} - {status}", extra={"metadata": metadata or {}})

    def log_region_event(self, region: str, event: str, metadata: Optional[Dict[str, Any]] = None):
        self.logger.info(f"REGION:{region} - {event}", extra={"metadata": metadata or {}})

    def close(self):
        for handler in [h for h in self.logger.handlers if getattr(h, "_monitor", False)]:
            self.logger.removeHandler(handler)
            handler.close()
