"""
Errors - exception hierarchy shared by the simulator modules
"""

from typing import Optional


class SimulationError(Exception):
    """Base class for everything the simulator raises on purpose"""

    def __init__(self, message: str, at: Optional[float] = None):
        self.at = at
        if at is not None:
            message = f"{message} (t={at:.6f})"
        super().__init__(message)


class ParameterError(SimulationError, ValueError):
    """A numeric parameter is outside its valid range"""


class SchedulingError(SimulationError):
    """An event was scheduled before the current clock"""


class ConsistencyError(SimulationError):
    """Internal bookkeeping went out of sync"""


class ClassificationError(SimulationError):
    """An original message was passed where a retransmission is required"""


class ConfigError(SimulationError):
    """Scenario document could not be turned into a valid configuration"""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class WorkloadMismatchError(ConfigError):
    """Configurations of one comparison do not share the same workload"""
