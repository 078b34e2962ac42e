"""
DES engine - deterministic event scheduler and seeded random streams
"""

import hashlib
import heapq
import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import ParameterError, SchedulingError, SimulationError

logger = logging.getLogger(__name__)


class EventKind(str, Enum):
    MESSAGE_ARRIVAL = "MessageArrival"
    SERVICE_COMPLETION = "ServiceCompletion"
    TIMER_FIRE = "TimerFire"
    CONTROL_TICK = "ControlTick"
    WORKLOAD_CHANGE = "WorkloadChange"
    SAMPLE_TICK = "SampleTick"
    CALL_ARRIVAL = "CallArrival"
    HANGUP = "Hangup"
    SESSION_TIMEOUT = "SessionTimeout"
    ROUTE_RELEASE = "RouteRelease"


@dataclass(order=True)
class SimEvent:
    fire_at: float
    sequence: int
    kind: EventKind = field(compare=False)
    action: Callable[["SimEvent"], None] = field(compare=False, repr=False)
    data: Any = field(default=None, compare=False)
    cancelled: bool = field(default=False, compare=False)


class Engine:
    """Single-threaded event loop ordered by (fire_at, sequence)"""

    def __init__(self, trace: bool = False):
        self.clock = 0.0
        self.processed = 0
        self._queue: List[SimEvent] = []
        self._sequence = itertools.count()
        self.trace: Optional[List[Tuple[float, int, str]]] = [] if trace else None

    def schedule(
        self,
        fire_at: float,
        kind: EventKind,
        action: Callable[[SimEvent], None],
        data: Any = None,
    ) -> SimEvent:
        if fire_at < self.clock:
            raise SchedulingError(f"cannot schedule {kind.value} at {fire_at} before clock {self.clock}")
        event = SimEvent(fire_at, next(self._sequence), kind, action, data)
        heapq.heappush(self._queue, event)
        return event

    def schedule_in(self, delay: float, kind: EventKind, action: Callable[[SimEvent], None], data: Any = None) -> SimEvent:
        return self.schedule(self.clock + delay, kind, action, data)

    def cancel(self, event: Optional[SimEvent]) -> None:
        """Lazy removal; only timer disarm uses it"""
        if event is not None:
            event.cancelled = True

    @property
    def pending(self) -> int:
        return sum(1 for event in self._queue if not event.cancelled)

    def run_until(self, t_end: float) -> int:
        """Process every event with fire_at <= t_end, then park the clock at t_end"""
        if t_end < self.clock:
            raise SchedulingError(f"run_until({t_end}) is before clock {self.clock}")

        count = 0
        while self._queue and self._queue[0].fire_at <= t_end:
            event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            self.clock = event.fire_at
            if self.trace is not None:
                self.trace.append((event.fire_at, event.sequence, event.kind.value))
            try:
                event.action(event)
            except SimulationError as exc:
                if exc.at is not None:
                    raise
                raise SimulationError(f"{event.kind.value} handler failed: {exc}", at=event.fire_at) from exc
            except Exception as exc:
                raise SimulationError(f"{event.kind.value} handler failed: {exc}", at=event.fire_at) from exc
            count += 1

        self.clock = t_end
        self.processed += count
        return count


@dataclass(frozen=True)
class Exponential:
    rate: float


@dataclass(frozen=True)
class Deterministic:
    value: float


@dataclass(frozen=True)
class Bernoulli:
    p: float


@dataclass(frozen=True)
class Uniform:
    low: float = 0.0
    high: float = 1.0


Distribution = Union[Exponential, Deterministic, Bernoulli, Uniform]


def derive_seed(seed: int, name: str) -> int:
    """Stable child seed for a named substream"""
    digest = hashlib.sha256(f"{seed}-{name}".encode()).hexdigest()
    return int(digest, 16) % (2 ** 63)


class RandomStreams:
    """Named, independent numpy generators derived from one master seed.

    Each stochastic source draws from its own substream, so adding draws to one
    source (say, a controller's coin flips) leaves arrivals and link loss untouched.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2 ** 64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._streams: Dict[str, np.random.Generator] = {}

    def substream(self, name: str) -> np.random.Generator:
        stream = self._streams.get(name)
        if stream is None:
            stream = np.random.default_rng(derive_seed(self.seed, name))
            self._streams[name] = stream
        return stream

    def draw(self, name: str, dist: Distribution) -> Union[float, bool]:
        stream = self.substream(name)
        if isinstance(dist, Exponential):
            if not dist.rate > 0:
                raise ParameterError(f"exponential rate must be positive, got {dist.rate}")
            return float(stream.exponential(1.0 / dist.rate))
        if isinstance(dist, Deterministic):
            if dist.value < 0:
                raise ParameterError(f"deterministic value must be non-negative, got {dist.value}")
            return dist.value
        if isinstance(dist, Bernoulli):
            if not 0.0 <= dist.p <= 1.0:
                raise ParameterError(f"bernoulli p must lie in [0, 1], got {dist.p}")
            if dist.p == 0.0:
                return False
            if dist.p == 1.0:
                return True
            return bool(stream.random() < dist.p)
        if isinstance(dist, Uniform):
            if dist.high < dist.low:
                raise ParameterError(f"uniform bounds reversed: [{dist.low}, {dist.high}]")
            return float(stream.uniform(dist.low, dist.high))
        raise ParameterError(f"unknown distribution {dist!r}")
