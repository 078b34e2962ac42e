"""
Workload - call arrival processes and server capacity schedules
"""

import logging
from typing import Iterable, Iterator, List, Optional, Tuple

from .config import Slowdown, WorkloadConfig
from .engine import Deterministic, Exponential, RandomStreams
from .errors import ParameterError

logger = logging.getLogger(__name__)

# segments of (start, end, rate) plus the arrival process and slowdown schedule
WorkloadProfile = WorkloadConfig

ARRIVALS_STREAM = "arrivals"


def generate_calls(profile: WorkloadProfile, streams: RandomStreams, substream: str = ARRIVALS_STREAM) -> Iterator[float]:
    """Lazily yield call arrival instants, segment by segment.

    Poisson segments draw exponential gaps at the segment rate; deterministic
    segments place arrivals at ``start + k / rate``.
    """
    for segment in profile.segments:
        if segment.rate < 0:
            raise ParameterError(f"arrival rate must be non-negative, got {segment.rate}")
        if segment.rate == 0:
            continue
        if profile.process == "deterministic":
            k = 0
            while True:
                t = segment.start + k / segment.rate
                if t >= segment.end:
                    break
                yield t
                k += 1
        else:
            t = segment.start
            gap = Exponential(segment.rate)
            while True:
                t += streams.draw(substream, gap)
                if t >= segment.end:
                    break
                yield t


def rate_at(profile: WorkloadProfile, t: float) -> float:
    for segment in profile.segments:
        if segment.start <= t < segment.end:
            return segment.rate
    return 0.0


def change_points(profile: WorkloadProfile) -> List[Tuple[float, str]]:
    """Instants at which offered load or some capacity changes, for the event trace"""
    points = []
    for segment in profile.segments:
        points.append((segment.start, f"rate {segment.rate!r}/s"))
    for slowdown in profile.slowdown:
        points.append((slowdown.start, f"{slowdown.node} x{slowdown.multiplier!r}"))
        points.append((slowdown.end, f"{slowdown.node} restored"))
    return sorted(points)


class CapacityProfile:
    """Piecewise-constant service rate: a base rate scaled by every active slowdown"""

    def __init__(self, base: Optional[float], slowdowns: Iterable[Slowdown] = ()):
        if base is not None and not base > 0:
            raise ParameterError(f"service rate must be positive, got {base}")
        self.base = base
        self.slowdowns = sorted(slowdowns, key=lambda s: s.start)
        for slowdown in self.slowdowns:
            if not slowdown.multiplier > 0:
                raise ParameterError(f"slowdown multiplier must be positive, got {slowdown.multiplier}")

    @property
    def unlimited(self) -> bool:
        return self.base is None

    def mu_at(self, t: float) -> float:
        if self.base is None:
            return float("inf")
        mu = self.base
        for slowdown in self.slowdowns:
            if slowdown.start <= t < slowdown.end:
                mu *= slowdown.multiplier
        return mu

    def service_distribution(self, t: float, kind: str):
        mu = self.mu_at(t)
        if kind == "deterministic":
            return Deterministic(1.0 / mu)
        return Exponential(mu)


def slowdowns_for(profile: WorkloadProfile, node: str, cluster_member: bool = False) -> List[Slowdown]:
    return [
        slowdown
        for slowdown in profile.slowdown
        if slowdown.node == node or (cluster_member and slowdown.node == "cluster")
    ]
