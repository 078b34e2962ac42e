"""
Fluid model - continuous queue dynamics of the two-proxy tandem

Server 1 is the upstream proxy, server 2 the downstream one. Queue sizes obey

    q2' = λ2 + r2 + ν2 − µ2
    q1' = λ1 + r1 + r′2 + ν1 − µ1

reflected at zero and integrated with fixed-step RK4. ``TandemInputs`` derives the
rates from the scenario itself: both servers are FIFO, so what leaves a server at t
has the class mix of what arrived one sojourn earlier, and the retransmissions
server 1 generates (r′2) are delayed copies of the Invites it forwarded whose
round trip outlasted each timer offset. Every other timer of the chain is
followed the same way, together with the answers its copies draw.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Protocol, Sequence, Tuple

import numpy as np

from .config import ScenarioConfig
from .errors import ConfigError, ParameterError
from .metrics import write_csv
from .sip import TimerKind, retransmission_schedule
from .workload import CapacityProfile, rate_at, slowdowns_for

logger = logging.getLogger(__name__)

RATE_FIELDS = ("lambda1", "lambda2", "r1", "r2", "r2_prime", "nu1", "nu2", "mu1", "mu2")
TRAJECTORY_COLUMNS = ("t", "q1", "q2", "r2_prime")


@dataclass(frozen=True)
class FluidState:
    q1: float = 0.0
    q2: float = 0.0
    lambda1: float = 0.0
    lambda2: float = 0.0
    r1: float = 0.0
    r2: float = 0.0
    r2_prime: float = 0.0
    nu1: float = 0.0
    nu2: float = 0.0
    mu1: float = 0.0
    mu2: float = 0.0


def derivatives(state: FluidState, t: float = 0.0) -> Tuple[float, float]:
    """(q1', q2'); a queue sitting at zero cannot drain further"""
    for name in RATE_FIELDS:
        value = getattr(state, name)
        if value < 0:
            raise ParameterError(f"{name} must be non-negative, got {value} at t={t}")
    dq2 = state.lambda2 + state.r2 + state.nu2 - state.mu2
    dq1 = state.lambda1 + state.r1 + state.r2_prime + state.nu1 - state.mu1
    if state.q2 <= 0:
        dq2 = max(0.0, dq2)
    if state.q1 <= 0:
        dq1 = max(0.0, dq1)
    return dq1, dq2


def retransmission_rate_fluid(
    t: float,
    guarded: Callable[[float], float],
    round_trip: Callable[[float], float],
    offsets: Sequence[float],
) -> float:
    """Rate of timer copies at ``t``.

    ``guarded(s)`` is the rate at which guarded originals left at time ``s`` and
    ``round_trip(s)`` how long those originals waited for their answer. Every offset
    that the round trip outlasts contributes one delayed copy of the flow. Instants
    before the start of history contribute nothing.
    """
    rate = 0.0
    for offset in offsets:
        sent_at = t - offset
        if sent_at < 0:
            continue
        if round_trip(sent_at) > offset:
            rate += guarded(sent_at)
    return rate


class FluidInputs(Protocol):
    def commit(self, t: float, q1: float, q2: float) -> None:
        """Called once per grid point before the step from ``t`` is taken"""

    def evaluate(self, t: float, q1: float, q2: float) -> FluidState:
        ...


@dataclass
class ExogenousInputs:
    """Constant rates, mostly for checking the integrator"""

    lambda1: float = 0.0
    lambda2: float = 0.0
    r1: float = 0.0
    r2: float = 0.0
    r2_prime: float = 0.0
    nu1: float = 0.0
    nu2: float = 0.0
    mu1: float = 0.0
    mu2: float = 0.0

    def commit(self, t: float, q1: float, q2: float) -> None:
        pass

    def evaluate(self, t: float, q1: float, q2: float) -> FluidState:
        return FluidState(q1, q2, *(getattr(self, name) for name in RATE_FIELDS))


@dataclass
class FluidTrajectory:
    t: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    r2_prime: np.ndarray

    def at(self, t: float, column: str = "q2") -> float:
        return float(np.interp(t, self.t, getattr(self, column)))

    def resample(self, interval: float) -> "FluidTrajectory":
        if not interval > 0:
            raise ParameterError(f"sample interval must be positive, got {interval}")
        count = int(np.floor(self.t[-1] / interval + 1e-9))
        grid = np.arange(count + 1) * interval
        return FluidTrajectory(
            grid,
            np.interp(grid, self.t, self.q1),
            np.interp(grid, self.t, self.q2),
            np.interp(grid, self.t, self.r2_prime),
        )

    def rows(self):
        for values in zip(self.t, self.q1, self.q2, self.r2_prime):
            yield tuple(float(v) for v in values)

    def write(self, path: str) -> str:
        return write_csv(path, TRAJECTORY_COLUMNS, self.rows())


def integrate(state0: FluidState, inputs: FluidInputs, dt: float, t_end: float, t1: float = 0.5) -> FluidTrajectory:
    """Fixed-step RK4 from ``state0``, one trajectory point per step.

    The step must resolve the retransmission delays, so ``dt`` may not exceed T1/10.
    """
    if not dt > 0:
        raise ParameterError(f"fluid step must be positive, got {dt}")
    if dt > t1 / 10 + 1e-12:
        raise ParameterError(f"fluid step {dt} exceeds T1/10 = {t1 / 10}")
    if t_end < 0:
        raise ParameterError(f"t_end must be non-negative, got {t_end}")

    steps = int(np.ceil(t_end / dt - 1e-9))
    times = np.arange(steps + 1) * dt
    q1 = np.zeros(steps + 1)
    q2 = np.zeros(steps + 1)
    r2_prime = np.zeros(steps + 1)

    def slope(t: float, q: np.ndarray) -> np.ndarray:
        state = inputs.evaluate(t, max(q[0], 0.0), max(q[1], 0.0))
        return np.array(derivatives(state, t))

    q = np.array([max(state0.q1, 0.0), max(state0.q2, 0.0)])
    for k, t in enumerate(times):
        inputs.commit(t, q[0], q[1])
        q1[k], q2[k] = q
        r2_prime[k] = inputs.evaluate(t, q[0], q[1]).r2_prime
        if k == steps:
            break
        k1 = slope(t, q)
        k2 = slope(t + dt / 2, q + dt / 2 * k1)
        k3 = slope(t + dt / 2, q + dt / 2 * k2)
        k4 = slope(t + dt, q + dt * k3)
        q = np.maximum(q + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4), 0.0)

    return FluidTrajectory(times, q1, q2, r2_prime)


# message classes tracked through the tandem
(
    INVITE, ACK, BYE, COPY, UAC_COPY, TRYING, RINGING, OK, OK_BYE,
    ACK_COPY, BYE_COPY, P2_COPY, OK_COPY, TRYING_DUP, RINGING_DUP, OK_BYE_DUP,
) = range(16)
_CLASSES = 16
_REQUESTS = (INVITE, ACK, ACK_COPY, BYE)
_RESPONSES = (TRYING, TRYING_DUP, RINGING, RINGING_DUP, OK, OK_COPY, OK_BYE, OK_BYE_DUP)


class _ServerHistory:
    """Per-grid-point arrival mix, cumulative arrivals and queue of one server"""

    def __init__(self, capacity: int):
        self.arrivals = np.zeros((capacity, _CLASSES))
        self.departures = np.zeros((capacity, _CLASSES))
        self.cumulative = np.zeros(capacity)
        self.queue = np.zeros(capacity)
        self.mu = np.zeros(capacity)

    def sojourn(self, k: int) -> float:
        return self.queue[k] / self.mu[k] if self.mu[k] > 0 else 0.0

    def record(self, k: int, x: np.ndarray, q: float, mu: float, dt: float) -> None:
        self.arrivals[k] = x
        if k:
            self.cumulative[k] = self.cumulative[k - 1] + self.arrivals[k - 1].sum() * dt
        self.queue[k] = q
        self.mu[k] = mu
        self.departures[k] = self._fifo_departures(k, q, mu)

    def _fifo_departures(self, k: int, q: float, mu: float) -> np.ndarray:
        x = self.arrivals[k]
        total = x.sum()
        if q <= 1e-12:
            return x.copy() if total <= mu else x * (mu / total)
        served = self.cumulative[k] - q
        j = int(np.searchsorted(self.cumulative[: k + 1], served, side="right")) - 1
        mix = self.arrivals[min(max(j, 0), k)]
        share = mix.sum()
        if share <= 0:
            mix, share = x, total
        if share <= 0:
            return np.zeros(_CLASSES)
        return mix * (mu / share)


class TandemInputs:
    """Rates of the uac -> p1 -> p2 -> uas chain, built from its own history.

    Every timer of the chain is followed: the Invite timers of the uac, p1 and p2
    (hop by hop), the uas Ok200 timer and the uac Bye timer (end to end). A timer
    copy is due when the original's answer is still travelling, which is read off
    the queue history along the answer's path. Cross-server flows use the
    departures of the previous grid point, which closes the zero-delay feedback
    loops (an Ok200 leaving server 1 brings its Ack and Bye straight back) with a
    lag of one step.
    """

    def __init__(
        self,
        call_rate: Callable[[float], float],
        mu1: Callable[[float], float],
        mu2: Callable[[float], float],
        offsets: Sequence[float],
        dt: float,
        t_end: float,
        teardown: bool = True,
        hold: float = 0.0,
        include_redundant_responses: bool = True,
        end_to_end_offsets: Sequence[float] = (),
    ):
        self.call_rate = call_rate
        self.mu1 = mu1
        self.mu2 = mu2
        self.offsets = tuple(offsets)
        self.end_to_end_offsets = tuple(end_to_end_offsets)
        self.dt = dt
        self.teardown = teardown
        self.hold_steps = int(round(hold / dt))
        self.include_redundant_responses = include_redundant_responses
        capacity = int(np.ceil(t_end / dt - 1e-9)) + 2
        self.server1 = _ServerHistory(capacity)
        self.server2 = _ServerHistory(capacity)
        self.current = FluidState()
        self._k = 0

    def _slot(self, s: float) -> int:
        return min(int(round(s / self.dt)), max(self._k - 1, 0))

    def _path(self, *servers: _ServerHistory) -> Callable[[float], float]:
        """Round trip of a message sent at ``s`` whose answer crosses ``servers`` in order"""

        def round_trip(s: float) -> float:
            at = s
            for server in servers:
                at += server.sojourn(self._slot(at))
            return at - s

        return round_trip

    def _flow(self, server: _ServerHistory, table: str, cls: int) -> Callable[[float], float]:
        return lambda s: getattr(server, table)[self._slot(s), cls]

    def commit(self, t: float, q1: float, q2: float) -> None:
        k = self._k
        s1, s2 = self.server1, self.server2
        d1 = s1.departures[k - 1] if k else np.zeros(_CLASSES)
        d2 = s2.departures[k - 1] if k else np.zeros(_CLASSES)
        redundant = 1.0 if self.include_redundant_responses else 0.0

        x1 = np.zeros(_CLASSES)
        x1[INVITE] = self.call_rate(t)
        x1[ACK] = d1[OK]
        x1[ACK_COPY] = d1[OK_COPY]
        if self.teardown and k - 1 - self.hold_steps >= 0:
            x1[BYE] = s1.departures[k - 1 - self.hold_steps, OK]
        x1[UAC_COPY] = retransmission_rate_fluid(t, self.call_rate, self._path(s1), self.offsets)
        x1[COPY] = retransmission_rate_fluid(t, self._flow(s1, "departures", INVITE), self._path(s2, s1), self.offsets)
        if self.teardown:
            x1[BYE_COPY] = retransmission_rate_fluid(
                t, self._flow(s1, "arrivals", BYE), self._path(s1, s2, s2, s1), self.end_to_end_offsets
            )
        for cls in (TRYING, RINGING, OK, OK_BYE, OK_COPY):
            x1[cls] = d2[cls]
        x1[TRYING_DUP] = d2[TRYING_DUP]
        x1[RINGING_DUP] = d2[RINGING_DUP]
        x1[OK_BYE_DUP] = d2[OK_BYE_DUP]

        # p2 answers Invites itself; the uas answers the requests p2 forwards at once
        x2 = np.zeros(_CLASSES)
        for cls in (INVITE, ACK, ACK_COPY, BYE, BYE_COPY, COPY):
            x2[cls] = d1[cls]
        x2[P2_COPY] = retransmission_rate_fluid(t, self._flow(s2, "departures", INVITE), self._path(s2), self.offsets)
        x2[OK_COPY] = retransmission_rate_fluid(
            t, self._flow(s2, "departures", INVITE), self._path(s2, s1, s1, s2), self.end_to_end_offsets
        )
        x2[RINGING] = d2[INVITE]
        x2[OK] = d2[INVITE]
        x2[OK_BYE] = d2[BYE]
        x2[RINGING_DUP] = redundant * d2[P2_COPY]
        x2[OK_BYE_DUP] = redundant * d2[BYE_COPY]

        mu1, mu2 = self.mu1(t), self.mu2(t)
        s1.record(k, x1, q1, mu1, self.dt)
        s2.record(k, x2, q2, mu2, self.dt)
        # Trying leaves p2 with the request it answers, so it is read off p2's departures
        s2.departures[k, TRYING] = s2.departures[k, INVITE]
        s2.departures[k, TRYING_DUP] = redundant * s2.departures[k, COPY]

        self.current = FluidState(
            q1=q1,
            q2=q2,
            lambda1=sum(x1[cls] for cls in _REQUESTS),
            lambda2=sum(x2[cls] for cls in _REQUESTS),
            r1=x1[UAC_COPY] + x1[BYE_COPY],
            r2=x2[COPY] + x2[BYE_COPY] + x2[P2_COPY],
            r2_prime=x1[COPY],
            nu1=sum(x1[cls] for cls in _RESPONSES),
            nu2=sum(x2[cls] for cls in _RESPONSES),
            mu1=mu1,
            mu2=mu2,
        )
        self._k = k + 1

    def evaluate(self, t: float, q1: float, q2: float) -> FluidState:
        return replace(self.current, q1=q1, q2=q2, mu1=self.mu1(t), mu2=self.mu2(t))


def tandem_inputs(cfg: ScenarioConfig, dt: Optional[float] = None) -> TandemInputs:
    if cfg.topology.proxies != 2:
        raise ConfigError("topology.proxies", "the fluid model needs a two-proxy tandem")
    dt = dt or cfg.fluid.dt
    profile = cfg.workload
    server1 = CapacityProfile(cfg.server.mu_for("p1"), slowdowns_for(profile, "p1"))
    server2 = CapacityProfile(cfg.server.mu_for("p2"), slowdowns_for(profile, "p2"))
    schedule = retransmission_schedule(TimerKind.HOP_BY_HOP, cfg.timers.t1, cfg.timers.t2)
    end_to_end = retransmission_schedule(TimerKind.END_TO_END, cfg.timers.t1, cfg.timers.t2)
    return TandemInputs(
        call_rate=lambda t: rate_at(profile, t),
        mu1=server1.mu_at,
        mu2=server2.mu_at,
        offsets=schedule.offsets,
        end_to_end_offsets=end_to_end.offsets,
        dt=dt,
        t_end=cfg.run.duration,
        teardown=cfg.call.teardown,
        hold=cfg.call.hold,
        include_redundant_responses=cfg.fluid.include_redundant_responses,
    )


def run_fluid(cfg: ScenarioConfig, dt: Optional[float] = None) -> FluidTrajectory:
    """Integrate the scenario's tandem over ``[0, run.duration]``"""
    dt = dt or cfg.fluid.dt
    trajectory = integrate(FluidState(), tandem_inputs(cfg, dt), dt, cfg.run.duration, cfg.timers.t1)
    onset = np.flatnonzero(trajectory.r2_prime > 0)
    logger.info(
        "fluid run: %d steps of %.4fs, q1(end)=%.1f q2(end)=%.1f, first r2' at %s",
        len(trajectory.t) - 1,
        dt,
        trajectory.q1[-1],
        trajectory.q2[-1],
        f"{trajectory.t[onset[0]]:.3f}s" if onset.size else "never",
    )
    return trajectory
