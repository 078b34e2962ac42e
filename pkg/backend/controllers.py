"""
Overload controllers - pluggable admission, retransmission and push-back control

Pure decision functions come first; the controller classes at the bottom wrap them
with per-server state and are consulted by ``SipServer`` at three points:

  * ``admit``                 - a new Invite reaches the server's queue
  * ``admit_forward``         - the server is about to forward a new Invite on a route
  * ``admit_retransmission``  - one of the server's retransmission timers fires

plus ``on_tick`` every control interval.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Callable, Deque, Dict, Iterable, List, Literal, Optional, Tuple, Type

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigError, ConsistencyError, ParameterError
from .sip import MessageKind, SipMessage

if TYPE_CHECKING:
    from .server import SipServer

logger = logging.getLogger(__name__)


class Verdict(str, Enum):
    ACCEPT = "Accept"
    REJECT = "Reject"
    FORWARD = "Forward"
    HOLD = "Hold"


@dataclass(frozen=True)
class ControlVerdict:
    verdict: Verdict
    state: object = None
    retry_after: Optional[float] = None

    @property
    def rejected(self) -> bool:
        return self.verdict is Verdict.REJECT


ACCEPT = ControlVerdict(Verdict.ACCEPT)
FORWARD = ControlVerdict(Verdict.FORWARD)


def clamp(value: float, low: float, high: float) -> float:
    return max(low, min(high, value))


# ---------------------------------------------------------------- bang-bang

class Mode(str, Enum):
    UNDERLOAD = "Underload"
    OVERLOAD = "Overload"


@dataclass(frozen=True)
class BangBangState:
    high_threshold: int
    low_threshold: int
    mode: Mode = Mode.UNDERLOAD

    def __post_init__(self):
        if not self.low_threshold < self.high_threshold:
            raise ParameterError(
                f"low threshold {self.low_threshold} must be below high threshold {self.high_threshold}"
            )


def bangbang_decide(state: BangBangState, q: int, kind: MessageKind, new_call: bool = True) -> ControlVerdict:
    """Two-threshold hysteresis; Overload rejects new Invites only"""
    mode = state.mode
    if mode is Mode.UNDERLOAD and q > state.high_threshold:
        mode = Mode.OVERLOAD
    elif mode is Mode.OVERLOAD and q < state.low_threshold:
        mode = Mode.UNDERLOAD
    new_state = state if mode is state.mode else replace(state, mode=mode)

    if mode is Mode.OVERLOAD and kind is MessageKind.INVITE and new_call:
        return ControlVerdict(Verdict.REJECT, new_state)
    return ControlVerdict(Verdict.ACCEPT, new_state)


# ---------------------------------------------------------------- occupancy

def occupancy_update(p: float, rho_meas: float, rho_target: float, gamma: float) -> float:
    if not gamma > 0:
        raise ParameterError(f"occupancy gain must be positive, got {gamma}")
    return clamp(p + gamma * (rho_meas - rho_target), 0.0, 1.0)


# ---------------------------------------------------------------- priority

class Placement(str, Enum):
    HIGH = "high"
    LOW = "low"
    REJECTED = "rejected"


def priority_reject_probability(low_size: int, thresholds: Optional[Tuple[int, int]]) -> float:
    """Linear ramp 0 -> 1 across [th_low, th_high), 1 at or above th_high"""
    if thresholds is None:
        return 0.0
    th_low, th_high = thresholds
    if th_low >= th_high:
        raise ConfigError("controller.th_low", f"must be below controller.th_high ({th_low} >= {th_high})")
    if low_size < th_low:
        return 0.0
    if low_size >= th_high:
        return 1.0
    return (low_size - th_low) / (th_high - th_low)


def priority_enqueue(
    msg: SipMessage,
    high_queue: Deque[SipMessage],
    low_queue: Deque[SipMessage],
    thresholds: Optional[Tuple[int, int]] = None,
    u: float = 1.0,
    new_call: bool = True,
    low_size: Optional[int] = None,
) -> Placement:
    """Invites go to the low queue, everything else to the high queue.

    With thresholds, a new Invite is rejected when ``u`` falls below the ramp
    probability for the low-queue size (``low_size`` when the caller counts
    only some of the queued Invites).
    """
    if low_size is None:
        low_size = len(low_queue)
    probability = priority_reject_probability(low_size, thresholds)
    if msg.kind is MessageKind.INVITE:
        if new_call and u < probability:
            return Placement.REJECTED
        low_queue.append(msg)
        return Placement.LOW
    high_queue.append(msg)
    return Placement.HIGH


# ---------------------------------------------------------------- window

class WindowEvent(str, Enum):
    NEW_CALL = "new-call"
    CALL_ANSWERED = "call-answered"


@dataclass(frozen=True)
class WindowState:
    window_size: int
    outstanding: int = 0


def window_decide(state: WindowState, event: WindowEvent) -> ControlVerdict:
    if state.window_size < 0:
        raise ParameterError(f"window size must be non-negative, got {state.window_size}")
    if event is WindowEvent.CALL_ANSWERED:
        if state.outstanding == 0:
            raise ConsistencyError("window outstanding count would drop below zero")
        return ControlVerdict(Verdict.ACCEPT, replace(state, outstanding=state.outstanding - 1))
    if state.outstanding < state.window_size:
        return ControlVerdict(Verdict.FORWARD, replace(state, outstanding=state.outstanding + 1))
    return ControlVerdict(Verdict.REJECT, state)


# ---------------------------------------------------------------- push-back rate targets

def rate_target_from_occupancy(
    lambda_meas: float, rho_meas: float, rho_target: float, lambda_max: float = math.inf
) -> float:
    if rho_meas <= 0:
        return lambda_max
    return clamp(lambda_meas * rho_target / rho_meas, 0.0, lambda_max)


def rate_target_from_delay(
    lambda_meas: float, d_meas: float, d_target: float, lambda_max: float = math.inf
) -> float:
    if d_meas <= 0:
        return lambda_max
    return clamp(lambda_meas * d_target / d_meas, 0.0, lambda_max)


def retry_after_duration(q: float, q_target: float, mu: float) -> float:
    """Time needed to drain the queue down to ``q_target`` at rate ``mu``"""
    if not mu > 0:
        raise ParameterError(f"service rate must be positive, got {mu}")
    return max(0.0, (q - q_target) / mu)


# ---------------------------------------------------------------- RTQC

@dataclass(frozen=True)
class RtqcConfig:
    q_rmin: float
    q_rmax: float
    p_min: float = 0.2
    gain: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_min <= 1:
            raise ParameterError(f"p_min must lie in (0, 1], got {self.p_min}")
        if not 0 <= self.q_rmin < self.q_rmax:
            # a zero departure rate collapses both thresholds; rtqc_probability handles it
            if not (self.q_rmin == self.q_rmax == 0):
                raise ParameterError(f"need 0 <= q_rmin < q_rmax, got ({self.q_rmin}, {self.q_rmax})")


def rtqc_probability(q_r: float, cfg: RtqcConfig) -> float:
    """Retransmission probability from the timer-queue size, piecewise linear"""
    if q_r <= cfg.q_rmin:
        if cfg.q_rmax == cfg.q_rmin and q_r > 0:
            return cfg.p_min
        return 1.0
    if q_r >= cfg.q_rmax:
        return cfg.p_min
    fraction = (q_r - cfg.q_rmin) / (cfg.q_rmax - cfg.q_rmin)
    return 1.0 - fraction * (1.0 - cfg.p_min)


def rtqc_tune_thresholds(
    avg_departure_rate: float, cfg: RtqcConfig, horizon: Optional[float] = None, t1: float = 0.5
) -> Tuple[float, float]:
    """Thresholds proportional to the original-message departure rate"""
    if avg_departure_rate < 0:
        raise ParameterError(f"departure rate must be non-negative, got {avg_departure_rate}")
    if horizon is None:
        horizon = 64 * t1
    return (
        cfg.gain * avg_departure_rate * t1,
        cfg.gain * avg_departure_rate * horizon,
    )


# ---------------------------------------------------------------- PI control

@dataclass
class PiControllerState:
    setpoint: float
    kp: float
    ki: float
    output: float = 1.0
    lower: float = 0.0
    upper: float = 1.0
    accumulator: float = 0.0
    last_error: float = 0.0
    flagged: int = 0


def pi_update(ctrl: PiControllerState, measurement: float, dt: float) -> float:
    """Incremental PI step with output clamping and a frozen accumulator while saturated"""
    if not dt > 0:
        raise ParameterError(f"control interval must be positive, got {dt}")
    if not math.isfinite(measurement):
        ctrl.flagged += 1
        logger.warning("non-finite controller measurement %r, holding output %.4f", measurement, ctrl.output)
        return ctrl.output

    error = ctrl.setpoint - measurement
    integral = ctrl.ki * error * dt
    candidate = ctrl.output + ctrl.kp * (error - ctrl.last_error) + integral
    output = clamp(candidate, ctrl.lower, ctrl.upper)
    if output == candidate:
        ctrl.accumulator += integral
    ctrl.output = output
    ctrl.last_error = error
    return output


def estimate_round_trip_delay(
    samples: Iterable[Tuple[float, float]], alpha: float, prev: Optional[float]
) -> Optional[float]:
    """EWMA of (response - send); invalid pairs are skipped"""
    if not 0 < alpha <= 1:
        raise ParameterError(f"smoothing weight must lie in (0, 1], got {alpha}")
    estimate = prev
    for sent, answered in samples:
        if answered < sent:
            continue
        delay = answered - sent
        estimate = delay if estimate is None else (1 - alpha) * estimate + alpha * delay
    return estimate


# ---------------------------------------------------------------- parameter models

class _Params(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NoParams(_Params):
    pass


class BangBangParams(_Params):
    high: int = Field(200, ge=1)
    low: int = Field(100, ge=0)

    @model_validator(mode="after")
    def _ordered(self):
        if self.low >= self.high:
            raise ValueError("low must be below high")
        return self


class OccupancyParams(_Params):
    target: float = Field(0.8, gt=0, le=1)
    gain: float = Field(0.5, gt=0)
    window: float = Field(1.0, gt=0)


class PriorityParams(_Params):
    two_threshold: bool = True
    th_low: int = Field(50, ge=0)
    th_high: int = Field(100, ge=1)

    @model_validator(mode="after")
    def _ordered(self):
        if self.two_threshold and self.th_low >= self.th_high:
            raise ValueError("th_low must be below th_high")
        return self


class WindowParams(_Params):
    size: int = Field(10, ge=0)


class RateOccupancyParams(_Params):
    target: float = Field(0.8, gt=0, le=1)
    window: float = Field(1.0, gt=0)
    max_rate: float = Field(10000.0, gt=0)


class RateDelayParams(_Params):
    d_target: float = Field(0.2, ge=0)
    max_rate: float = Field(10000.0, gt=0)


class RetryAfterParams(_Params):
    high: int = Field(200, ge=1)
    q_target: int = Field(50, ge=0)


class RtqcParams(_Params):
    q_rmin: float = Field(50.0, ge=0)
    q_rmax: float = Field(500.0, gt=0)
    p_min: float = Field(0.2, gt=0, le=1)
    gain: float = Field(1.0, gt=0)
    adaptive: bool = True
    horizon: Optional[float] = Field(None, gt=0)
    smoothing: float = Field(0.3, gt=0, le=1)
    shed_calls: bool = True

    @model_validator(mode="after")
    def _ordered(self):
        if self.q_rmin >= self.q_rmax:
            raise ValueError("q_rmin must be below q_rmax")
        return self


class RrrcParams(_Params):
    setpoint: float = Field(0.1, ge=0, le=1)
    kp: float = Field(1.5, ge=0)
    ki: float = Field(0.1, ge=0)
    p_min: float = Field(0.2, gt=0, le=1)
    window: float = Field(2.0, gt=0)
    denominator: Literal["retransmissions", "messages"] = "messages"
    shed_calls: bool = True


class RtdcParams(_Params):
    d_target: float = Field(0.5, gt=0)
    margin: float = Field(0.15, ge=0)
    kp: float = Field(0.4, ge=0)
    ki: float = Field(0.035, ge=0)
    p_min: float = Field(0.2, gt=0, le=1)
    alpha: float = Field(0.2, gt=0, le=1)
    shed_calls: bool = True

    @model_validator(mode="after")
    def _headroom(self):
        if self.margin >= self.d_target:
            raise ValueError("margin must be below d_target")
        return self


# ---------------------------------------------------------------- hosted controllers

class OverloadController:
    """No control: every hook admits"""

    name = "none"
    params_model: Type[_Params] = NoParams

    def __init__(self, params: _Params, t1: float = 0.5):
        self.params = params
        self.t1 = t1

    def make_queue(self, server: "SipServer"):
        return None

    def admit(self, server: "SipServer", msg: SipMessage) -> ControlVerdict:
        return ACCEPT

    def admit_forward(self, server: "SipServer", msg: SipMessage, route: str) -> ControlVerdict:
        return FORWARD

    def on_answered(self, server: "SipServer", route: str) -> None:
        pass

    def admit_retransmission(self, server: "SipServer", msg: SipMessage) -> bool:
        return True

    def set_rate_target(self, route: str, target: float, now: float) -> None:
        pass

    def on_tick(self, server: "SipServer", now: float, dt: float) -> None:
        pass


class BangBangController(OverloadController):
    name = "bangbang"
    params_model = BangBangParams

    def __init__(self, params: BangBangParams, t1: float = 0.5):
        super().__init__(params, t1)
        self.state = BangBangState(params.high, params.low)

    def admit(self, server, msg):
        previous = self.state.mode
        verdict = bangbang_decide(self.state, server.queue_length, msg.kind)
        self.state = verdict.state
        if self.state.mode is not previous:
            logger.debug("%s switched to %s at q=%d", server.id, self.state.mode.value, server.queue_length)
            server.record("mode", 1.0 if self.state.mode is Mode.OVERLOAD else 0.0)
        return verdict


class OccupancyController(OverloadController):
    name = "occupancy"
    params_model = OccupancyParams

    def __init__(self, params: OccupancyParams, t1: float = 0.5):
        super().__init__(params, t1)
        self.p = 0.0

    def admit(self, server, msg):
        if self.p > 0 and server.draw_control(self.p):
            return ControlVerdict(Verdict.REJECT)
        return ACCEPT

    def on_tick(self, server, now, dt):
        rho = server.occupancy(self.params.window)
        self.p = occupancy_update(self.p, rho, self.params.target, self.params.gain)
        server.record("rho", rho)
        server.record("p_reject", self.p)


class PriorityMessageQueue:
    """High queue for everything but Invites; the low queue is served only when high is empty.

    The low queue keeps one slot per call: an upstream repeat of an Invite whose
    original is still waiting is absorbed, and the rejection ramp counts originals only.
    """

    def __init__(self, thresholds: Optional[Tuple[int, int]], draw: Callable[[], float]):
        self.high: Deque[SipMessage] = deque()
        self.low: Deque[SipMessage] = deque()
        self.thresholds = thresholds
        self._draw = draw
        self.waiting: Dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.high) + len(self.low)

    def absorbs(self, msg: SipMessage) -> bool:
        return msg.kind is MessageKind.INVITE and not msg.local and msg.call_id in self.waiting

    def offer(self, msg: SipMessage, new_call: bool) -> bool:
        u = self._draw() if (self.thresholds and new_call and msg.kind is MessageKind.INVITE) else 1.0
        placement = priority_enqueue(
            msg, self.high, self.low, self.thresholds, u, new_call, low_size=len(self.waiting)
        )
        if placement is Placement.LOW and new_call:
            self.waiting[msg.call_id] = msg.instance_id
        return placement is not Placement.REJECTED

    def popleft(self) -> SipMessage:
        if self.high:
            return self.high.popleft()
        msg = self.low.popleft()
        if self.waiting.get(msg.call_id) == msg.instance_id:
            del self.waiting[msg.call_id]
        return msg

    def __iter__(self):
        yield from self.high
        yield from self.low


class PriorityController(OverloadController):
    name = "priority"
    params_model = PriorityParams

    def make_queue(self, server):
        thresholds = (self.params.th_low, self.params.th_high) if self.params.two_threshold else None
        return PriorityMessageQueue(thresholds, server.uniform_control)


class WindowController(OverloadController):
    name = "window"
    params_model = WindowParams

    def __init__(self, params: WindowParams, t1: float = 0.5):
        super().__init__(params, t1)
        self.windows: Dict[str, WindowState] = {}

    def _state(self, route: str) -> WindowState:
        state = self.windows.get(route)
        if state is None:
            state = WindowState(self.params.size)
            self.windows[route] = state
        return state

    def admit_forward(self, server, msg, route):
        verdict = window_decide(self._state(route), WindowEvent.NEW_CALL)
        self.windows[route] = verdict.state
        return verdict

    def on_answered(self, server, route):
        verdict = window_decide(self._state(route), WindowEvent.CALL_ANSWERED)
        self.windows[route] = verdict.state

    def on_tick(self, server, now, dt):
        for route, state in self.windows.items():
            server.record(f"outstanding[{route}]", float(state.outstanding))


class _TokenBucket:
    def __init__(self, rate: float, now: float):
        self.rate = rate
        self.tokens = 1.0
        self.updated = now

    def refill(self, now: float) -> None:
        self.tokens = min(max(1.0, self.rate), self.tokens + (now - self.updated) * self.rate)
        self.updated = now

    def take(self, now: float) -> bool:
        self.refill(now)
        if self.tokens >= 1.0:
            self.tokens -= 1.0
            return True
        return False


class RateTargetController(OverloadController):
    """Push-back: the host publishes a target call rate; upstream senders thin new calls to it"""

    name = "rate_occupancy"
    params_model = RateOccupancyParams

    def __init__(self, params, t1: float = 0.5):
        super().__init__(params, t1)
        self.buckets: Dict[str, _TokenBucket] = {}
        self.target: Optional[float] = None

    def measure_target(self, server: "SipServer", lambda_meas: float, dt: float) -> float:
        rho = server.occupancy(self.params.window)
        server.record("rho", rho)
        return rate_target_from_occupancy(lambda_meas, rho, self.params.target, self.params.max_rate)

    def on_tick(self, server, now, dt):
        lambda_meas = server.take_invite_arrivals() / dt
        self.target = self.measure_target(server, lambda_meas, dt)
        server.record("target_rate", self.target)
        server.publish_rate_target(self.target)

    def set_rate_target(self, route, target, now):
        bucket = self.buckets.get(route)
        if bucket is None:
            self.buckets[route] = _TokenBucket(target, now)
        else:
            bucket.refill(now)
            bucket.rate = target

    def admit_forward(self, server, msg, route):
        bucket = self.buckets.get(route)
        if bucket is None or bucket.take(server.clock):
            return FORWARD
        return ControlVerdict(Verdict.REJECT)


class RateDelayController(RateTargetController):
    name = "rate_delay"
    params_model = RateDelayParams

    def measure_target(self, server, lambda_meas, dt):
        delay = server.take_mean_sojourn()
        server.record("delay", delay)
        return rate_target_from_delay(lambda_meas, delay, self.params.d_target, self.params.max_rate)


class RetryAfterController(OverloadController):
    name = "retry_after"
    params_model = RetryAfterParams

    def admit(self, server, msg):
        q = server.queue_length
        if q <= self.params.high:
            return ACCEPT
        duration = retry_after_duration(q, self.params.q_target, server.mu_now)
        return ControlVerdict(Verdict.REJECT, retry_after=duration if duration > 0 else None)


class RetransmissionController(OverloadController):
    """Thins the host's timer copies with probability ``1 - p``.

    With ``shed_calls`` the same ``p`` also admits new Invites forwarded
    downstream; the shed ones are answered with a 503 upstream.
    """

    def retransmit_probability(self, server: "SipServer") -> float:
        return 1.0

    def _coin(self, server: "SipServer") -> bool:
        p = self.retransmit_probability(server)
        return p >= 1.0 or server.draw_control(p)

    def admit_retransmission(self, server, msg):
        return self._coin(server)

    def admit_forward(self, server, msg, route):
        if self.params.shed_calls and not self._coin(server):
            return ControlVerdict(Verdict.REJECT)
        return FORWARD


class RtqcController(RetransmissionController):
    name = "rtqc"
    params_model = RtqcParams

    def __init__(self, params: RtqcParams, t1: float = 0.5):
        super().__init__(params, t1)
        self.cfg = RtqcConfig(params.q_rmin, params.q_rmax, params.p_min, params.gain)
        self.horizon = params.horizon if params.horizon is not None else 8 * t1
        self.departure_rate: Optional[float] = None

    def retransmit_probability(self, server):
        return rtqc_probability(server.timer_count, self.cfg)

    def on_tick(self, server, now, dt):
        if self.params.adaptive:
            rate = server.take_original_departures() / dt
            if self.departure_rate is None:
                self.departure_rate = rate
            else:
                w = self.params.smoothing
                self.departure_rate = (1 - w) * self.departure_rate + w * rate
            q_rmin, q_rmax = rtqc_tune_thresholds(self.departure_rate, self.cfg, self.horizon, self.t1)
            self.cfg = replace(self.cfg, q_rmin=q_rmin, q_rmax=q_rmax)
        server.record("q_r", float(server.timer_count))
        server.record("p_retransmit", rtqc_probability(server.timer_count, self.cfg))


class RrrcController(RetransmissionController):
    name = "rrrc"
    params_model = RrrcParams

    def __init__(self, params: RrrcParams, t1: float = 0.5):
        super().__init__(params, t1)
        self.pi = PiControllerState(
            setpoint=params.setpoint, kp=params.kp, ki=params.ki, output=1.0, lower=params.p_min, upper=1.0
        )

    def retransmit_probability(self, server):
        return self.pi.output

    def measurement(self, server: "SipServer", dt: float) -> Optional[float]:
        return server.redundant_ratio(self.params.window, self.params.denominator)

    def on_tick(self, server, now, dt):
        measured = self.measurement(server, dt)
        if measured is None:
            return
        pi_update(self.pi, measured, dt)
        server.record("measurement", measured)
        server.record("p_retransmit", self.pi.output)


class RtdcController(RrrcController):
    """Holds the Invite round-trip estimate ``margin`` below ``d_target``"""

    name = "rtdc"
    params_model = RtdcParams

    def __init__(self, params: RtdcParams, t1: float = 0.5):
        RetransmissionController.__init__(self, params, t1)
        self.pi = PiControllerState(
            setpoint=params.d_target - params.margin,
            kp=params.kp,
            ki=params.ki,
            output=1.0,
            lower=params.p_min,
            upper=1.0,
        )
        self.estimate: Optional[float] = None
        self.discarded = 0

    def measurement(self, server, dt):
        samples = server.take_rtt_samples()
        valid = [(sent, answered) for sent, answered in samples if answered >= sent]
        if len(valid) < len(samples):
            self.discarded += len(samples) - len(valid)
            logger.warning("%s discarded %d RTT samples with response before send", server.id, len(samples) - len(valid))
        self.estimate = estimate_round_trip_delay(valid, self.params.alpha, self.estimate)
        return self.estimate


CONTROLLERS: Dict[str, Type[OverloadController]] = {
    cls.name: cls
    for cls in (
        OverloadController,
        BangBangController,
        OccupancyController,
        PriorityController,
        WindowController,
        RateTargetController,
        RateDelayController,
        RetryAfterController,
        RtqcController,
        RrrcController,
        RtdcController,
    )
}


def build_controller(name: str, params: Optional[_Params] = None, t1: float = 0.5) -> OverloadController:
    cls = CONTROLLERS.get(name)
    if cls is None:
        raise ConfigError("controller.name", f"unknown controller {name!r}")
    if params is None:
        params = cls.params_model()
    return cls(params, t1)
