"""
Server - one SIP node: message queue, retransmission timers and service process

A node plays one of three roles. Proxies and cluster back-ends (UAS role with a
finite rate) queue every message in front of a single processor; user agents
with unlimited capacity handle messages the moment they arrive. Timer copies are
queued at the node that generated them and leave when served.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Deque, Dict, List, Optional, Set, Tuple

from .controllers import OverloadController
from .engine import Bernoulli, EventKind, SimEvent, Uniform
from .errors import ConsistencyError, ParameterError
from .sip import (
    CallSession,
    MessageKind,
    RetransmissionClass,
    RetransmissionTimer,
    SessionEvent,
    SessionState,
    SessionStep,
    SipMessage,
    Transaction,
    classify_retransmission,
    retransmission_schedule,
)
from .workload import CapacityProfile

if TYPE_CHECKING:
    from .network import CallContext, SipNetwork

logger = logging.getLogger(__name__)


class Role(str, Enum):
    UAC = "uac"
    PROXY = "proxy"
    UAS = "uas"


class EnqueueResult(str, Enum):
    ACCEPTED = "Accepted"
    DROPPED = "DroppedBufferFull"
    REJECTED = "RejectedByControl"
    ABSORBED = "AbsorbedDuplicate"


class TimerOutcome(str, Enum):
    RETRANSMIT = "Retransmit"
    TIMEOUT = "TransactionTimeout"


class FifoMessageQueue(deque):
    def absorbs(self, msg: SipMessage) -> bool:
        return False

    def offer(self, msg: SipMessage, new_call: bool) -> bool:
        self.append(msg)
        return True


@dataclass
class RouteSuppression:
    route: str
    until: float


@dataclass
class ProxyTransaction:
    call_id: int
    upstream: str
    route: Optional[str] = None
    window_route: Optional[str] = None
    rejected: bool = False
    tried: Set[str] = field(default_factory=set)


@dataclass
class UasDialog:
    call_id: int
    upstream: str
    uac: str
    rejected: bool = False


TimerKey = Tuple[int, MessageKind, Transaction]


class SipServer:
    """A SIP node with a processor of rate ``µ(t)`` or, when ``capacity.unlimited``, an endpoint"""

    def __init__(
        self,
        node_id: str,
        role: Role,
        network: "SipNetwork",
        capacity: CapacityProfile,
        controller: OverloadController,
        buffer_limit: Optional[int] = None,
        service: str = "exponential",
        reject_cost: float = 0.5,
        retry_after: Optional[float] = None,
        occupancy_window: float = 1.0,
    ):
        self.id = node_id
        self.role = role
        self.network = network
        self.capacity = capacity
        self.controller = controller
        self.buffer_limit = buffer_limit
        self.service = service
        self.reject_cost = reject_cost
        self.default_retry_after = retry_after
        self.occupancy_window = occupancy_window

        self.queue = controller.make_queue(self) or FifoMessageQueue()
        self.in_service: Optional[SipMessage] = None
        self.busy = False
        self.busy_since = 0.0
        self.pending_rejections: Deque[Tuple[SipMessage, Optional[float]]] = deque()

        self.arrivals = 0
        self.served = 0
        self.rejected = 0
        self.dropped = 0
        self.absorbed = 0

        self.timers: Dict[TimerKey, RetransmissionTimer] = {}
        self.suppression: Dict[str, RouteSuppression] = {}
        self.held: Dict[str, Deque[SipMessage]] = {}
        self.seen: Set[int] = set()
        self._sighted: Set[int] = set()
        self.transactions: Dict[int, ProxyTransaction] = {}
        self.dialogs: Dict[int, UasDialog] = {}

        self.rtt_samples: List[Tuple[float, float]] = []
        self._busy_log: Deque[Tuple[float, float]] = deque()
        self._occupancy_horizon = occupancy_window
        self._enqueued_at: Dict[int, float] = {}
        self._sojourn_sum = 0.0
        self._sojourn_count = 0
        self._invite_arrivals = 0
        self._original_departures = 0
        self._retransmission_log: Deque[Tuple[float, bool]] = deque()
        self._sent_log: Optional[Deque[float]] = None

    def __repr__(self) -> str:
        return f"SipServer({self.id!r}, {self.role.value}, q={self.queue_length})"

    # ------------------------------------------------------------ observed state

    @property
    def clock(self) -> float:
        return self.network.engine.clock

    @property
    def queue_length(self) -> int:
        return len(self.queue) + (1 if self.in_service is not None else 0)

    @property
    def timer_count(self) -> int:
        return len(self.timers)

    @property
    def mu_now(self) -> float:
        return self.capacity.mu_at(self.clock)

    def occupancy(self, window: float) -> float:
        """Busy fraction of the trailing window, rejection work included"""
        if not window > 0:
            raise ParameterError(f"occupancy window must be positive, got {window}")
        self._occupancy_horizon = max(self._occupancy_horizon, window)
        now = self.clock
        start = now - window
        while self._busy_log and self._busy_log[0][1] < now - self._occupancy_horizon:
            self._busy_log.popleft()
        busy = 0.0
        for begin, end in self._busy_log:
            if end > start:
                busy += end - max(begin, start)
        if self.busy:
            busy += now - max(self.busy_since, start)
        return min(1.0, max(0.0, busy / window))

    def redundant_ratio(self, window: float, denominator: str = "retransmissions") -> float:
        now = self.clock
        while self._retransmission_log and self._retransmission_log[0][0] < now - window:
            self._retransmission_log.popleft()
        redundant = sum(1 for _, is_redundant in self._retransmission_log if is_redundant)
        if denominator == "messages":
            if self._sent_log is None:
                self._sent_log = deque()
            while self._sent_log and self._sent_log[0] < now - window:
                self._sent_log.popleft()
            total = len(self._sent_log)
        else:
            total = len(self._retransmission_log)
        return redundant / total if total else 0.0

    def take_rtt_samples(self) -> List[Tuple[float, float]]:
        samples, self.rtt_samples = self.rtt_samples, []
        return samples

    def take_invite_arrivals(self) -> int:
        count, self._invite_arrivals = self._invite_arrivals, 0
        return count

    def take_original_departures(self) -> int:
        count, self._original_departures = self._original_departures, 0
        return count

    def take_mean_sojourn(self) -> float:
        if self._sojourn_count:
            mean = self._sojourn_sum / self._sojourn_count
        elif self.capacity.unlimited:
            mean = 0.0
        else:
            mean = self.queue_length / self.mu_now
        self._sojourn_sum, self._sojourn_count = 0.0, 0
        return mean

    def record(self, variable: str, value: float) -> None:
        self.network.metrics.controller(self.clock, self.id, variable, value)

    def draw_control(self, p: float) -> bool:
        return self.network.streams.draw(f"control:{self.id}", Bernoulli(p))

    def uniform_control(self) -> float:
        return self.network.streams.draw(f"control:{self.id}", Uniform())

    def publish_rate_target(self, target: float) -> None:
        self.network.publish_rate_target(self.id, target)

    # ------------------------------------------------------------ intake

    def _is_new_call(self, msg: SipMessage) -> bool:
        return (
            msg.kind is MessageKind.INVITE
            and not msg.local
            and msg.call_id not in self.seen
        )

    def _count_invite(self, msg: SipMessage) -> None:
        """Offered-call rate counts each call once, however often a dropped Invite is resent"""
        if msg.call_id not in self._sighted:
            self._sighted.add(msg.call_id)
            self._invite_arrivals += 1

    def receive(self, msg: SipMessage) -> EnqueueResult:
        """Entry point for a message arriving over a link"""
        if self.capacity.unlimited:
            self.arrivals += 1
            if self._is_new_call(msg):
                self._count_invite(msg)
                self.seen.add(msg.call_id)
            self.served += 1
            self.process(msg)
            return EnqueueResult.ACCEPTED
        return self.enqueue(msg)

    def enqueue(self, msg: SipMessage) -> EnqueueResult:
        if self.queue.absorbs(msg):
            self.absorbed += 1
            return EnqueueResult.ABSORBED
        self.arrivals += 1
        new_call = self._is_new_call(msg)
        if new_call:
            self._count_invite(msg)

        if self.buffer_limit is not None and self.queue_length >= self.buffer_limit:
            self.dropped += 1
            return EnqueueResult.DROPPED

        if new_call:
            self.seen.add(msg.call_id)
            verdict = self.controller.admit(self, msg)
            if verdict.rejected:
                self._reject(msg, verdict.retry_after)
                return EnqueueResult.REJECTED
        if not self.queue.offer(msg, new_call):
            self._reject(msg, None)
            return EnqueueResult.REJECTED

        self._enqueued_at[msg.instance_id] = self.clock
        self._start_service()
        return EnqueueResult.ACCEPTED

    def _reject(self, msg: SipMessage, retry_after: Optional[float]) -> None:
        self.rejected += 1
        if retry_after is None:
            retry_after = self.default_retry_after
        if self.role is Role.PROXY:
            self.transactions[msg.call_id] = ProxyTransaction(msg.call_id, msg.src, rejected=True)
        elif self.role is Role.UAS:
            self.dialogs[msg.call_id] = UasDialog(msg.call_id, msg.src, self.network.calls[msg.call_id].uac, rejected=True)
        self.pending_rejections.append((msg, retry_after))
        self._start_service()

    # ------------------------------------------------------------ service process

    def _service_time(self) -> float:
        dist = self.capacity.service_distribution(self.clock, self.service)
        return self.network.streams.draw(f"service:{self.id}", dist)

    def _start_service(self) -> None:
        if self.busy:
            return
        if self.pending_rejections:
            msg, retry_after = self.pending_rejections.popleft()
            work = ("reject", msg, retry_after)
            duration = self.reject_cost * self._service_time()
        elif len(self.queue):
            msg = self.queue.popleft()
            self.in_service = msg
            work = ("serve", msg, None)
            duration = self._service_time()
        else:
            return
        self.busy = True
        self.busy_since = self.clock
        self.network.engine.schedule_in(duration, EventKind.SERVICE_COMPLETION, self._complete, work)

    def _complete(self, event: SimEvent) -> None:
        now = self.clock
        self.busy = False
        self._busy_log.append((self.busy_since, now))
        tag, msg, retry_after = event.data
        if tag == "reject":
            self.send_unavailable(msg, retry_after)
        else:
            self.in_service = None
            self.served += 1
            enqueued = self._enqueued_at.pop(msg.instance_id, now)
            self._sojourn_sum += now - enqueued
            self._sojourn_count += 1
            self.process(msg)
        self._start_service()

    def service_step(self) -> Optional[SipMessage]:
        """Start serving the head of the queue if idle; returns the message taken into service"""
        self._start_service()
        return self.in_service

    # ------------------------------------------------------------ sending

    def send(
        self,
        kind: MessageKind,
        transaction: Transaction,
        call_id: int,
        dst: str,
        target: Optional[str] = None,
        origin: Optional[str] = None,
        copy_index: int = 0,
        redundant: bool = False,
        retry_after: Optional[float] = None,
    ) -> SipMessage:
        msg = self.network.new_message(
            call_id=call_id,
            kind=kind,
            transaction=transaction,
            src=self.id,
            dst=dst,
            origin=origin or self.id,
            target=target or dst,
            copy_index=copy_index,
            redundant=redundant,
            retry_after=retry_after,
        )
        self._transmit(msg)
        return msg

    def relay(self, msg: SipMessage, dst: str) -> Optional[SipMessage]:
        """Pass a message on unchanged apart from the hop; requests wait while the route is suppressed"""
        out = self.network.new_message(
            call_id=msg.call_id,
            kind=msg.kind,
            transaction=msg.transaction,
            src=self.id,
            dst=dst,
            origin=msg.origin,
            target=msg.target,
            copy_index=msg.copy_index,
            redundant=msg.redundant,
            retry_after=msg.retry_after,
        )
        if out.kind.is_request and self.is_suppressed(dst):
            self.held.setdefault(dst, deque()).append(out)
            return None
        self._transmit(out)
        return out

    def _transmit(self, msg: SipMessage) -> None:
        if self._sent_log is not None:
            self._sent_log.append(self.clock)
        self.network.transmit(msg)

    def send_unavailable(self, request: SipMessage, retry_after: Optional[float] = None) -> SipMessage:
        """503 for ``request``, back along the hop it came in on"""
        return self.send(
            MessageKind.UNAVAILABLE,
            Transaction.INVITE,
            request.call_id,
            dst=request.src,
            copy_index=request.copy_index,
            redundant=request.redundant,
            retry_after=retry_after,
        )

    # ------------------------------------------------------------ retransmission timers

    def arm(self, msg: SipMessage) -> RetransmissionTimer:
        kind = msg.timer_kind
        if kind is None:
            raise ConsistencyError(f"{msg.kind.value} of call {msg.call_id} carries no retransmission timer")
        schedule = retransmission_schedule(kind, self.network.t1, self.network.t2)
        timer = RetransmissionTimer(message=msg, kind=kind, schedule=schedule, first_sent_at=self.clock)
        self.timers[(msg.call_id, msg.kind, msg.transaction)] = timer
        timer.event = self.network.engine.schedule(timer.fires_at, EventKind.TIMER_FIRE, self._on_timer_event, timer)
        self._original_departures += 1
        return timer

    def disarm(
        self, call_id: int, kind: MessageKind, transaction: Transaction, answered: bool = True
    ) -> Optional[RetransmissionTimer]:
        timer = self.timers.pop((call_id, kind, transaction), None)
        if timer is None:
            return None
        timer.disarm()
        self.network.engine.cancel(timer.event)
        if answered and kind is MessageKind.INVITE:
            self.rtt_samples.append((timer.first_sent_at, self.clock))
        return timer

    def _on_timer_event(self, event: SimEvent) -> None:
        self.on_timer_fire(event.data)

    def on_timer_fire(self, timer: RetransmissionTimer) -> TimerOutcome:
        if not timer.armed:
            raise ConsistencyError(f"disarmed timer for message {timer.for_message} fired")
        original = timer.message
        if timer.exhausted:
            self.timers.pop((original.call_id, original.kind, original.transaction), None)
            timer.armed = False
            self.on_transaction_timeout(timer)
            return TimerOutcome.TIMEOUT

        timer.retransmissions_sent += 1
        copy = self.network.new_message(
            call_id=original.call_id,
            kind=original.kind,
            transaction=original.transaction,
            src=self.id,
            dst=original.dst,
            origin=original.origin,
            target=original.target,
            copy_index=timer.retransmissions_sent,
            local=True,
        )
        if self.is_suppressed(copy.dst) or not self.controller.admit_retransmission(self, copy):
            self.network.metrics.retransmission(copy, self.clock, None)
        elif self.capacity.unlimited:
            self._send_copy(copy)
        else:
            self.enqueue(copy)
        timer.event = self.network.engine.schedule(timer.fires_at, EventKind.TIMER_FIRE, self._on_timer_event, timer)
        return TimerOutcome.RETRANSMIT

    def _send_copy(self, copy: SipMessage) -> None:
        if self.is_suppressed(copy.dst):
            self.network.metrics.retransmission(copy, self.clock, None)
            return
        classification = classify_retransmission(copy, self.network.delivery_log)
        copy.local = False
        copy.redundant = classification is RetransmissionClass.REDUNDANT
        self.network.metrics.retransmission(copy, self.clock, classification)
        self._retransmission_log.append((self.clock, copy.redundant))
        self._transmit(copy)

    def on_transaction_timeout(self, timer: RetransmissionTimer) -> None:
        msg = timer.message
        logger.debug("%s: %s transaction of call %d timed out", self.id, msg.kind.value, msg.call_id)
        if self.role is Role.PROXY:
            tx = self.transactions.get(msg.call_id)
            if tx is not None:
                self._release_window(tx)
        elif self.role is Role.UAC:
            ctx = self.network.calls.get(msg.call_id)
            if ctx is not None:
                self._timeout(ctx)

    # ------------------------------------------------------------ 503 handling

    def is_suppressed(self, route: str) -> bool:
        entry = self.suppression.get(route)
        return entry is not None and self.clock < entry.until

    def handle_503(self, route: str, retry_after: Optional[float]) -> bool:
        """Apply a Retry-After from ``route``; returns True when the route is now suppressed"""
        if retry_after is None:
            return False
        if retry_after < 0:
            self.network.metrics.protocol_errors += 1
            logger.warning("%s: negative Retry-After %.3f from %s ignored", self.id, retry_after, route)
            return False
        until = self.clock + retry_after
        entry = self.suppression.get(route)
        if entry is not None and entry.until >= until:
            return True
        self.suppression[route] = RouteSuppression(route, until)
        logger.debug("%s: route %s suppressed until %.3f", self.id, route, until)
        self.network.engine.schedule(until, EventKind.ROUTE_RELEASE, self._on_route_release, route)
        return True

    def _on_route_release(self, event: SimEvent) -> None:
        route = event.data
        if self.is_suppressed(route):
            return
        held = self.held.pop(route, None)
        while held:
            self._transmit(held.popleft())

    # ------------------------------------------------------------ processing

    def process(self, msg: SipMessage) -> None:
        if msg.local:
            self._send_copy(msg)
        elif self.role is Role.PROXY:
            self._process_proxy(msg)
        elif self.role is Role.UAS:
            self._process_uas(msg)
        else:
            self._process_uac(msg)

    def _stale(self, msg: SipMessage) -> None:
        self.network.metrics.stale_messages += 1

    # proxy ------------------------------------------------------------

    def _process_proxy(self, msg: SipMessage) -> None:
        kind = msg.kind
        tx = self.transactions.get(msg.call_id)

        if kind is MessageKind.INVITE:
            if tx is None:
                self._proxy_new_invite(msg)
            elif tx.rejected:
                self.send_unavailable(msg)
            else:
                self.send(
                    MessageKind.TRYING, Transaction.INVITE, msg.call_id, dst=msg.src,
                    copy_index=msg.copy_index, redundant=msg.redundant,
                )
            return

        if tx is None or tx.route is None:
            self._stale(msg)
            return

        if kind in (MessageKind.ACK, MessageKind.BYE):
            if kind is MessageKind.BYE and self.network.balancer is not None and tx.route in self.network.cluster_ids:
                self.network.balancer.open_transaction(msg.call_id, Transaction.BYE)
            self.relay(msg, tx.route)
            return

        if msg.src != tx.route:
            self._stale(msg)
            return

        if msg.transaction is Transaction.BYE:
            if self.network.balancer is not None and tx.route in self.network.cluster_ids:
                self.network.balancer.close_transaction(msg.call_id, Transaction.BYE)
            self.relay(msg, tx.upstream)
            return

        # Trying, Ringing, Ok or 503 for the Invite this proxy forwarded
        self.disarm(msg.call_id, MessageKind.INVITE, Transaction.INVITE)
        if kind is MessageKind.TRYING:
            return
        if kind is MessageKind.UNAVAILABLE:
            self._proxy_on_503(tx, msg)
            return
        if kind is MessageKind.OK:
            self._release_window(tx)
            if self.network.balancer is not None and tx.route in self.network.cluster_ids:
                self.network.balancer.close_transaction(msg.call_id, Transaction.INVITE)
        self.relay(msg, tx.upstream)

    def _proxy_new_invite(self, msg: SipMessage) -> None:
        self.send(MessageKind.TRYING, Transaction.INVITE, msg.call_id, dst=msg.src)
        tx = ProxyTransaction(msg.call_id, msg.src)
        self.transactions[msg.call_id] = tx
        route = self.network.route_new_call(self, msg.call_id)
        if not self._route_invite(tx, route, msg):
            self._proxy_reject(tx, msg)

    def _route_invite(self, tx: ProxyTransaction, route: str, msg: SipMessage) -> bool:
        """Forward a fresh Invite on ``route`` or its alternate; False when neither may take it"""
        candidates = [route]
        alternate = self.network.alternate_route(self.id)
        if alternate is not None and alternate != route:
            candidates.append(alternate)
        for candidate in candidates:
            if candidate in tx.tried or self.is_suppressed(candidate):
                continue
            if self.controller.admit_forward(self, msg, candidate).rejected:
                return False
            tx.route = candidate
            tx.window_route = candidate
            tx.tried.add(candidate)
            invite = self.send(MessageKind.INVITE, Transaction.INVITE, msg.call_id, dst=candidate)
            self.arm(invite)
            return True
        return False

    def _proxy_reject(self, tx: ProxyTransaction, msg: SipMessage) -> None:
        tx.rejected = True
        if self.network.balancer is not None:
            self.network.balancer.end_call(msg.call_id)
        self.send(MessageKind.UNAVAILABLE, Transaction.INVITE, msg.call_id, dst=tx.upstream)

    def _proxy_on_503(self, tx: ProxyTransaction, msg: SipMessage) -> None:
        self.handle_503(tx.route, msg.retry_after)
        self._release_window(tx)
        if self.network.balancer is not None and tx.route in self.network.cluster_ids:
            self.network.balancer.end_call(msg.call_id)
        alternate = self.network.alternate_route(self.id)
        if alternate is not None and alternate not in tx.tried and self._route_invite(tx, alternate, msg):
            return
        self._proxy_reject(tx, msg)

    def _release_window(self, tx: ProxyTransaction) -> None:
        if tx.window_route is not None:
            self.controller.on_answered(self, tx.window_route)
            tx.window_route = None

    # user agent server ------------------------------------------------

    def _process_uas(self, msg: SipMessage) -> None:
        kind = msg.kind
        dialog = self.dialogs.get(msg.call_id)

        if kind is MessageKind.INVITE:
            if dialog is None:
                uac = self.network.calls[msg.call_id].uac
                self.dialogs[msg.call_id] = UasDialog(msg.call_id, msg.src, uac)
                self.send(MessageKind.RINGING, Transaction.INVITE, msg.call_id, dst=msg.src, target=uac)
                ok = self.send(MessageKind.OK, Transaction.INVITE, msg.call_id, dst=msg.src, target=uac)
                self.arm(ok)
            elif dialog.rejected:
                self.send_unavailable(msg)
            else:
                self.send(
                    MessageKind.RINGING, Transaction.INVITE, msg.call_id, dst=msg.src, target=dialog.uac,
                    copy_index=msg.copy_index, redundant=msg.redundant,
                )
            return

        if dialog is None or dialog.rejected:
            self._stale(msg)
            return
        if kind is MessageKind.ACK:
            if self.disarm(msg.call_id, MessageKind.OK, Transaction.INVITE) is None:
                self._stale(msg)
            return
        if kind is MessageKind.BYE:
            self.send(
                MessageKind.OK, Transaction.BYE, msg.call_id, dst=dialog.upstream, target=dialog.uac,
                copy_index=msg.copy_index, redundant=msg.redundant,
            )
            return
        self._stale(msg)

    # user agent client -------------------------------------------------

    @property
    def route(self) -> str:
        return self.network.routes[self.id]

    def start_call(self, ctx: "CallContext") -> None:
        session = ctx.session
        if self.is_suppressed(self.route) or self.controller.admit_forward(self, None, self.route).rejected:
            self.network.metrics.local_rejections += 1
            session.advance(SessionEvent.START, self.clock)
            self._apply(ctx, SessionEvent.UNAVAILABLE)
            return
        ctx.window_open = True
        self._apply(ctx, SessionEvent.START)
        self.network.engine.schedule_in(
            self.network.setup_timeout, EventKind.SESSION_TIMEOUT, self._on_setup_deadline, ctx
        )

    def _on_setup_deadline(self, event: SimEvent) -> None:
        ctx = event.data
        if ctx.session.state in (SessionState.INVITE_SENT, SessionState.PROCEEDING, SessionState.RINGING, SessionState.OK_RECEIVED):
            self._timeout(ctx)

    def _on_hangup(self, event: SimEvent) -> None:
        self._apply(event.data, SessionEvent.HANGUP)

    def _timeout(self, ctx: "CallContext") -> None:
        self._apply(ctx, SessionEvent.LOSS_TIMEOUT if ctx.had_drop else SessionEvent.TIMEOUT)

    def _release_uac_window(self, ctx: "CallContext") -> None:
        if ctx.window_open:
            ctx.window_open = False
            self.controller.on_answered(self, self.route)

    def _apply(self, ctx: "CallContext", event: SessionEvent, msg: Optional[SipMessage] = None) -> SessionStep:
        session: CallSession = ctx.session
        step = session.advance(event, self.clock)
        if step.stale:
            self.network.metrics.stale_messages += 1
            return step

        answered = event not in (SessionEvent.TIMEOUT, SessionEvent.LOSS_TIMEOUT)
        for kind, transaction in step.disarm:
            self.disarm(session.call_id, kind, transaction, answered)
        for kind, transaction in step.emit:
            copy_index, redundant = 0, False
            if kind is MessageKind.ACK and msg is not None and event is SessionEvent.OK_INVITE:
                # acknowledging a repeated Ok200
                copy_index, redundant = msg.copy_index, msg.redundant
            target = self.route if kind is MessageKind.INVITE else ctx.uas
            sent = self.send(
                kind, transaction, session.call_id, dst=self.route, target=target,
                copy_index=copy_index, redundant=redundant,
            )
            if (kind, transaction) in step.arm:
                self.arm(sent)

        if step.outcome is not None:
            self._release_uac_window(ctx)
            self.network.call_ended(ctx)
        return step

    def _process_uac(self, msg: SipMessage) -> None:
        ctx = self.network.calls.get(msg.call_id)
        if ctx is None or ctx.uac != self.id:
            self._stale(msg)
            return
        kind = msg.kind

        if kind is MessageKind.TRYING:
            self._apply(ctx, SessionEvent.TRYING, msg)
        elif kind is MessageKind.RINGING:
            self._apply(ctx, SessionEvent.RINGING, msg)
        elif kind is MessageKind.UNAVAILABLE:
            self.handle_503(msg.src, msg.retry_after)
            self._apply(ctx, SessionEvent.UNAVAILABLE, msg)
        elif kind is MessageKind.OK and msg.transaction is Transaction.INVITE:
            if ctx.uas is None:
                ctx.uas = msg.origin
            step = self._apply(ctx, SessionEvent.OK_INVITE, msg)
            if step.state is SessionState.OK_RECEIVED:
                self._release_uac_window(ctx)
                step = self._apply(ctx, SessionEvent.ANSWER)
                if step.state is SessionState.ESTABLISHED:
                    hold = self.network.hold
                    if hold > 0:
                        self.network.engine.schedule_in(hold, EventKind.HANGUP, self._on_hangup, ctx)
                    else:
                        self._apply(ctx, SessionEvent.HANGUP)
        elif kind is MessageKind.OK:
            self._apply(ctx, SessionEvent.OK_BYE, msg)
        else:
            self._stale(msg)

    def abandon(self, ctx: "CallContext") -> None:
        """Finalise a session still open when the run stops draining"""
        self._apply(ctx, SessionEvent.TIMEOUT)
