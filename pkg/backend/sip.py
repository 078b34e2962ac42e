"""
SIP core - message and session semantics of the signalling flow

Covers the Invite / 100 Trying / 180 Ringing / 200 OK / ACK / BYE exchange of one
call, the two retransmission rules (hop-by-hop for Invite, end-to-end for Ok200 and
Bye) and the redundant / non-redundant classification of retransmitted copies.
Everything here is a plain value type or a pure function; nodes in ``server.py``
drive them.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

from .errors import ClassificationError, ConsistencyError, ParameterError


class MessageKind(str, Enum):
    INVITE = "Invite"
    TRYING = "Trying100"
    RINGING = "Ring180"
    OK = "Ok200"
    ACK = "Ack"
    BYE = "Bye"
    UNAVAILABLE = "Unavailable503"

    @property
    def is_request(self) -> bool:
        return self in (MessageKind.INVITE, MessageKind.ACK, MessageKind.BYE)


class Transaction(str, Enum):
    """Which request a message belongs to (an Ok200 answers either one)"""

    INVITE = "INVITE"
    BYE = "BYE"


class TimerKind(str, Enum):
    HOP_BY_HOP = "HopByHop"
    END_TO_END = "EndToEnd"


class SessionState(str, Enum):
    IDLE = "Idle"
    INVITE_SENT = "InviteSent"
    PROCEEDING = "Proceeding"
    RINGING = "Ringing"
    OK_RECEIVED = "OkReceived"
    ESTABLISHED = "Established"
    BYE_SENT = "ByeSent"
    COMPLETED = "Completed"
    FAILED = "Failed"

    @property
    def is_terminal(self) -> bool:
        return self in (SessionState.COMPLETED, SessionState.FAILED)


class CallOutcome(str, Enum):
    SUCCESS = "Success"
    REJECTED = "Rejected"
    TIMED_OUT = "TimedOut"
    DROPPED = "Dropped"


class RetransmissionClass(str, Enum):
    NON_REDUNDANT = "NonRedundant"
    REDUNDANT = "Redundant"


class DeliveryStatus(str, Enum):
    IN_FLIGHT = "in_flight"
    DELIVERED = "delivered"
    LOST = "lost"


MAX_RETRANSMISSIONS = {TimerKind.HOP_BY_HOP: 6, TimerKind.END_TO_END: 10}

# (message kind, transaction) pairs that carry a retransmission timer
GUARDED = {
    (MessageKind.INVITE, Transaction.INVITE): TimerKind.HOP_BY_HOP,
    (MessageKind.OK, Transaction.INVITE): TimerKind.END_TO_END,
    (MessageKind.BYE, Transaction.BYE): TimerKind.END_TO_END,
}

DeliveryKey = Tuple[int, MessageKind, Transaction, str, str]


@dataclass(slots=True)
class SipMessage:
    """One transmitted message instance.

    ``src``/``dst`` name the link the instance travels on; ``origin``/``target``
    name the endpoints of the transaction it belongs to. They coincide for
    hop-by-hop messages and differ for end-to-end ones that proxies relay.
    """

    instance_id: int
    call_id: int
    kind: MessageKind
    transaction: Transaction
    src: str
    dst: str
    origin: str
    target: str
    copy_index: int = 0
    created_at: float = 0.0
    redundant: bool = False
    retry_after: Optional[float] = None
    local: bool = False

    @property
    def hop(self) -> Tuple[str, str]:
        return (self.src, self.dst)

    @property
    def is_retransmission(self) -> bool:
        return self.copy_index > 0

    @property
    def delivery_key(self) -> DeliveryKey:
        return (self.call_id, self.kind, self.transaction, self.origin, self.target)

    @property
    def timer_kind(self) -> Optional[TimerKind]:
        return GUARDED.get((self.kind, self.transaction))


@dataclass(frozen=True)
class RetransmissionSchedule:
    offsets: Tuple[float, ...]
    timeout: float


def retransmission_schedule(kind: TimerKind, t1: float = 0.5, t2: float = 4.0) -> RetransmissionSchedule:
    """Send offsets of every retransmission plus the transaction timeout.

    Intervals double from T1; end-to-end intervals are capped at T2. Offsets at or
    beyond the 64*T1 timeout are dropped.
    """
    if not t1 > 0:
        raise ParameterError(f"T1 must be positive, got {t1}")
    if t2 < t1:
        raise ParameterError(f"T2 ({t2}) must not be smaller than T1 ({t1})")

    timeout = 64 * t1
    cap = t2 if kind is TimerKind.END_TO_END else float("inf")
    offsets: List[float] = []
    elapsed = 0.0
    for k in range(MAX_RETRANSMISSIONS[kind]):
        elapsed += min((2 ** k) * t1, cap)
        if elapsed >= timeout:
            break
        offsets.append(elapsed)
    return RetransmissionSchedule(offsets=tuple(offsets), timeout=timeout)


@dataclass(eq=False)
class RetransmissionTimer:
    """Guards one original message until its matching response arrives"""

    message: SipMessage
    kind: TimerKind
    schedule: RetransmissionSchedule
    first_sent_at: float
    retransmissions_sent: int = 0
    armed: bool = True
    event: object = None

    @property
    def for_message(self) -> int:
        return self.message.instance_id

    @property
    def timeout_at(self) -> float:
        return self.first_sent_at + self.schedule.timeout

    @property
    def exhausted(self) -> bool:
        return self.retransmissions_sent >= len(self.schedule.offsets)

    @property
    def fires_at(self) -> float:
        if self.exhausted:
            return self.timeout_at
        return self.first_sent_at + self.schedule.offsets[self.retransmissions_sent]

    def disarm(self) -> None:
        if not self.armed:
            raise ConsistencyError(f"timer for message {self.for_message} disarmed twice")
        self.armed = False


class DeliveryLog:
    """Per-copy fate of every timer-guarded message, keyed by transaction endpoints"""

    def __init__(self):
        self._records: Dict[DeliveryKey, List[Optional[DeliveryStatus]]] = {}

    def record_sent(self, msg: SipMessage) -> None:
        slots = self._records.setdefault(msg.delivery_key, [])
        while len(slots) <= msg.copy_index:
            slots.append(None)
        slots[msg.copy_index] = DeliveryStatus.IN_FLIGHT

    def mark(self, msg: SipMessage, status: DeliveryStatus) -> None:
        slots = self._records.get(msg.delivery_key)
        if slots is None or msg.copy_index >= len(slots) or slots[msg.copy_index] is None:
            return
        # a copy lost on one leg stays lost
        if slots[msg.copy_index] is DeliveryStatus.IN_FLIGHT:
            slots[msg.copy_index] = status

    def statuses(self, key: DeliveryKey) -> List[Optional[DeliveryStatus]]:
        return list(self._records.get(key, []))


def classify_retransmission(copy: SipMessage, delivery_log: DeliveryLog) -> RetransmissionClass:
    """NonRedundant iff every earlier copy of the same message was lost before receipt"""
    if copy.copy_index == 0:
        raise ClassificationError(
            f"message {copy.instance_id} of call {copy.call_id} is an original, not a retransmission"
        )
    earlier = delivery_log.statuses(copy.delivery_key)[: copy.copy_index]
    sent = [status for status in earlier if status is not None]
    if all(status is DeliveryStatus.LOST for status in sent):
        return RetransmissionClass.NON_REDUNDANT
    return RetransmissionClass.REDUNDANT


def response_class(request: SipMessage) -> RetransmissionClass:
    """A response inherits redundancy from the request copy it answers"""
    return RetransmissionClass.REDUNDANT if request.redundant else RetransmissionClass.NON_REDUNDANT


class SessionEvent(str, Enum):
    START = "start"
    TRYING = "trying"
    RINGING = "ringing"
    OK_INVITE = "ok_invite"
    ANSWER = "answer"
    HANGUP = "hangup"
    OK_BYE = "ok_bye"
    UNAVAILABLE = "unavailable"
    TIMEOUT = "timeout"
    LOSS_TIMEOUT = "loss_timeout"


Emission = Tuple[MessageKind, Transaction]

INVITE = (MessageKind.INVITE, Transaction.INVITE)
ACK = (MessageKind.ACK, Transaction.INVITE)
BYE = (MessageKind.BYE, Transaction.BYE)


@dataclass
class SessionStep:
    state: SessionState
    emit: List[Emission] = field(default_factory=list)
    arm: List[Emission] = field(default_factory=list)
    disarm: List[Emission] = field(default_factory=list)
    outcome: Optional[CallOutcome] = None
    stale: bool = False


@dataclass
class CallSession:
    """Caller-side view of one call"""

    call_id: int
    uac: str
    started_at: float
    teardown: bool = True
    state: SessionState = SessionState.IDLE
    outcome: Optional[CallOutcome] = None
    established_at: Optional[float] = None
    ended_at: Optional[float] = None
    stale_count: int = 0

    @property
    def setup_delay(self) -> Optional[float]:
        if self.established_at is None:
            return None
        return self.established_at - self.started_at

    def advance(self, event: SessionEvent, now: float) -> SessionStep:
        step = advance_session(self, event)
        if step.stale:
            self.stale_count += 1
            return step
        if step.state is SessionState.ESTABLISHED and self.established_at is None:
            self.established_at = now
        if step.state is SessionState.COMPLETED and self.established_at is None:
            self.established_at = now
        self.state = step.state
        if step.outcome is not None:
            self.outcome = step.outcome
            self.ended_at = now
        return step


_PRE_ANSWER = (SessionState.INVITE_SENT, SessionState.PROCEEDING, SessionState.RINGING)
_ANSWERED = (SessionState.ESTABLISHED, SessionState.BYE_SENT, SessionState.COMPLETED)


def advance_session(session: CallSession, event: SessionEvent) -> SessionStep:
    """Next state and side effects for ``event``; does not mutate ``session``"""
    state = session.state
    stale = SessionStep(state=state, stale=True)

    if event is SessionEvent.START:
        if state is not SessionState.IDLE:
            return stale
        return SessionStep(SessionState.INVITE_SENT, emit=[INVITE], arm=[INVITE])

    if event is SessionEvent.TRYING:
        if state is not SessionState.INVITE_SENT:
            return stale
        return SessionStep(SessionState.PROCEEDING, disarm=[INVITE])

    if event is SessionEvent.RINGING:
        if state not in _PRE_ANSWER or state is SessionState.RINGING:
            return stale
        disarm = [INVITE] if state is SessionState.INVITE_SENT else []
        return SessionStep(SessionState.RINGING, disarm=disarm)

    if event is SessionEvent.OK_INVITE:
        if state in _PRE_ANSWER:
            disarm = [INVITE] if state is SessionState.INVITE_SENT else []
            return SessionStep(SessionState.OK_RECEIVED, disarm=disarm)
        if state in _ANSWERED:
            # the Ack went missing or the Ok copy is late: acknowledge again
            return SessionStep(state, emit=[ACK])
        return stale

    if event is SessionEvent.ANSWER:
        if state is not SessionState.OK_RECEIVED:
            return stale
        if not session.teardown:
            return SessionStep(SessionState.COMPLETED, emit=[ACK], outcome=CallOutcome.SUCCESS)
        return SessionStep(SessionState.ESTABLISHED, emit=[ACK])

    if event is SessionEvent.HANGUP:
        if state is not SessionState.ESTABLISHED:
            return stale
        return SessionStep(SessionState.BYE_SENT, emit=[BYE], arm=[BYE])

    if event is SessionEvent.OK_BYE:
        if state is not SessionState.BYE_SENT:
            return stale
        return SessionStep(SessionState.COMPLETED, disarm=[BYE], outcome=CallOutcome.SUCCESS)

    if event is SessionEvent.UNAVAILABLE:
        if state not in _PRE_ANSWER:
            return stale
        disarm = [INVITE] if state is SessionState.INVITE_SENT else []
        return SessionStep(SessionState.FAILED, disarm=disarm, outcome=CallOutcome.REJECTED)

    if event in (SessionEvent.TIMEOUT, SessionEvent.LOSS_TIMEOUT):
        if state.is_terminal or state is SessionState.IDLE:
            return stale
        outcome = CallOutcome.DROPPED if event is SessionEvent.LOSS_TIMEOUT else CallOutcome.TIMED_OUT
        return SessionStep(SessionState.FAILED, disarm=[INVITE, BYE], outcome=outcome)

    return stale
