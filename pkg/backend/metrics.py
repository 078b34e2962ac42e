"""
Metrics - call and message accounting, time series and CSV reports
"""

import csv
import logging
import os
from dataclasses import astuple, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ParameterError, SimulationError
from .sip import CallOutcome, CallSession, RetransmissionClass, SipMessage

logger = logging.getLogger(__name__)

SERIES_COLUMNS = ("t", "server_id", "q", "q_r", "rho", "served_cum", "rejected_cum", "dropped_cum")
CALLS_COLUMNS = ("call_id", "start_t", "end_t", "outcome", "setup_delay")
SUMMARY_COLUMNS = ("metric", "value")
RETRANSMISSION_COLUMNS = ("t", "node", "dst", "kind", "call_id", "copy_index", "class")
FORWARDING_COLUMNS = ("t", "src", "dst", "kind", "call_id", "copy_index")
DISPATCH_COLUMNS = ("t", "call_id", "algorithm", "server", "metric")
CONTROLLER_COLUMNS = ("t", "node", "variable", "value")

SUPPRESSED = "Suppressed"


@dataclass(frozen=True)
class SeriesSample:
    t: float
    server_id: str
    q: int
    q_r: int
    rho: float
    served_cum: int
    rejected_cum: int
    dropped_cum: int
    arrivals_cum: int = field(default=0, compare=False)

    def row(self) -> Tuple:
        return astuple(self)[: len(SERIES_COLUMNS)]


@dataclass(frozen=True)
class CallRecord:
    call_id: int
    start_t: float
    end_t: Optional[float]
    outcome: Optional[CallOutcome]
    setup_delay: Optional[float]

    def row(self) -> Tuple:
        outcome = self.outcome.value if self.outcome is not None else None
        return (self.call_id, self.start_t, self.end_t, outcome, self.setup_delay)


@dataclass(frozen=True)
class RetransmissionRecord:
    t: float
    node: str
    dst: str
    kind: str
    call_id: int
    copy_index: int
    classification: str


@dataclass(frozen=True)
class ForwardRecord:
    t: float
    src: str
    dst: str
    kind: str
    call_id: int
    copy_index: int


@dataclass(frozen=True)
class ControllerRecord:
    t: float
    node: str
    variable: str
    value: float


def compute_goodput(completed: int, window: float) -> float:
    if not window > 0:
        raise ParameterError(f"goodput window must be positive, got {window}")
    return completed / window


def blocking_probability(offered: int, blocked: int) -> Optional[float]:
    if not offered >= blocked >= 0:
        raise ParameterError(f"need offered >= blocked >= 0, got ({offered}, {blocked})")
    if offered == 0:
        return None
    return blocked / offered


def goodput_series(end_times: Sequence[float], window: float, horizon: float) -> List[float]:
    """Completed calls per second in consecutive windows; late completions land in the last one"""
    if not window > 0:
        raise ParameterError(f"goodput window must be positive, got {window}")
    bins = max(1, int(np.ceil(horizon / window - 1e-9)))
    edges = np.arange(bins + 1) * window
    times = np.clip(np.asarray(end_times, dtype=float), 0.0, edges[-1])
    counts, _ = np.histogram(times, bins=edges)
    return [float(count) / window for count in counts]


def summarize_delays(delays: Iterable[float]) -> Tuple[Optional[float], Optional[float]]:
    values = np.asarray(list(delays), dtype=float)
    if values.size == 0:
        return None, None
    return float(values.mean()), float(np.percentile(values, 95))


class MetricsCollector:
    """Accumulates everything a run reports; owned by one simulation"""

    def __init__(self, keep_forwarding: bool = True):
        self.keep_forwarding = keep_forwarding
        self.series: List[SeriesSample] = []
        self.calls: Dict[int, CallRecord] = {}
        self.retransmissions: List[RetransmissionRecord] = []
        self.forwarding: List[ForwardRecord] = []
        self.controllers: List[ControllerRecord] = []
        self.messages_transmitted = 0
        self.redundant_responses = 0
        self.protocol_errors = 0
        self.stale_messages = 0
        self.local_rejections = 0
        self.calls_offered = 0

    def transmitted(self, msg: SipMessage, now: float) -> None:
        self.messages_transmitted += 1
        if self.keep_forwarding:
            self.forwarding.append(ForwardRecord(now, msg.src, msg.dst, msg.kind.value, msg.call_id, msg.copy_index))
        if msg.redundant and not msg.kind.is_request:
            self.redundant_responses += 1

    def retransmission(self, msg: SipMessage, now: float, classification: Optional[RetransmissionClass]) -> None:
        label = classification.value if classification is not None else SUPPRESSED
        self.retransmissions.append(
            RetransmissionRecord(now, msg.src, msg.dst, msg.kind.value, msg.call_id, msg.copy_index, label)
        )

    def controller(self, now: float, node: str, variable: str, value: float) -> None:
        self.controllers.append(ControllerRecord(now, node, variable, value))

    def call_offered(self) -> None:
        self.calls_offered += 1

    def call_finished(self, session: CallSession) -> None:
        self.calls[session.call_id] = CallRecord(
            session.call_id, session.started_at, session.ended_at, session.outcome, session.setup_delay
        )

    def retransmission_counts(self) -> Dict[str, int]:
        counts = {RetransmissionClass.NON_REDUNDANT.value: 0, RetransmissionClass.REDUNDANT.value: 0, SUPPRESSED: 0}
        for record in self.retransmissions:
            counts[record.classification] += 1
        return counts

    def report(self, duration: float, warmup: float, dispatches: Sequence = ()) -> "MetricsReport":
        calls = [self.calls[call_id] for call_id in sorted(self.calls)]
        outcomes = {outcome: 0 for outcome in CallOutcome}
        for record in calls:
            if record.outcome is not None:
                outcomes[record.outcome] += 1
        completed = outcomes[CallOutcome.SUCCESS]
        blocked = outcomes[CallOutcome.REJECTED] + outcomes[CallOutcome.TIMED_OUT] + outcomes[CallOutcome.DROPPED]
        offered = len(calls)

        steady_window = duration - warmup
        steady = sum(
            1
            for record in calls
            if record.outcome is CallOutcome.SUCCESS and warmup <= record.end_t <= duration
        )
        counts = self.retransmission_counts()
        emitted = counts[RetransmissionClass.REDUNDANT.value] + counts[RetransmissionClass.NON_REDUNDANT.value]
        mean_delay, p95_delay = summarize_delays(
            record.setup_delay for record in calls if record.outcome is CallOutcome.SUCCESS and record.setup_delay is not None
        )

        summary: Dict[str, Optional[float]] = {
            "offered": offered,
            "completed": completed,
            "blocked": blocked,
            "rejected": outcomes[CallOutcome.REJECTED],
            "timed_out": outcomes[CallOutcome.TIMED_OUT],
            "dropped": outcomes[CallOutcome.DROPPED],
            "goodput": compute_goodput(completed, duration),
            "steady_goodput": compute_goodput(steady, steady_window) if steady_window > 0 else None,
            "blocking_probability": blocking_probability(offered, blocked),
            "retransmissions": emitted,
            "retransmissions_non_redundant": counts[RetransmissionClass.NON_REDUNDANT.value],
            "retransmissions_redundant": counts[RetransmissionClass.REDUNDANT.value],
            "retransmissions_suppressed": counts[SUPPRESSED],
            "redundant_ratio": counts[RetransmissionClass.REDUNDANT.value] / emitted if emitted else None,
            "redundant_responses": self.redundant_responses,
            "setup_delay_mean": mean_delay,
            "setup_delay_p95": p95_delay,
            "messages_transmitted": self.messages_transmitted,
            "message_throughput": self.messages_transmitted / duration,
            "local_rejections": self.local_rejections,
            "stale_messages": self.stale_messages,
            "protocol_errors": self.protocol_errors,
        }
        return MetricsReport(
            summary=summary,
            series=list(self.series),
            calls=calls,
            retransmissions=list(self.retransmissions),
            forwarding=list(self.forwarding),
            dispatches=list(dispatches),
            controllers=list(self.controllers),
        )


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, tuple):
        return " ".join(repr(v) for v in value)
    return value


def write_csv(path: str, columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_cell(value) for value in row])
    except OSError as exc:
        raise SimulationError(f"cannot write {path}: {exc.strerror}") from exc
    return path


@dataclass
class MetricsReport:
    summary: Dict[str, Optional[float]]
    series: List[SeriesSample] = field(default_factory=list)
    calls: List[CallRecord] = field(default_factory=list)
    retransmissions: List[RetransmissionRecord] = field(default_factory=list)
    forwarding: List[ForwardRecord] = field(default_factory=list)
    dispatches: List = field(default_factory=list)
    controllers: List[ControllerRecord] = field(default_factory=list)

    def series_for(self, server_id: str) -> List[SeriesSample]:
        return [sample for sample in self.series if sample.server_id == server_id]

    def write(self, out_dir: str) -> List[str]:
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as exc:
            raise SimulationError(f"cannot create output directory {out_dir}: {exc.strerror}") from exc

        def target(name: str) -> str:
            return os.path.join(out_dir, name)

        return [
            write_csv(target("series.csv"), SERIES_COLUMNS, (sample.row() for sample in self.series)),
            write_csv(target("calls.csv"), CALLS_COLUMNS, (record.row() for record in self.calls)),
            write_csv(target("summary.csv"), SUMMARY_COLUMNS, self.summary.items()),
            write_csv(target("retransmissions.csv"), RETRANSMISSION_COLUMNS, (astuple(r) for r in self.retransmissions)),
            write_csv(target("forwarding.csv"), FORWARDING_COLUMNS, (astuple(r) for r in self.forwarding)),
            write_csv(target("dispatches.csv"), DISPATCH_COLUMNS, (astuple(r) for r in self.dispatches)),
            write_csv(target("controllers.csv"), CONTROLLER_COLUMNS, (astuple(r) for r in self.controllers)),
        ]
