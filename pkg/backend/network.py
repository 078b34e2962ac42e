"""
Network - wires a scenario into servers and links, runs it and reports

Topology: ``uac1..uacN -> p1 [-> p2] -> uas`` with an optional ``uas-alt`` as
second route of the last proxy, or ``... -> c1..cN`` behind a balancer hosted by
the last proxy. Links are lossy (Bernoulli per message) with a fixed delay.
"""

import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .balancer import Balancer
from .config import ScenarioConfig, with_overrides
from .controllers import NoParams, OverloadController, RateTargetController, build_controller
from .engine import Bernoulli, Engine, EventKind, RandomStreams, SimEvent
from .errors import SimulationError, WorkloadMismatchError
from .metrics import MetricsCollector, MetricsReport, SeriesSample, write_csv
from .server import EnqueueResult, Role, SipServer
from .sip import CallSession, DeliveryLog, DeliveryStatus, SipMessage, Transaction
from .workload import CapacityProfile, change_points, generate_calls, slowdowns_for

logger = logging.getLogger(__name__)

LINK_STREAM = "link"
# drain is checked in slices so a finished run stops early
DRAIN_SLICE = 1.0


@dataclass
class CallContext:
    call_id: int
    uac: str
    session: CallSession
    uas: Optional[str] = None
    had_drop: bool = False
    window_open: bool = False


class SipNetwork:
    def __init__(self, cfg: ScenarioConfig, trace: bool = False, keep_forwarding: bool = True):
        self.cfg = cfg
        self.engine = Engine(trace=trace)
        self.streams = RandomStreams(cfg.run.seed)
        self.delivery_log = DeliveryLog()
        self.metrics = MetricsCollector(keep_forwarding=keep_forwarding)
        self.t1 = cfg.timers.t1
        self.t2 = cfg.timers.t2
        self.setup_timeout = cfg.call.setup_timeout
        self.hold = cfg.call.hold
        self.calls: Dict[int, CallContext] = {}
        self.open_calls: Dict[int, CallContext] = {}
        self.nodes: Dict[str, SipServer] = {}
        self.routes: Dict[str, str] = {}
        self.upstream: Dict[str, List[str]] = {}
        self.cluster_ids: Tuple[str, ...] = ()
        self.balancer: Optional[Balancer] = None
        self._loss = Bernoulli(cfg.link.loss)
        self._instance_ids = itertools.count(1)
        self._call_ids = itertools.count(1)
        self._arrivals = generate_calls(cfg.workload, self.streams)
        self._build()

    # ------------------------------------------------------------ topology

    def _controller(self, role: Role, finite: bool) -> OverloadController:
        cfg = self.cfg.controller
        controller = build_controller(cfg.name, cfg.params, self.t1)
        if finite:
            return controller
        # callers take part in push-back only, as the senders that thin new calls
        if role is Role.UAC and isinstance(controller, RateTargetController):
            return controller
        return OverloadController(NoParams(), self.t1)

    def _add(self, node_id: str, role: Role, mu: Optional[float], buffer: Optional[int], cluster_member: bool = False):
        server_cfg = self.cfg.server
        capacity = CapacityProfile(mu, slowdowns_for(self.cfg.workload, node_id, cluster_member))
        controller = self._controller(role, mu is not None)
        self.nodes[node_id] = SipServer(
            node_id,
            role,
            self,
            capacity,
            controller,
            buffer_limit=buffer if mu is not None else None,
            service=server_cfg.service,
            reject_cost=server_cfg.reject_cost,
            retry_after=server_cfg.retry_after,
            occupancy_window=server_cfg.occupancy_window,
        )

    def _build(self) -> None:
        cfg = self.cfg
        server_cfg = cfg.server
        uacs = [f"uac{i + 1}" for i in range(cfg.topology.uacs)]
        proxies = [f"p{i + 1}" for i in range(cfg.topology.proxies)]

        for uac in uacs:
            self._add(uac, Role.UAC, None, None)
            self.routes[uac] = proxies[0]
        for proxy in proxies:
            self._add(proxy, Role.PROXY, server_cfg.mu_for(proxy), server_cfg.buffer_for(proxy))
        self.upstream[proxies[0]] = list(uacs)
        for previous, proxy in zip(proxies, proxies[1:]):
            self.routes[previous] = proxy
            self.upstream[proxy] = [previous]

        last = proxies[-1]
        if cfg.topology.cluster:
            self.cluster_ids = tuple(f"c{i + 1}" for i in range(cfg.topology.cluster))
            for member in self.cluster_ids:
                self._add(member, Role.UAS, server_cfg.mu_for("cluster"), server_cfg.buffer_for("cluster"), cluster_member=True)
                self.upstream[member] = [last]
            costs = {Transaction.INVITE: cfg.balancer.invite_cost, Transaction.BYE: cfg.balancer.bye_cost}
            self.balancer = Balancer(cfg.balancer.name, list(self.cluster_ids), costs)
            self.routes[last] = "cluster"
        else:
            self._add("uas", Role.UAS, server_cfg.mu_for("uas"), server_cfg.buffer_for("uas"))
            self.upstream["uas"] = [last]
            self.routes[last] = "uas"
        if cfg.topology.alternate:
            self._add("uas-alt", Role.UAS, server_cfg.mu_for("uas-alt"), server_cfg.buffer_for("uas-alt"))
            self.upstream["uas-alt"] = [last]

        self.uac_ids = uacs
        self.last_proxy = last

    def route_new_call(self, node: SipServer, call_id: int) -> str:
        route = self.routes[node.id]
        if route == "cluster":
            return self.balancer.dispatch(call_id, self.engine.clock)
        return route

    def alternate_route(self, node_id: str) -> Optional[str]:
        if self.cfg.topology.alternate and node_id == self.last_proxy:
            return "uas-alt"
        return None

    def publish_rate_target(self, node_id: str, target: float) -> None:
        now = self.engine.clock
        for sender in self.upstream.get(node_id, ()):
            self.nodes[sender].controller.set_rate_target(node_id, target, now)

    # ------------------------------------------------------------ links

    def new_message(self, **fields: Any) -> SipMessage:
        return SipMessage(instance_id=next(self._instance_ids), created_at=self.engine.clock, **fields)

    def transmit(self, msg: SipMessage) -> None:
        self.metrics.transmitted(msg, self.engine.clock)
        guarded = msg.timer_kind is not None
        if guarded and msg.src == msg.origin:
            self.delivery_log.record_sent(msg)
        if self.streams.draw(LINK_STREAM, self._loss):
            if guarded:
                self.delivery_log.mark(msg, DeliveryStatus.LOST)
            return
        self.engine.schedule_in(self.cfg.link.delay, EventKind.MESSAGE_ARRIVAL, self._arrive, msg)

    def _arrive(self, event: SimEvent) -> None:
        msg: SipMessage = event.data
        result = self.nodes[msg.dst].receive(msg)
        guarded = msg.timer_kind is not None
        if result is EnqueueResult.DROPPED:
            ctx = self.calls.get(msg.call_id)
            if ctx is not None:
                ctx.had_drop = True
            if guarded:
                self.delivery_log.mark(msg, DeliveryStatus.LOST)
        elif guarded and msg.dst == msg.target:
            self.delivery_log.mark(msg, DeliveryStatus.DELIVERED)

    # ------------------------------------------------------------ calls

    def _schedule_next_call(self) -> None:
        t = next(self._arrivals, None)
        if t is not None and t < self.cfg.run.duration:
            self.engine.schedule(t, EventKind.CALL_ARRIVAL, self._on_call_arrival)

    def _on_call_arrival(self, event: SimEvent) -> None:
        call_id = next(self._call_ids)
        uac = self.uac_ids[(call_id - 1) % len(self.uac_ids)]
        ctx = CallContext(call_id, uac, CallSession(call_id, uac, self.engine.clock, teardown=self.cfg.call.teardown))
        self.calls[call_id] = ctx
        self.open_calls[call_id] = ctx
        self.metrics.call_offered()
        self.nodes[uac].start_call(ctx)
        self._schedule_next_call()

    def call_ended(self, ctx: CallContext) -> None:
        self.metrics.call_finished(ctx.session)
        self.open_calls.pop(ctx.call_id, None)
        if self.balancer is not None:
            self.balancer.end_call(ctx.call_id)

    # ------------------------------------------------------------ periodic events

    @property
    def finite_nodes(self) -> List[SipServer]:
        return [node for node in self.nodes.values() if not node.capacity.unlimited]

    def _on_control_tick(self, event: SimEvent) -> None:
        now = self.engine.clock
        dt = self.cfg.run.control_tick
        for node in self.finite_nodes:
            node.controller.on_tick(node, now, dt)
        k = event.data + 1
        if k * dt <= self._horizon + 1e-9:
            self.engine.schedule(k * dt, EventKind.CONTROL_TICK, self._on_control_tick, k)

    def _on_sample_tick(self, event: SimEvent) -> None:
        now = self.engine.clock
        for node in self.finite_nodes:
            self.metrics.series.append(
                SeriesSample(
                    t=now,
                    server_id=node.id,
                    q=node.queue_length,
                    q_r=node.timer_count,
                    rho=node.occupancy(node.occupancy_window),
                    served_cum=node.served,
                    rejected_cum=node.rejected,
                    dropped_cum=node.dropped,
                    arrivals_cum=node.arrivals,
                )
            )
        k = event.data + 1
        interval = self.cfg.run.sample_interval
        if k * interval <= self.cfg.run.duration + 1e-9:
            self.engine.schedule(k * interval, EventKind.SAMPLE_TICK, self._on_sample_tick, k)

    def _on_workload_change(self, event: SimEvent) -> None:
        logger.debug("t=%.3f workload change: %s", self.engine.clock, event.data)

    # ------------------------------------------------------------ running

    @property
    def _horizon(self) -> float:
        return self.cfg.run.duration + self.setup_timeout + 64 * self.t1 + self.hold

    def run(self) -> MetricsReport:
        cfg = self.cfg
        duration = cfg.run.duration
        logger.info(
            "run start: seed=%d duration=%.1fs nodes=%s controller=%s",
            cfg.run.seed, duration, ",".join(self.nodes), cfg.controller.name,
        )
        for t, what in change_points(cfg.workload):
            if t <= duration:
                self.engine.schedule(t, EventKind.WORKLOAD_CHANGE, self._on_workload_change, what)
        self.engine.schedule(cfg.run.control_tick, EventKind.CONTROL_TICK, self._on_control_tick, 1)
        self.engine.schedule(cfg.run.sample_interval, EventKind.SAMPLE_TICK, self._on_sample_tick, 1)
        self._schedule_next_call()

        self.engine.run_until(duration)
        cap = self._horizon
        while self.open_calls and self.engine.clock < cap:
            self.engine.run_until(min(cap, self.engine.clock + DRAIN_SLICE))

        if self.open_calls:
            logger.warning("%d sessions still open at t=%.1f, finalised as TimedOut", len(self.open_calls), cap)
            for ctx in list(self.open_calls.values()):
                self.nodes[ctx.uac].abandon(ctx)

        report = self.metrics.report(duration, cfg.run.warmup, self.balancer.log if self.balancer else ())
        logger.info(
            "run finish: offered=%s completed=%s goodput=%.3f/s events=%d",
            report.summary["offered"], report.summary["completed"], report.summary["goodput"], self.engine.processed,
        )
        return report


def run_scenario(
    cfg: ScenarioConfig,
    out: Optional[str] = None,
    write: bool = True,
    keep_forwarding: bool = True,
) -> MetricsReport:
    """Simulate ``cfg``; with ``write`` the CSVs (and fluid.csv) land in ``out`` or ``run.out``.

    The report always carries the forwarding trace unless ``keep_forwarding`` is off.
    """
    network = SipNetwork(cfg, keep_forwarding=keep_forwarding)
    report = network.run()
    if write:
        out_dir = out or cfg.run.out
        report.write(out_dir)
        if cfg.fluid.enabled:
            from .fluid import run_fluid

            run_fluid(cfg).resample(cfg.run.sample_interval).write(os.path.join(out_dir, "fluid.csv"))
    return report


# ---------------------------------------------------------------- comparison

COMPARISON_METRICS = ("blocking_probability", "redundant_ratio", "setup_delay_mean")


def _first_difference(a: Any, b: Any, prefix: str = "") -> Optional[str]:
    if isinstance(a, dict) and isinstance(b, dict):
        for key in sorted(set(a) | set(b)):
            path = f"{prefix}.{key}" if prefix else str(key)
            found = _first_difference(a.get(key), b.get(key), path)
            if found is not None:
                return found
        return None
    return None if a == b else prefix


def _signature(cfg: ScenarioConfig) -> Dict[str, Any]:
    signature = cfg.workload_signature()
    signature["run"].pop("seed", None)
    return signature


def label_for(cfg: ScenarioConfig) -> str:
    if cfg.topology.cluster:
        return f"{cfg.controller.name}/{cfg.balancer.name}"
    return cfg.controller.name


@dataclass
class ComparisonRow:
    config: str
    goodput: List[float]
    means: Dict[str, Optional[float]] = field(default_factory=dict)

    @property
    def goodput_mean(self) -> float:
        return float(np.mean(self.goodput))


def _summary(cfg: ScenarioConfig) -> Dict[str, Optional[float]]:
    return run_scenario(cfg, write=False, keep_forwarding=False).summary


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def compare(
    cfgs: Sequence[ScenarioConfig],
    seeds: Sequence[int],
    workers: int = 1,
    out: Optional[str] = None,
) -> List[ComparisonRow]:
    """One row per config, every config run on the same seeds.

    Goodput is the steady-state figure (completions after warm-up). Configs may differ
    only in controller and balancer; anything else raises WorkloadMismatchError.
    """
    if not cfgs:
        return []
    reference = _signature(cfgs[0])
    for cfg in cfgs[1:]:
        key = _first_difference(reference, _signature(cfg))
        if key is not None:
            raise WorkloadMismatchError(key, "compared scenarios must share workload, topology and timing")

    jobs = [with_overrides(cfg, run={"seed": seed}) for cfg in cfgs for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_summary, jobs))
    else:
        summaries = [_summary(job) for job in jobs]

    labels: Dict[str, int] = {}
    rows = []
    for index, cfg in enumerate(cfgs):
        chunk = summaries[index * len(seeds): (index + 1) * len(seeds)]
        label = label_for(cfg)
        labels[label] = labels.get(label, 0) + 1
        if labels[label] > 1:
            label = f"{label}#{labels[label]}"
        goodput = [s["steady_goodput"] if s["steady_goodput"] is not None else s["goodput"] for s in chunk]
        means = {metric: _mean([s[metric] for s in chunk]) for metric in COMPARISON_METRICS}
        row = ComparisonRow(label, goodput, means)
        logger.info("compare %s: goodput %.3f over %d seeds", label, row.goodput_mean, len(seeds))
        rows.append(row)

    if out is not None:
        write_comparison(os.path.join(out, "comparison.csv"), rows, seeds)
    return rows


def write_comparison(path: str, rows: Sequence[ComparisonRow], seeds: Sequence[int]) -> str:
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    except OSError as exc:
        raise SimulationError(f"cannot create output directory for {path}: {exc.strerror}") from exc
    columns = ("config", *(f"goodput_seed{seed}" for seed in seeds), "goodput_mean", *(f"{m}_mean" for m in COMPARISON_METRICS))
    return write_csv(
        path,
        columns,
        ((row.config, *row.goodput, row.goodput_mean, *(row.means[m] for m in COMPARISON_METRICS)) for row in rows),
    )
