"""
Balancer - session-aware dispatch of new calls across a server cluster
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, ConsistencyError, ParameterError
from .sip import Transaction

logger = logging.getLogger(__name__)

DEFAULT_COSTS = {Transaction.INVITE: 2.0, Transaction.BYE: 1.0}


@dataclass
class ClusterView:
    servers: List[str]
    cost_table: Dict[Transaction, float] = field(default_factory=lambda: dict(DEFAULT_COSTS))
    active_calls: List[int] = field(default_factory=list)
    active_transactions: List[int] = field(default_factory=list)
    work_left: List[float] = field(default_factory=list)
    affinity: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.servers)
        self.active_calls = self.active_calls or [0] * n
        self.active_transactions = self.active_transactions or [0] * n
        self.work_left = self.work_left or [0.0] * n


def _argmin(values) -> int:
    if len(values) == 0:
        raise ParameterError("cannot dispatch on an empty cluster")
    # np.argmin returns the first minimum, i.e. the lowest index on ties
    return int(np.argmin(np.asarray(values)))


def cjsq_pick(view: ClusterView) -> int:
    return _argmin(view.active_calls)


def tjsq_pick(view: ClusterView) -> int:
    return _argmin(view.active_transactions)


def tlwl_pick(view: ClusterView, new_call_cost: float) -> int:
    index = _argmin(view.work_left)
    view.work_left[index] += new_call_cost
    return index


ALGORITHMS = ("cjsq", "tjsq", "tlwl")


@dataclass(frozen=True)
class DispatchRecord:
    t: float
    call_id: int
    algorithm: str
    server: str
    metric: Tuple[float, ...]


class Balancer:
    """Owns a ClusterView and keeps its counters in step with the calls it dispatched.

    A call's Invite transaction counts from dispatch until its final response; a
    Bye transaction from the moment it is routed until its Ok200. TLWL work follows
    the same span, weighted by the cost table.
    """

    def __init__(self, algorithm: str, servers: List[str], cost_table: Optional[Dict[Transaction, float]] = None):
        if algorithm not in ALGORITHMS:
            raise ConfigError("balancer.name", f"unknown algorithm {algorithm!r}")
        if not servers:
            raise ParameterError("cannot dispatch on an empty cluster")
        self.algorithm = algorithm
        self.view = ClusterView(list(servers), dict(cost_table or DEFAULT_COSTS))
        self.log: List[DispatchRecord] = []
        self._open: Dict[Tuple[int, Transaction], int] = {}
        self._ended: set = set()

    def _metric(self) -> List[float]:
        if self.algorithm == "cjsq":
            return list(self.view.active_calls)
        if self.algorithm == "tjsq":
            return list(self.view.active_transactions)
        return list(self.view.work_left)

    def server_for(self, call_id: int) -> Optional[str]:
        index = self.view.affinity.get(call_id)
        return None if index is None else self.view.servers[index]

    def dispatch(self, call_id: int, now: float) -> str:
        """Assign a new call; repeated dispatches of one call return its first server"""
        if call_id in self.view.affinity:
            return self.server_for(call_id)

        metric = tuple(self._metric())
        cost = self.view.cost_table[Transaction.INVITE]
        if self.algorithm == "cjsq":
            index = cjsq_pick(self.view)
            self.view.work_left[index] += cost
        elif self.algorithm == "tjsq":
            index = tjsq_pick(self.view)
            self.view.work_left[index] += cost
        else:
            index = tlwl_pick(self.view, cost)

        self.view.affinity[call_id] = index
        self.view.active_calls[index] += 1
        self.view.active_transactions[index] += 1
        self._open[(call_id, Transaction.INVITE)] = index

        server = self.view.servers[index]
        self.log.append(DispatchRecord(now, call_id, self.algorithm, server, metric))
        return server

    def open_transaction(self, call_id: int, transaction: Transaction) -> None:
        index = self.view.affinity.get(call_id)
        if index is None or (call_id, transaction) in self._open or call_id in self._ended:
            return
        self._open[(call_id, transaction)] = index
        self.view.active_transactions[index] += 1
        self.view.work_left[index] += self.view.cost_table[transaction]

    def close_transaction(self, call_id: int, transaction: Transaction) -> None:
        index = self._open.pop((call_id, transaction), None)
        if index is None:
            return
        self.view.active_transactions[index] -= 1
        self.view.work_left[index] -= self.view.cost_table[transaction]
        if self.view.active_transactions[index] < 0:
            raise ConsistencyError(f"negative transaction count on {self.view.servers[index]}")
        # float drift from repeated add/subtract
        if abs(self.view.work_left[index]) < 1e-9:
            self.view.work_left[index] = 0.0

    def end_call(self, call_id: int) -> None:
        """Release every counter a finished, rejected or timed-out call still holds"""
        if call_id in self._ended:
            return
        index = self.view.affinity.get(call_id)
        if index is None:
            return
        for transaction in (Transaction.INVITE, Transaction.BYE):
            self.close_transaction(call_id, transaction)
        self._ended.add(call_id)
        self.view.active_calls[index] -= 1
        if self.view.active_calls[index] < 0:
            raise ConsistencyError(f"negative call count on {self.view.servers[index]}")

    def calls_per_server(self) -> Dict[str, int]:
        counts = {server: 0 for server in self.view.servers}
        for index in self.view.affinity.values():
            counts[self.view.servers[index]] += 1
        return counts
