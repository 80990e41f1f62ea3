"""Flow- and packet-selection disciplines and the named policies built from them.

A policy picks a flow first (MAF: largest age, MASIF: largest age of served
information, RAND: uniform over flows with waiting packets) and then a packet
inside that flow (LGFS: latest generation time, FCFS: earliest arrival).

The decision functions read a :class:`~aoisched.engine.SystemState`; they only
touch ``delivered``/``served`` anchors, the per-flow queues and the servers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ConfigError, Packet

FLOW_RULES = ("MAF", "MASIF", "RAND")
PACKET_RULES = ("LGFS", "FCFS")
TIE_BREAKS = ("lowest_flow_index", "random")


@dataclass(frozen=True)
class PolicySpec:
    flow_rule: str
    packet_rule: str
    preemptive: bool
    tie_break: str = "lowest_flow_index"
    # probability of leaving an idle server idle at a decision epoch; 0 => work-conserving
    idle_prob: float = 0.0

    def __post_init__(self):
        if self.flow_rule not in FLOW_RULES:
            raise ConfigError(f"unknown flow rule {self.flow_rule!r}")
        if self.packet_rule not in PACKET_RULES:
            raise ConfigError(f"unknown packet rule {self.packet_rule!r}")
        if self.tie_break not in TIE_BREAKS:
            raise ConfigError(f"unknown tie_break {self.tie_break!r}")
        if not 0.0 <= self.idle_prob < 1.0:
            raise ConfigError("idle_prob must lie in [0, 1)")

    @classmethod
    def from_name(cls, name: str, **kw) -> "PolicySpec":
        """Parse names such as ``prmp-MAF-LGFS`` or ``np-RAND-FCFS``."""
        parts = name.split("-")
        if len(parts) != 3 or parts[0] not in ("prmp", "np"):
            raise ConfigError(f"bad policy name {name!r}; expected '<prmp|np>-<MAF|MASIF|RAND>-<LGFS|FCFS>'")
        return cls(parts[1], parts[2], parts[0] == "prmp", **kw)

    @property
    def name(self) -> str:
        return f"{'prmp' if self.preemptive else 'np'}-{self.flow_rule}-{self.packet_rule}"

    @property
    def work_conserving(self) -> bool:
        return self.idle_prob == 0.0


def queue_key(packet_rule: str, p: Packet) -> tuple:
    """Min-heap key within one flow's queue: the head is the packet the rule serves next."""
    if packet_rule == "LGFS":
        return (-p.gen_time, -p.seq)
    return (p.arrival_time, p.seq)


def _flow_anchor(state, spec: PolicySpec, f: int) -> float:
    # larger age <=> smaller anchor (generation time of freshest delivered/served packet)
    return state.delivered[f] if spec.flow_rule == "MAF" else state.served[f]


def choose_flow(state, spec: PolicySpec, rng: Optional[np.random.Generator] = None) -> Optional[int]:
    """Index (0-based) of the flow the policy serves next, or None if the queue is empty."""
    queues = state.queues
    candidates = [f for f in range(state.num_flows) if queues[f]]
    if not candidates:
        return None
    if spec.flow_rule == "RAND":
        if rng is None:
            raise ConfigError("RAND flow selection needs an rng")
        return candidates[int(rng.integers(len(candidates)))]
    anchors = state.delivered if spec.flow_rule == "MAF" else state.served
    best = min(anchors[f] for f in candidates)
    if spec.tie_break == "lowest_flow_index":
        for f in candidates:
            if anchors[f] == best:
                return f
    tied = [f for f in candidates if anchors[f] == best]
    if len(tied) == 1:
        return tied[0]
    if rng is None:
        raise ConfigError("random tie-breaking needs an rng")
    return tied[int(rng.integers(len(tied)))]


def select_next(state, spec: PolicySpec, rng: Optional[np.random.Generator] = None) -> Optional[Packet]:
    """The packet the policy would start next (left in the queue)."""
    f = choose_flow(state, spec, rng)
    if f is None:
        return None
    return state.queues[f][0][-1]


def packet_priority(state, spec: PolicySpec, p: Packet) -> tuple:
    """Total order used for preemption decisions; larger is more urgent."""
    within = (p.gen_time, p.seq) if spec.packet_rule == "LGFS" else (-p.arrival_time, -p.seq)
    f = p.flow_id - 1
    if spec.flow_rule == "RAND":
        # the random flow choice is not a priority; only same-flow comparisons are meaningful
        return within
    crit = -_flow_anchor(state, spec, f)
    if spec.tie_break == "lowest_flow_index":
        return (crit, -f) + within
    return (crit,) + within


def preemption_check(state, spec: PolicySpec, arriving: Optional[Packet] = None,
                     rng: Optional[np.random.Generator] = None):
    """Return ``(server, displaced, replacement)`` if the policy should preempt, else None.

    Only considered when every server is busy (an idle server is always used
    first). For MAF/MASIF the queue head is compared with the least urgent
    packet in service; for RAND only packets of the same flow are compared,
    since the random flow draw carries no priority.
    """
    if not spec.preemptive or state.queue_len == 0:
        return None
    servers = state.servers
    if any(p is None for p in servers):
        return None
    if spec.flow_rule == "RAND":
        for k, cur in enumerate(servers):
            q = state.queues[cur.flow_id - 1]
            if q:
                head = q[0][-1]
                if packet_priority(state, spec, head) > packet_priority(state, spec, cur):
                    return k, cur, head
        return None
    head = select_next(state, spec, rng)
    head_prio = packet_priority(state, spec, head)
    k_low, low_prio = None, None
    for k, cur in enumerate(servers):
        pr = packet_priority(state, spec, cur)
        if low_prio is None or pr < low_prio:
            k_low, low_prio = k, pr
    if head_prio > low_prio:
        return k_low, servers[k_low], head
    return None
