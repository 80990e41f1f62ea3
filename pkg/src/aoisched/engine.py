"""Discrete-event kernel for the multi-flow, multi-server status-update queue.

Events are popped in ``(time, kind_rank, counter)`` order with
Arrival < ServiceCompletion < PotentialCompletion, so a packet arriving at the
same instant as a completion is visible to the decision taken at that
completion.

Two completion mechanisms are supported:

* per-assignment draws (default): a service time is sampled whenever a packet
  is put on a server. A preempted packet is resampled on reassignment, which
  is distributionally exact only for exponential service.
* shared epochs: an exogenous Poisson stream of potential completions (rate
  1/E[X]); whenever the single server is busy at an epoch its packet
  completes. Runs fed the same epoch stream have synchronized deliveries
  while both are busy.
"""

from __future__ import annotations

import heapq
import json
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .core import (
    ArrivalSchedule,
    ConfigError,
    InvariantViolation,
    Packet,
    SawtoothProcess,
    SystemConfig,
)
from .distributions import ServiceDistribution
from .policies import PolicySpec, choose_flow, preemption_check, queue_key
from .rng import stream

ARRIVAL, COMPLETION, POTENTIAL = 0, 1, 2
KIND_NAMES = {ARRIVAL: "arrival", COMPLETION: "completion", POTENTIAL: "potential_completion"}


class SystemState:
    """Queue, servers and per-flow age bookkeeping at the current instant.

    ``delivered[f]`` is U_f, the generation time of the freshest delivered
    packet of flow ``f`` (0-based), so the age is ``clock - delivered[f]``.
    ``served[f]`` is the same for packets that have started service; the age
    of served information is ``clock - served[f]``. Both start at
    ``-initial_age``.
    """

    def __init__(self, cfg: SystemConfig, packet_rule: str = "LGFS", t0: float = 0.0):
        self.num_flows = cfg.num_flows
        self.num_servers = cfg.num_servers
        self.packet_rule = packet_rule
        self.clock = t0
        self.queues: list[list] = [[] for _ in range(cfg.num_flows)]
        self.queue_len = 0
        self.servers: list[Optional[Packet]] = [None] * cfg.num_servers
        self.start_times: list[Optional[float]] = [None] * cfg.num_servers
        ages = cfg.initial_ages
        self.delivered = [t0 - a for a in ages]
        self.served = [t0 - a for a in ages]
        self.delta = [SawtoothProcess.starting_at(t0, a) for a in ages]
        self.xi = [SawtoothProcess.starting_at(t0, a) for a in ages]
        self.delivered_count = 0

    # ages
    def age(self, f: int) -> float:
        return self.clock - self.delivered[f]

    def served_age(self, f: int) -> float:
        return self.clock - self.served[f]

    @property
    def ages(self) -> np.ndarray:
        return self.clock - np.asarray(self.delivered)

    @property
    def served_ages(self) -> np.ndarray:
        return self.clock - np.asarray(self.served)

    # queue
    def enqueue(self, p: Packet) -> None:
        heapq.heappush(self.queues[p.flow_id - 1], (*queue_key(self.packet_rule, p), p))
        self.queue_len += 1

    def pop(self, f: int) -> Packet:
        self.queue_len -= 1
        return heapq.heappop(self.queues[f])[-1]

    def queued_packets(self) -> list[Packet]:
        return [e[-1] for q in self.queues for e in q]

    def idle_servers(self) -> list[int]:
        return [k for k, p in enumerate(self.servers) if p is None]

    # service
    def start_service(self, k: int, p: Packet, t: float) -> None:
        if self.servers[k] is not None:
            raise InvariantViolation(f"server {k} already busy")
        self.servers[k] = p
        self.start_times[k] = t
        p.server = k
        if p.service_start is None:
            p.service_start = t
        f = p.flow_id - 1
        if p.gen_time > self.served[f]:
            self.served[f] = p.gen_time
            self.xi[f].append(t, t - p.gen_time, p.gen_time)

    def displace(self, k: int) -> Packet:
        """Take the packet off server ``k`` and put it back in the queue."""
        p = self.servers[k]
        if p is None:
            raise InvariantViolation(f"server {k} is idle; nothing to displace")
        self.servers[k] = None
        self.start_times[k] = None
        p.server = None
        self.enqueue(p)
        return p


def record_delivery(state: SystemState, packet: Packet, t: float) -> SystemState:
    """Deliver the in-service ``packet`` at time ``t`` and update U and the age tracker."""
    k = packet.server
    if k is None or state.servers[k] is not packet:
        raise InvariantViolation(f"packet ({packet.flow_id},{packet.seq}) is not in service")
    state.servers[k] = None
    state.start_times[k] = None
    packet.server = None
    packet.delivery_time = t
    state.delivered_count += 1
    f = packet.flow_id - 1
    if packet.gen_time > state.delivered[f]:
        state.delivered[f] = packet.gen_time
        state.delta[f].append(t, t - packet.gen_time, packet.gen_time)
    return state


def on_decision_epoch(state: SystemState, spec: PolicySpec, rng: Optional[np.random.Generator] = None,
                      idle_rng: Optional[np.random.Generator] = None) -> list[tuple]:
    """Apply the policy at the current instant.

    Idle servers are filled first (lowest index first); for preemptive
    policies the queue head may then displace the least urgent packet in
    service, at most once per server. Returns ``("assign", k, packet)`` and
    ``("preempt", k, packet)`` actions in the order they were applied.
    """
    t = state.clock
    actions: list[tuple] = []
    if state.queue_len:
        for k in range(state.num_servers):
            if state.servers[k] is not None:
                continue
            if spec.idle_prob and idle_rng is not None and idle_rng.random() < spec.idle_prob:
                continue
            f = choose_flow(state, spec, rng)
            if f is None:
                break
            p = state.pop(f)
            state.start_service(k, p, t)
            actions.append(("assign", k, p))
    if spec.preemptive:
        for _ in range(state.num_servers):
            r = preemption_check(state, spec, None, rng)
            if r is None:
                break
            k, old, new = r
            state.pop(new.flow_id - 1)  # head of its flow queue
            state.servers[k] = None
            state.start_times[k] = None
            old.server = None
            state.enqueue(old)
            state.start_service(k, new, t)
            actions.append(("preempt", k, old))
            actions.append(("assign", k, new))
    return actions


@dataclass
class SimTrace:
    """Everything recorded by one run."""

    policy: str
    num_flows: int
    num_servers: int
    horizon: float
    delta: list[SawtoothProcess]
    xi: list[SawtoothProcess]
    packets: list[Packet]
    queue_log: tuple[list[float], list[int]]
    starts: list[tuple[float, int, int, int]]
    preemptive: bool
    schedule_digest: str
    coupling: Optional[str] = None
    events: Optional[list[tuple]] = None
    seed: Optional[int] = None
    final_queue: int = 0
    final_in_service: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_arrived(self) -> int:
        return len(self.packets)

    @property
    def n_delivered(self) -> int:
        return sum(1 for p in self.packets if p.delivery_time is not None)

    def to_dict(self, include_packets: bool = True) -> dict:
        out = {
            "policy": self.policy,
            "num_flows": self.num_flows,
            "num_servers": self.num_servers,
            "horizon": self.horizon,
            "seed": self.seed,
            "schedule_digest": self.schedule_digest,
            "coupling": self.coupling,
            "delta": [p.breakpoints for p in self.delta],
            "xi": [p.breakpoints for p in self.xi],
            "starts": self.starts,
            "events": self.events,
        }
        if include_packets:
            out["packets"] = [p.to_dict() for p in self.packets]
        return out

    def write_json(self, path: Union[str, Path]) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    def write_breakpoints_csv(self, path: Union[str, Path]) -> None:
        """One row per breakpoint: process (delta|xi), flow (1-based), time, value."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["process", "flow", "time", "value"])
            for name, procs in (("delta", self.delta), ("xi", self.xi)):
                for f, proc in enumerate(procs, start=1):
                    for t, v in zip(proc.times, proc.values):
                        w.writerow([name, f, repr(t), repr(v)])


class EpochStream:
    """Poisson stream of potential completion epochs, reproducible from a seed."""

    def __init__(self, seed: int, rate: float, block: int = 4096):
        self.rng = stream(seed, "coupling.epochs")
        self.scale = 1.0 / rate
        self.block = block
        self._buf: list[float] = []
        self._t = 0.0

    def __iter__(self):
        return self

    def __next__(self) -> float:
        if not self._buf:
            gaps = self.rng.exponential(self.scale, self.block)
            times = self._t + np.cumsum(gaps)
            self._t = float(times[-1])
            self._buf = times.tolist()[::-1]
        return self._buf.pop()


class BufferedSampler:
    """Service-time draws pulled from the distribution in blocks."""

    def __init__(self, dist: ServiceDistribution, rng: np.random.Generator, block: int = 2048):
        self.dist = dist
        self.rng = rng
        self.block = block
        self._buf: list[float] = []

    def __call__(self) -> float:
        if not self._buf:
            self._buf = self.dist.sample_n(self.rng, self.block).tolist()[::-1]
        return self._buf.pop()


def check_compatible(cfg: SystemConfig, dist: ServiceDistribution, policy: PolicySpec,
                     unchecked: bool = False, shared_epochs: bool = False) -> None:
    if policy.preemptive and not dist.is_exponential and not unchecked:
        raise ConfigError(
            f"{policy.name} is preemptive but service is {dist.kind}; preemption with resampling "
            "is only exact for exponential service (pass unchecked=True to override)"
        )
    if shared_epochs and (cfg.num_servers != 1 or not (dist.is_exponential or unchecked)):
        raise ConfigError("shared completion epochs need a single server and exponential service")


class Simulator:
    """One policy on one arrival schedule. Use :meth:`run`, or :meth:`step` for lockstep coupling."""

    def __init__(self, cfg: SystemConfig, sched: ArrivalSchedule, dist: ServiceDistribution,
                 policy: PolicySpec, horizon: float, seed: int = 0, *,
                 epochs: Optional[EpochStream] = None, sampler: Optional[Callable[[], float]] = None,
                 unchecked: bool = False, record_events: bool = False, coupling: Optional[str] = None,
                 on_start: Optional[Callable[[int, Packet, float], None]] = None):
        if not horizon > 0:
            raise ConfigError(f"horizon must be positive, got {horizon}")
        check_compatible(cfg, dist, policy, unchecked, shared_epochs=epochs is not None)
        self.cfg = cfg
        self.sched = sched
        self.dist = dist
        self.policy = policy
        self.horizon = float(horizon)
        self.seed = seed
        self.state = SystemState(cfg, policy.packet_rule)
        self.policy_rng = stream(seed, "engine.policy")
        self.idle_rng = stream(seed, "engine.idle") if policy.idle_prob else None
        self.sampler = sampler or BufferedSampler(dist, stream(seed, "engine.service"))
        self.epochs = epochs
        self.on_start = on_start
        self.coupling = coupling
        self.events: Optional[list[tuple]] = [] if record_events else None
        self.packets: list[Packet] = []
        self.starts: list[tuple[float, int, int, int]] = []
        self.q_times: list[float] = [0.0]
        self.q_sizes: list[int] = [0]
        self._tokens = [0] * cfg.num_servers
        self._counter = 0
        heap = []
        for i, a in enumerate(sched.arrival_times, start=1):
            if a <= self.horizon:
                heap.append((a, ARRIVAL, i, i, 0))
        self._counter = len(sched) + 1
        heapq.heapify(heap)
        self._heap = heap
        if epochs is not None:
            self._push(next(epochs), POTENTIAL, 0, 0)

    def _push(self, t: float, kind: int, a: int, b: int) -> None:
        self._counter += 1
        heapq.heappush(self._heap, (t, kind, self._counter, a, b))

    def peek_time(self) -> float:
        return self._heap[0][0] if self._heap else np.inf

    def _apply(self, actions: list[tuple], t: float) -> None:
        for what, k, p in actions:
            if what == "assign":
                self._tokens[k] += 1
                self.starts.append((t, k, p.flow_id, p.seq))
                if self.events is not None:
                    self.events.append((t, "start", k, p.flow_id, p.seq))
                if self.epochs is None:
                    self._push(t + self.sampler(), COMPLETION, k, self._tokens[k])
                if self.on_start is not None:
                    self.on_start(k, p, t)
            else:
                self._tokens[k] += 1
                if self.events is not None:
                    self.events.append((t, "preempt", k, p.flow_id, p.seq))

    def reschedule(self, k: int, t_complete: float) -> None:
        """Replace the pending completion of server ``k`` (used by couplings)."""
        if self.state.servers[k] is None:
            raise InvariantViolation(f"cannot reschedule idle server {k}")
        self._tokens[k] += 1
        self._push(t_complete, COMPLETION, k, self._tokens[k])

    def step(self) -> float:
        """Process the next event; returns its time."""
        t, kind, _, a, b = heapq.heappop(self._heap)
        st = self.state
        st.clock = t
        ev = self.events
        if kind == ARRIVAL:
            s = self.sched.gen_times[a - 1]
            for f in range(1, st.num_flows + 1):
                p = Packet(f, a, s, t)
                self.packets.append(p)
                st.enqueue(p)
            if ev is not None:
                ev.append((t, "arrival", a))
        elif kind == COMPLETION:
            if b != self._tokens[a]:
                return t  # stale: server was preempted or rescheduled
            p = st.servers[a]
            record_delivery(st, p, t)
            if ev is not None:
                ev.append((t, "deliver", a, p.flow_id, p.seq))
        else:
            self._push(next(self.epochs), POTENTIAL, 0, 0)
            p = st.servers[0]
            if ev is not None:
                ev.append((t, "epoch"))
            if p is None:
                return t
            record_delivery(st, p, t)
            if ev is not None:
                ev.append((t, "deliver", 0, p.flow_id, p.seq))
        actions = on_decision_epoch(st, self.policy, self.policy_rng, self.idle_rng)
        if actions:
            self._apply(actions, t)
        if st.queue_len != self.q_sizes[-1]:
            if self.q_times[-1] == t:
                self.q_sizes[-1] = st.queue_len
            else:
                self.q_times.append(t)
                self.q_sizes.append(st.queue_len)
        return t

    def run(self) -> SimTrace:
        horizon = self.horizon
        heap = self._heap
        while heap and heap[0][0] <= horizon:
            self.step()
        return self.finish()

    def finish(self) -> SimTrace:
        st = self.state
        st.clock = self.horizon
        for proc in st.delta + st.xi:
            proc.horizon = self.horizon
        return SimTrace(
            policy=self.policy.name,
            num_flows=st.num_flows,
            num_servers=st.num_servers,
            horizon=self.horizon,
            delta=st.delta,
            xi=st.xi,
            packets=self.packets,
            queue_log=(self.q_times, self.q_sizes),
            starts=self.starts,
            preemptive=self.policy.preemptive,
            schedule_digest=self.sched.digest(),
            coupling=self.coupling,
            events=self.events,
            seed=self.seed,
            final_queue=st.queue_len,
            final_in_service=sum(p is not None for p in st.servers),
        )


def run(cfg: SystemConfig, sched: ArrivalSchedule, dist: ServiceDistribution, policy: PolicySpec,
        horizon: float, seed: int = 0, **kw) -> SimTrace:
    """Simulate ``policy`` on ``sched`` up to ``horizon``; deterministic given ``seed``."""
    return Simulator(cfg, sched, dist, policy, horizon, seed, **kw).run()


def check_trace_invariants(trace: SimTrace) -> None:
    """Raise InvariantViolation if packet lifecycles or conservation are broken."""
    for p in trace.packets:
        p.check()
    delivered = trace.n_delivered
    if trace.n_arrived != delivered + trace.final_queue + trace.final_in_service:
        raise InvariantViolation(
            f"conservation: arrived {trace.n_arrived} != delivered {delivered} + queued "
            f"{trace.final_queue} + in service {trace.final_in_service}"
        )
