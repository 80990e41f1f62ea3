"""Policies run on common randomness, and sample-path checks on the resulting traces.

Completion modes for :func:`run_coupled`:

``shared_epochs``
    One Poisson stream of potential completion epochs (rate 1/E[X]) drives
    every policy; a busy server completes at each epoch. Single server and
    exponential service only. Work-conserving policies then deliver at the
    same instants throughout every busy period.

``independent_draws``
    Same arrival schedule, independent service draws per policy.

``nbu_quantile``
    Exactly two non-preemptive policies ``(P, pi)`` with ``P`` work-conserving,
    advanced in lockstep. Each service time of ``pi`` is ``isf(U)`` for a fresh
    uniform ``U``. When ``pi`` starts a packet on server ``k`` at time ``tau``
    while ``P``'s queue is non-empty, the remaining service of ``P``'s server
    ``k`` (elapsed ``e``) is redrawn as ``isf(U * ccdf(e)) - e``. That is the
    exact conditional law of the residual, so ``P``'s marginal is unchanged,
    and for NBU service it never exceeds ``isf(U)``: ``P`` then starts a new
    packet no later than ``pi`` completes. This makes ``P`` weakly more
    work-efficient than ``pi`` on every path.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ArrivalSchedule, ConfigError, SystemConfig
from .distributions import ServiceDistribution, mean
from .engine import EpochStream, SimTrace, Simulator
from .metrics import PenaltyLike, StOrderReport, empirical_st_order, sorted_dominates_many, time_average_penalty
from .policies import PolicySpec
from .rng import derive_seed, stream
from .traffic import ArrivalIndex

COMPLETION_MODES = ("shared_epochs", "independent_draws", "nbu_quantile")


@dataclass(frozen=True)
class CoupledRunConfig:
    cfg: SystemConfig
    sched: ArrivalSchedule
    dist: ServiceDistribution
    policies: tuple[PolicySpec, ...]
    horizon: float
    completion_mode: str = "shared_epochs"
    seed: int = 0
    unchecked: bool = False

    def __post_init__(self):
        if self.completion_mode not in COMPLETION_MODES:
            raise ConfigError(f"unknown completion_mode {self.completion_mode!r}")
        if not self.policies:
            raise ConfigError("need at least one policy")
        if self.completion_mode == "shared_epochs":
            if self.cfg.num_servers != 1:
                raise ConfigError("shared_epochs coupling requires a single server (M=1)")
            if not self.dist.is_exponential and not self.unchecked:
                raise ConfigError("shared_epochs coupling requires exponential service")
        if self.completion_mode == "nbu_quantile":
            if len(self.policies) != 2:
                raise ConfigError("nbu_quantile coupling takes exactly two policies (P, pi)")
            P, pi = self.policies
            if P.preemptive or pi.preemptive:
                raise ConfigError("nbu_quantile coupling is for non-preemptive policies")
            if not P.work_conserving:
                raise ConfigError("the first policy of an nbu_quantile coupling must be work-conserving")
            if self.dist.kind not in ("exponential", "shifted_exponential", "constant", "erlang") and not self.unchecked:
                raise ConfigError("nbu_quantile coupling requires an NBU service distribution")


def _tag(c: CoupledRunConfig) -> str:
    return f"{c.completion_mode}:{c.seed}:{c.sched.digest()}"


class _QuantileSampler:
    """Service draws as isf(U); remembers the last uniform."""

    def __init__(self, dist: ServiceDistribution, rng: np.random.Generator):
        self.dist = dist
        self.rng = rng
        self.last_u = 1.0
        self.last_x = 0.0

    def __call__(self) -> float:
        u = 1.0 - self.rng.random()  # (0, 1]
        self.last_u = u
        self.last_x = float(self.dist.isf(u))
        return self.last_x


def _run_nbu_quantile(c: CoupledRunConfig, record_events: bool) -> list[SimTrace]:
    P_spec, pi_spec = c.policies
    dist = c.dist
    tag = _tag(c)
    P = Simulator(c.cfg, c.sched, dist, P_spec, c.horizon, derive_seed(c.seed, "P"),
                  unchecked=c.unchecked, record_events=record_events, coupling=tag)
    sampler = _QuantileSampler(dist, stream(c.seed, "coupling.pi.service"))
    pending: list[tuple[int, float, float]] = []
    pi = Simulator(c.cfg, c.sched, dist, pi_spec, c.horizon, derive_seed(c.seed, "pi"), sampler=sampler,
                   unchecked=c.unchecked, record_events=record_events, coupling=tag,
                   on_start=lambda k, p, t: pending.append((k, sampler.last_u, sampler.last_x)))
    horizon = c.horizon
    while True:
        t = min(P.peek_time(), pi.peek_time())
        if t > horizon:
            break
        while P.peek_time() == t:
            P.step()
        while pi.peek_time() == t:
            pi.step()
        if pending:
            st = P.state
            if st.queue_len > 0:
                for k, u, x in pending:
                    e = t - st.start_times[k]
                    r = float(dist.isf(u * float(dist.ccdf(e)))) - e
                    if x < r <= x + 1e-9 * max(1.0, x):
                        r = x  # float round-off only; NBU guarantees r <= x
                    P.reschedule(k, t + max(r, 0.0))
            pending.clear()
    return [P.finish(), pi.finish()]


def run_coupled(c: CoupledRunConfig, record_events: bool = False) -> list[SimTrace]:
    """One trace per policy, all on the same arrival schedule and coupled service randomness."""
    tag = _tag(c)
    if c.completion_mode == "nbu_quantile":
        return _run_nbu_quantile(c, record_events)
    traces = []
    rate = 1.0 / mean(c.dist)
    for i, spec in enumerate(c.policies):
        if c.completion_mode == "shared_epochs":
            sim = Simulator(c.cfg, c.sched, c.dist, spec, c.horizon, c.seed, epochs=EpochStream(c.seed, rate),
                            unchecked=c.unchecked, record_events=record_events, coupling=tag)
        else:
            sim = Simulator(c.cfg, c.sched, c.dist, spec, c.horizon, derive_seed(c.seed, "policy", i),
                            unchecked=c.unchecked, record_events=record_events, coupling=tag)
        traces.append(sim.run())
    return traces


def _anchor_matrix(procs, grid: np.ndarray) -> np.ndarray:
    """(G, N) generation-time anchors at each grid time (right-continuous)."""
    cols = []
    for p in procs:
        ts = np.asarray(p.times)
        an = np.asarray(p.anchors)
        idx = np.searchsorted(ts, grid, side="right") - 1
        cols.append(an[idx])
    return np.column_stack(cols)


def _breakpoint_grid(*proc_lists, extra=()) -> np.ndarray:
    times = [np.asarray(p.times) for procs in proc_lists for p in procs]
    return np.unique(np.concatenate(times + [np.asarray(list(extra), dtype=float)]))


@dataclass
class DominanceReport:
    ok: bool
    n_checked: int
    n_violations: int
    violations: list[dict] = field(default_factory=list)
    min_margin: float = np.inf

    def to_dict(self) -> dict:
        return {"ok": self.ok, "n_checked": self.n_checked, "n_violations": self.n_violations,
                "min_margin": self.min_margin, "violations": self.violations}


def _sorted_compare(lower_procs, upper_procs, grid: np.ndarray, max_report: int) -> DominanceReport:
    """Check that the i-th largest value of ``lower`` <= i-th largest of ``upper`` at every grid time.

    Works on anchors: age = t - anchor, so the i-th largest age pairs with the
    i-th smallest anchor and the comparison is exact.
    """
    lo = np.sort(_anchor_matrix(lower_procs, grid), axis=1)
    up = np.sort(_anchor_matrix(upper_procs, grid), axis=1)
    margin = lo - up  # >= 0 wherever the ordering holds
    bad = np.argwhere(margin < 0)
    violations = []
    for g, r in bad[:max_report]:
        t = float(grid[g])
        violations.append({"time": t, "rank": int(r) + 1, "lower": t - float(lo[g, r]),
                           "upper": t - float(up[g, r])})
    return DominanceReport(
        ok=len(bad) == 0,
        n_checked=int(len(grid)),
        n_violations=int(len(bad)),
        violations=violations,
        min_margin=float(margin.min()) if margin.size else np.inf,
    )


def check_samplepath_dominance(trace_P: SimTrace, trace_pi: SimTrace, checkpoints: Sequence[float] = (),
                               max_report: int = 100) -> DominanceReport:
    """Sorted-age dominance of ``trace_P`` over ``trace_pi`` at every event boundary of either trace."""
    if trace_P.coupling is None or trace_P.coupling != trace_pi.coupling or \
            not trace_P.coupling.startswith("shared_epochs"):
        raise ValueError("traces are not coupled (need run_coupled with completion_mode='shared_epochs')")
    if trace_P.num_flows != trace_pi.num_flows:
        raise ValueError("traces have different numbers of flows")
    grid = _breakpoint_grid(trace_P.delta, trace_pi.delta, extra=checkpoints)
    grid = grid[(grid >= 0) & (grid <= min(trace_P.horizon, trace_pi.horizon))]
    return _sorted_compare(trace_P.delta, trace_pi.delta, grid, max_report)


def check_xi_le_delta(trace: SimTrace) -> DominanceReport:
    """Pointwise Xi_n(t) <= Delta_n(t) for every flow, checked exactly on anchors."""
    grid = _breakpoint_grid(trace.delta, trace.xi)
    served = _anchor_matrix(trace.xi, grid)
    delivered = _anchor_matrix(trace.delta, grid)
    margin = served - delivered
    bad = np.argwhere(margin < 0)
    violations = [{"time": float(grid[g]), "flow": int(n) + 1} for g, n in bad[:100]]
    return DominanceReport(len(bad) == 0, int(grid.size), int(len(bad)), violations,
                           float(margin.min()) if margin.size else np.inf)


@dataclass
class WorkEfficiencyReport:
    ok: bool
    n_packets: int
    n_nonvacuous: int
    counterexamples: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "n_packets": self.n_packets, "n_nonvacuous": self.n_nonvacuous,
                "counterexamples": self.counterexamples}


def check_weak_work_efficiency(trace_P: SimTrace, trace_pi: SimTrace, max_report: int = 20) -> WorkEfficiencyReport:
    """Is P weakly more work-efficient than pi on this pair of paths?

    For every packet served by pi over [tau, nu]: if P's queue (waiting
    packets only) is non-empty throughout [tau, nu), P must start some packet
    in [tau, nu]. Packets still in service at the horizon are skipped.
    """
    if trace_P.schedule_digest != trace_pi.schedule_digest:
        raise ValueError("traces were produced from different arrival schedules")
    if trace_P.preemptive or trace_pi.preemptive:
        raise ValueError("weak work-efficiency is defined for non-preemptive policies")
    qt, qs = trace_P.queue_log
    empties = [t for t, s in zip(qt, qs) if s == 0]
    p_starts = sorted(s[0] for s in trace_P.starts)
    n = nonvac = 0
    bad = []
    for pk in trace_pi.packets:
        if pk.delivery_time is None:
            continue
        n += 1
        tau, nu = pk.service_start, pk.delivery_time
        i = bisect.bisect_right(qt, tau) - 1
        if qs[i] == 0:
            continue
        j = bisect.bisect_right(empties, tau)
        if j < len(empties) and empties[j] < nu:
            continue
        nonvac += 1
        k = bisect.bisect_left(p_starts, tau)
        if k < len(p_starts) and p_starts[k] <= nu:
            continue
        if len(bad) < max_report:
            bad.append({"flow": pk.flow_id, "seq": pk.seq, "tau": tau, "nu": nu})
        else:
            bad.append(None)
    return WorkEfficiencyReport(not bad, n, nonvac, [b for b in bad if b is not None])


@dataclass
class XiBoundReport:
    ok: bool
    xi_mean: float
    delta_mean: float
    st_order: StOrderReport
    n_seeds: int

    def to_dict(self) -> dict:
        return {"ok": self.ok, "xi_mean": self.xi_mean, "delta_mean": self.delta_mean, "n_seeds": self.n_seeds,
                "max_ccdf_violation": self.st_order.max_ccdf_violation, "epsilon": self.st_order.epsilon}


def xi_bound_from_samples(xi_values: Sequence[float], delta_values: Sequence[float],
                          confidence: float = 0.99) -> XiBoundReport:
    st = empirical_st_order(xi_values, delta_values, confidence=confidence)
    return XiBoundReport(st.ok, float(np.mean(xi_values)), float(np.mean(delta_values)), st, len(xi_values))


def check_xi_lower_bound(traces: Sequence[tuple[SimTrace, SimTrace]], penalty: PenaltyLike,
                         warmup: float = 0.1, confidence: float = 0.99) -> XiBoundReport:
    """Per-seed time-average p(Xi) of np-MASIF-LGFS vs p(Delta) of a non-preemptive comparator.

    ``traces`` holds one (MASIF trace, comparator trace) pair per seed; the
    comparison is distributional across seeds, not per path.
    """
    xs, ds = [], []
    for P, pi in traces:
        if P.policy != "np-MASIF-LGFS":
            raise ValueError(f"lower-bound trace must come from np-MASIF-LGFS, got {P.policy}")
        if pi.preemptive:
            raise ValueError(f"comparator {pi.policy} is preemptive; the bound covers non-preemptive policies")
        xs.append(time_average_penalty(P, penalty, warmup * P.horizon, P.horizon, "xi"))
        ds.append(time_average_penalty(pi, penalty, warmup * pi.horizon, pi.horizon, "delta"))
    return xi_bound_from_samples(xs, ds, confidence)


@dataclass
class ResetReport:
    ok: bool
    n_checked: int
    failures: list[dict] = field(default_factory=list)


def check_reset_property(trace: SimTrace, sched: ArrivalSchedule, process: str = "delta",
                         max_report: int = 20) -> ResetReport:
    """Every delivery (``delta``) or service start (``xi``) leaves the served flow at age t - W(t),
    the smallest age among all flows, where W(t) is the freshest generation time that has arrived.
    """
    W = ArrivalIndex(sched)
    if process == "delta":
        procs = trace.delta
        events = [(p.delivery_time, p.flow_id) for p in trace.packets if p.delivery_time is not None]
    elif process == "xi":
        procs = trace.xi
        events = [(t, f) for t, _, f, _ in trace.starts]
    else:
        raise ValueError("process must be 'delta' or 'xi'")
    if not events:
        return ResetReport(True, 0)
    times = np.array([e[0] for e in events])
    flows = np.array([e[1] for e in events]) - 1
    anchors = _anchor_matrix(procs, times)
    w = W.many(times)
    own = anchors[np.arange(len(times)), flows]
    good = (own == w) & (own >= anchors.max(axis=1))
    failures = [{"time": float(times[i]), "flow": int(flows[i]) + 1, "anchor": float(own[i]), "W": float(w[i])}
                for i in np.flatnonzero(~good)[:max_report]]
    return ResetReport(bool(good.all()), int(len(times)), failures)


# one-step comparison underlying the induction over deliveries

def maf_lgfs_jump(ages: np.ndarray, floor: np.ndarray) -> np.ndarray:
    """Row-wise: the largest age drops to ``floor`` (= t - W(t)), the others are unchanged."""
    out = np.array(ages, dtype=float, copy=True)
    rows = np.arange(out.shape[0])
    out[rows, np.argmax(out, axis=1)] = floor
    return out


@dataclass
class InductiveStepReport:
    n_flows: int
    cases: int
    failures: int
    hypothesis_held: bool

    @property
    def ok(self) -> bool:
        return self.failures == 0


def inductive_step_trials(n_flows: int, n_trials: int, rng: np.random.Generator,
                          violate_hypothesis: bool = False) -> InductiveStepReport:
    """Randomized check of one delivery step of the sample-path induction.

    Pre-jump vectors satisfy (unless ``violate_hypothesis``) the sorted
    dominance of P's ages by pi's, all ages are at least ``floor``. P applies
    the MAF-LGFS jump; pi resets one coordinate (every choice enumerated) to
    ``floor``, to a uniform value between ``floor`` and its old age, or leaves
    it unchanged (a stale delivery). Counts post-jump dominance failures.
    """
    N = n_flows
    floor = rng.random(n_trials) * 5.0
    P_pre = floor[:, None] + rng.exponential(3.0, (n_trials, N)) * (rng.random((n_trials, N)) < 0.9)
    P_sorted = np.sort(P_pre, axis=1)[:, ::-1]
    inc = rng.exponential(2.0, (n_trials, N)) * (rng.random((n_trials, N)) < 0.6)
    pi_sorted = np.sort(P_sorted + inc, axis=1)[:, ::-1]
    if violate_hypothesis:
        # push one rank of pi strictly below P's value at that rank, staying >= floor
        r = rng.integers(0, N, n_trials)
        rows = np.arange(n_trials)
        room = P_sorted[rows, r] - floor
        P_sorted[rows, r] += np.where(room > 0, 0.0, 1.0)  # guarantee room
        P_pre = P_sorted.copy()
        pi_sorted = P_sorted.copy()
        pi_sorted[rows, r] = floor + (P_sorted[rows, r] - floor) * rng.random(n_trials) * 0.99
    perm = np.argsort(rng.random((n_trials, N)), axis=1)
    pi_pre = np.take_along_axis(pi_sorted, perm, axis=1)
    held = bool(sorted_dominates_many(P_pre, pi_pre).all())

    P_post = maf_lgfs_jump(P_pre, floor)
    cases = failures = 0
    rows = np.arange(n_trials)
    for k in range(N):
        old = pi_pre[:, k]
        for new in (floor, floor + (old - floor) * rng.random(n_trials), old):
            pi_post = pi_pre.copy()
            pi_post[rows, k] = new
            ok = sorted_dominates_many(P_post, pi_post)
            cases += n_trials
            failures += int((~ok).sum())
    return InductiveStepReport(N, cases, failures, held)
