import numpy as np
import pytest

from aoisched.core import ConfigError, Packet, SystemConfig
from aoisched.engine import SystemState, on_decision_epoch
from aoisched.policies import PolicySpec, choose_flow, preemption_check, select_next


def make_state(N, M, t, deltas, xis=None, rule="LGFS"):
    st = SystemState(SystemConfig(N, M), rule)
    st.clock = t
    st.delivered = [t - d for d in deltas]
    st.served = [t - x for x in (xis if xis is not None else deltas)]
    return st


def pkt(flow, seq, S, A=None):
    return Packet(flow, seq, S, S if A is None else A)


def test_names_round_trip():
    for name in ("prmp-MAF-LGFS", "np-MASIF-LGFS", "np-RAND-FCFS", "prmp-RAND-LGFS"):
        assert PolicySpec.from_name(name).name == name
    for bad in ("MAF-LGFS", "np-MAX-LGFS", "np-MAF-LIFO", "pre-MAF-LGFS"):
        with pytest.raises(ConfigError):
            PolicySpec.from_name(bad)


def test_maf_lgfs_picks_freshest_packet_of_oldest_flow():
    st = make_state(3, 1, 10.0, (5, 3, 7))
    for p in (pkt(3, 1, 2.0), pkt(3, 2, 6.0), pkt(1, 2, 6.0)):
        st.enqueue(p)
    p = select_next(st, PolicySpec.from_name("np-MAF-LGFS"))
    assert (p.flow_id, p.gen_time) == (3, 6.0)


def test_fcfs_picks_earliest_arrival():
    st = make_state(1, 1, 10.0, (5,), rule="FCFS")
    st.enqueue(pkt(1, 1, 1.0, 4.0))
    st.enqueue(pkt(1, 2, 2.0, 3.0))
    assert select_next(st, PolicySpec.from_name("np-MAF-FCFS")).seq == 2


def test_ties_go_to_lowest_flow_index():
    st = make_state(3, 1, 10.0, (5, 5, 1))
    for f in (1, 2, 3):
        st.enqueue(pkt(f, 1, 9.0))
    assert choose_flow(st, PolicySpec.from_name("np-MAF-LGFS")) == 0


def test_masif_uses_served_age():
    # flow 1 has a packet in service: its served age dropped, its age did not
    st = make_state(2, 1, 10.0, deltas=(10, 9), xis=(4, 9))
    for f in (1, 2):
        st.enqueue(pkt(f, 2, 8.0))
    assert choose_flow(st, PolicySpec.from_name("np-MASIF-LGFS")) == 1
    assert choose_flow(st, PolicySpec.from_name("np-MAF-LGFS")) == 0


def test_rand_only_picks_flows_with_packets():
    st = make_state(4, 1, 10.0, (1, 1, 1, 1))
    st.enqueue(pkt(2, 1, 9.0))
    st.enqueue(pkt(4, 1, 9.0))
    rng = np.random.default_rng(0)
    picks = {choose_flow(st, PolicySpec.from_name("np-RAND-LGFS"), rng) for _ in range(50)}
    assert picks == {1, 3}


def test_empty_queue_assigns_nothing():
    st = make_state(2, 2, 1.0, (1, 1))
    assert on_decision_epoch(st, PolicySpec.from_name("prmp-MAF-LGFS")) == []


def test_non_preemptive_never_displaces():
    st = make_state(2, 1, 5.0, (1, 5))
    cur = pkt(1, 1, 3.0)
    st.start_service(0, cur, 4.0)
    st.enqueue(pkt(2, 2, 4.9))
    spec = PolicySpec.from_name("np-MAF-LGFS")
    assert preemption_check(st, spec) is None
    assert on_decision_epoch(st, spec) == []
    assert st.servers[0] is cur


def test_no_preemption_when_in_service_packet_is_top_priority():
    st = make_state(2, 1, 5.0, (5, 1))
    cur = pkt(1, 2, 4.0)
    st.start_service(0, cur, 4.5)
    st.enqueue(pkt(1, 1, 3.0))
    st.enqueue(pkt(2, 2, 4.0))
    assert preemption_check(st, PolicySpec.from_name("prmp-MAF-LGFS")) is None


def test_preemption_for_max_age_flow():
    # serving flow 2 while flow 1 is older and a fresh packet of flow 1 is waiting
    st = make_state(2, 1, 5.0, (5, 1))
    cur = pkt(2, 1, 3.0)
    st.start_service(0, cur, 4.5)
    new = pkt(1, 2, 4.9)
    st.enqueue(new)
    spec = PolicySpec.from_name("prmp-MAF-LGFS")
    k, displaced, replacement = preemption_check(st, spec)
    assert (k, displaced, replacement) == (0, cur, new)
    actions = on_decision_epoch(st, spec)
    assert actions == [("preempt", 0, cur), ("assign", 0, new)]
    assert st.servers[0] is new and cur in st.queued_packets()
    assert cur.service_start == 4.5  # first start is kept


def test_preemptive_lgfs_replaces_stale_packet_of_same_flow():
    st = make_state(1, 1, 5.0, (5,))
    cur = pkt(1, 1, 1.0)
    st.start_service(0, cur, 2.0)
    st.enqueue(pkt(1, 2, 4.0))
    for name in ("prmp-MAF-LGFS", "prmp-RAND-LGFS"):
        r = preemption_check(st, PolicySpec.from_name(name), rng=np.random.default_rng(0))
        assert r is not None and r[2].seq == 2


def test_idle_server_is_used_before_preempting():
    st = make_state(2, 2, 5.0, (5, 1))
    st.start_service(0, pkt(2, 1, 3.0), 4.0)
    st.enqueue(pkt(1, 2, 4.9))
    actions = on_decision_epoch(st, PolicySpec.from_name("prmp-MAF-LGFS"))
    assert [a[:2] for a in actions] == [("assign", 1)]
