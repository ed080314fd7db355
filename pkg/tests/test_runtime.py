import numpy as np
import pytest

from agpush.agp import StepSizePolicy, run_agp
from agpush.analysis import reweighted_minimizer, reweighted_weights
from agpush.errors import IncompleteLog, InfeasiblePolicy, QueueOverflow
from agpush.objectives import QuadraticObjective
from agpush.runtime import (
    Event,
    EventLog,
    read_event_log,
    reconstruct_schedule,
    resolve_threaded_policy,
    run_threaded,
    write_event_log,
)
from agpush.schedule import verify_bounds
from agpush.topology import augment, build_consensus_matrix, build_reference_graph, complete_graph, ring_graph


def quads(pairs):
    return [QuadraticObjective(a * np.eye(1), [b]) for a, b in pairs]


DISTINCT = [(1, 1), (2, -1), (3, 0.5), (1.5, 2)]


def replay(res, g, objs):
    return run_agp(augment(g, res.schedule.tau_msg_max), res.schedule, objs, res.x0, res.policy)


def lockstep_log(n, K):
    """Every agent activates at every index; each message is processed one index later."""
    events, mid = [], 0
    for k in range(K):
        for i in range(n):
            events.append(Event(k, 0.0, i, "activation"))
        for i in range(n):
            for j in range(n):
                if i != j:
                    events.append(Event(k, 0.0, i, "send", mid))
                    events.append(Event(k + 1, 0.0, j, "deliver", mid))
                    mid += 1
    return EventLog(n, events)


# ---------------------------------------------------------------- threaded runs

def test_single_agent_is_sequential_descent():
    g = build_reference_graph(1, [])
    obj = QuadraticObjective(np.diag([1.0, 3.0]), [2.0, -1.0])
    res = run_threaded(g, [obj], StepSizePolicy("diminishing", 0.3, 0.7), 40, x0=np.zeros((1, 2)))
    assert {e.kind for e in res.log.events} == {"activation"}
    assert res.K == 40
    x = np.zeros(2)
    for c in range(1, 41):
        x = x - 0.3 / c ** 0.7 * obj.gradient(x)
    assert np.allclose(res.z[0], x, rtol=0, atol=1e-14)


def test_ring_reaches_agreement():
    g = ring_graph(4)
    objs = quads([(a, 0.3) for a, _ in DISTINCT])
    res = run_threaded(g, objs, StepSizePolicy("diminishing", 0.5, 0.6), 400, seed=1)
    assert np.ptp(res.z, axis=0).max() <= 1e-4
    assert np.abs(res.z - 0.3).max() <= 1e-4


def test_ring_heads_to_reweighted_minimizer():
    g = ring_graph(4)
    objs = quads(DISTINCT)
    res = run_threaded(g, objs, StepSizePolicy("diminishing", 0.5, 0.8), 1500, seed=1)
    sim = replay(res, g, objs)
    x_K = reweighted_minimizer(reweighted_weights(sim, objs))
    start = np.abs(res.x0 - x_K).max()
    assert np.abs(res.z - x_K).max() <= start / 20
    assert np.abs(sim.xbar[-1] - res.xbar).max() <= 1e-6
    assert verify_bounds(res.schedule, g).ok


def test_straggler_respects_cap():
    g = ring_graph(4)
    res = run_threaded(g, quads(DISTINCT), StepSizePolicy("diminishing", 1e-3, 0.6), 60,
                       straggler_delays=[0.0, 2e-3, 0.0, 0.0], tau_proc_cap=32, seed=2)
    rep = verify_bounds(res.schedule, g)
    assert rep.ok and rep.max_observed_proc_gap <= 32
    counts = res.schedule.counters[-1]
    assert counts[1] == counts.min()
    assert counts.max() > 2 * counts[1]


def test_conservation_and_message_matching():
    g = complete_graph(3)
    res = run_threaded(g, quads(DISTINCT[:3]), StepSizePolicy("diminishing", 0.2, 0.6), 50, seed=3)
    dx, dy = res.conservation_defect()
    assert dx <= 1e-9 and dy <= 1e-9
    sends = sorted(e.msg_id for e in res.log.events if e.kind == "send")
    delivers = sorted(e.msg_id for e in res.log.events if e.kind == "deliver")
    assert sends == delivers and len(sends) == len(set(sends))
    for d in res.schedule.delays:
        assert all(i != j for (i, j) in d)


def test_own_stop_rule_fixes_counts():
    g = complete_graph(3)
    res = run_threaded(g, quads(DISTINCT[:3]), StepSizePolicy("known_rates_constant", 0.05, 0.5), 20,
                       seed=0, stop_rule="own")
    assert res.schedule.counters[-1].tolist() == [20, 20, 20]
    assert res.K == 1 + 3 * 19
    assert res.policy.w == (res.K / 20,) * 3


def test_policy_resolution():
    p = resolve_threaded_policy(StepSizePolicy("constant", 1.0, 0.5), 3, 10)
    assert p.K == 30 and p.w == (1.0, 1.0, 1.0)
    with pytest.raises(InfeasiblePolicy):
        resolve_threaded_policy(StepSizePolicy("known_rates_diminishing", 1.0, 0.6), 3, 10)
    w = resolve_threaded_policy(StepSizePolicy("known_rates_diminishing", 1.0, 0.6), 3, 10, "own").w
    assert len(w) == 3 and w[0] == w[1] == w[2] > 1.0
    with pytest.raises(ValueError):
        resolve_threaded_policy(StepSizePolicy(), 3, 10, "fastest")


def test_configuration_errors():
    g = complete_graph(3)
    objs = quads(DISTINCT[:3])
    with pytest.raises(QueueOverflow):
        run_threaded(g, objs, StepSizePolicy(), 5, inbox_capacity=1)
    with pytest.raises(InfeasiblePolicy):
        run_threaded(g, objs, StepSizePolicy(), 5, tau_proc_cap=2)
    with pytest.raises(ValueError):
        run_threaded(g, objs, StepSizePolicy(), 0)
    with pytest.raises(ValueError):
        run_threaded(g, objs[:2], StepSizePolicy(), 5)


# ---------------------------------------------------------------- reconstruction

def test_effective_delay_arithmetic():
    events = [Event(0, 0.0, 0, "activation"), Event(0, 0.0, 1, "activation"),
              Event(5, 0.0, 0, "activation"), Event(5, 0.0, 0, "send", 7),
              Event(8, 0.0, 1, "activation"), Event(8, 0.0, 1, "deliver", 7)]
    s = reconstruct_schedule(EventLog(2, events))
    assert s.delays[5] == {(0, 1): 3}
    assert s.K == 9 and s.tau_msg_max == 3 and s.tau_proc_max == 8


def test_self_delay_is_zero_in_replay():
    s = reconstruct_schedule(lockstep_log(2, 3))
    assert all((i, i) not in d for d in s.delays for i in range(2))
    m = build_consensus_matrix(augment(complete_graph(2), s.tau_msg_max), s.active[1], s.delays[1])
    # each agent keeps its own half at delay 0
    assert m.block(0)[0, 0] == 0.5 and m.block(0)[1, 1] == 0.5


def test_lockstep_collapses_to_semi_synchronous():
    s = reconstruct_schedule(lockstep_log(3, 6))
    assert all(a == frozenset(range(3)) for a in s.active)
    assert s.tau_proc_max == 1 and s.tau_msg_max <= 1
    assert verify_bounds(s, complete_graph(3)).ok


def test_incomplete_logs():
    with pytest.raises(IncompleteLog):
        reconstruct_schedule(EventLog(2, []))
    base = [Event(0, 0.0, 0, "activation"), Event(0, 0.0, 1, "activation")]
    with pytest.raises(IncompleteLog, match="never delivered"):
        reconstruct_schedule(EventLog(2, base + [Event(0, 0.0, 0, "send", 1)]))
    with pytest.raises(IncompleteLog, match="without a matching send"):
        reconstruct_schedule(EventLog(2, base + [Event(0, 0.0, 1, "deliver", 4)]))
    with pytest.raises(IncompleteLog, match="before it was sent"):
        reconstruct_schedule(EventLog(2, base + [Event(2, 0.0, 0, "activation"), Event(2, 0.0, 0, "send", 1),
                                                 Event(1, 0.0, 1, "deliver", 1)]))


def test_event_log_csv_round_trip(tmp_path):
    g = ring_graph(3)
    res = run_threaded(g, quads(DISTINCT[:3]), StepSizePolicy("diminishing", 0.1, 0.6), 15, seed=4)
    path = tmp_path / "events.csv"
    write_event_log(res.log, path)
    back = read_event_log(path)
    assert back.n == 3
    assert [(e.index, e.agent, e.kind, e.msg_id, e.digest) for e in back.events] == \
        [(e.index, e.agent, e.kind, e.msg_id, e.digest) for e in res.log.events]
    assert reconstruct_schedule(back) == res.schedule
    assert path.read_text().splitlines()[0] == "index,wall_ms,agent,kind,msg_id,digest"


def test_event_log_bad_row(tmp_path):
    path = tmp_path / "events.csv"
    path.write_text("index,wall_ms,agent,kind,msg_id,digest\n0,0.0,1,activation,,\n1,0.0,1,teleport,,\n")
    with pytest.raises(ValueError, match=":3:"):
        read_event_log(path)
    path.write_text("a,b\n")
    with pytest.raises(ValueError, match="header"):
        read_event_log(path)
