import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from agpush.errors import IndexOutOfRange, InfeasiblePolicy
from agpush.schedule import (
    RateRatio,
    Schedule,
    dump_schedule,
    generate_schedule,
    half_slow_multipliers,
    load_schedule,
    local_iteration_counter,
    minimal_tau_msg,
    pi,
    read_schedule,
    truncate_schedule,
    verify_bounds,
    write_schedule,
)
from agpush.topology import complete_graph, erdos_renyi_graph, ring_graph

from _corpus import random_schedule


def hand_schedule(n, active_sets, delays=None, tau_proc=3, tau_msg=1):
    K = len(active_sets)
    delays = delays or [{} for _ in range(K)]
    return Schedule(n, K, tuple(frozenset(a) for a in active_sets), tuple(delays), tau_proc, tau_msg)


def test_semi_synchronous():
    s = generate_schedule(3, 10, 1, 2, "semi_synchronous", graph=ring_graph(3))
    assert all(a == frozenset(range(3)) for a in s.active)
    rep = verify_bounds(s, ring_graph(3))
    assert rep.ok and rep.max_observed_proc_gap == 1
    assert all(pi(s, i, k) == k - 1 for i in range(3) for k in range(1, 11))
    assert all(local_iteration_counter(s, i, k) == k + 1 for i in range(3) for k in range(10))


def test_rate_ratio_two_agents():
    s = generate_schedule(2, 12, 2, 1, RateRatio((1, 2)))
    assert all(0 in a for a in s.active)
    assert [k for k in range(12) if 1 in s.active[k]] == [0, 2, 4, 6, 8, 10]
    assert verify_bounds(s).max_observed_proc_gap == 2
    assert local_iteration_counter(s, 1, 5) == 3


def test_rate_ratio_infeasible():
    with pytest.raises(InfeasiblePolicy):
        generate_schedule(2, 10, 1, 1, RateRatio((1, 2)))
    with pytest.raises(InfeasiblePolicy):
        generate_schedule(2, 10, 2, 0, RateRatio((1, 2)))
    with pytest.raises(InfeasiblePolicy):
        RateRatio((0, 1))


@pytest.mark.parametrize("args", [
    dict(tau_proc_max=0, tau_msg_max=0, policy="semi_synchronous"),
    dict(tau_proc_max=1, tau_msg_max=-1, policy="semi_synchronous"),
    dict(tau_proc_max=1, tau_msg_max=0, policy="poisson"),
])
def test_invalid_generation_arguments(args):
    with pytest.raises(InfeasiblePolicy):
        generate_schedule(3, 5, **args)


def test_uniform_random_zero_delay():
    g = ring_graph(5)
    s = generate_schedule(5, 50, 3, 0, "uniform_random", seed=4, graph=g)
    assert all(r == 0 for d in s.delays for r in d.values())
    assert verify_bounds(s, g).ok


def test_minimal_tau_msg_and_half_slow():
    assert half_slow_multipliers(5, 4) == (1, 4, 1, 4, 1)
    assert minimal_tau_msg((1, 4, 1, 4, 1), ring_graph(5)) == 3
    assert minimal_tau_msg((3,)) == 0


def test_pi_example_and_first_index():
    s = hand_schedule(1, [{0}, {0}, set(), {0}, {0}])
    assert pi(s, 0, 4) == 3
    assert pi(s, 0, 1) == 0
    with pytest.raises(IndexOutOfRange):
        pi(s, 0, 0)


def test_counter_convention_index_zero():
    s = hand_schedule(2, [set(), {0}, {1}])
    assert s.counters[0].tolist() == [1, 1]
    assert s.counters[2].tolist() == [2, 2]


def test_idle_agent_violation_named():
    s = hand_schedule(2, [{0, 1}, {0}, {0}, {0}, {0}, {0, 1}], tau_proc=3, tau_msg=0)
    rep = verify_bounds(s)
    assert not rep.ok
    assert rep.max_observed_proc_gap == 5
    assert any("agent 2" in v and "gap 5" in v for v in rep.violations)


def test_delay_violations():
    delays = [{(0, 1): 2, (1, 0): 0}, {}, {}]
    s = hand_schedule(2, [{0, 1}, set(), {0, 1}], delays, tau_proc=2, tau_msg=1)
    assert any("outside 0..1" in v for v in verify_bounds(s).violations)
    delays = [{(0, 1): 1, (1, 0): 0}, {}, {}]
    s = hand_schedule(2, [{0, 1}, set(), {0, 1}], delays, tau_proc=2, tau_msg=1)
    assert any("idle" in v for v in verify_bounds(s).violations)
    delays = [{(0, 0): 1, (0, 1): 0, (1, 0): 0}]
    s = hand_schedule(2, [{0, 1}], delays, tau_proc=1, tau_msg=0)
    assert any("self delay" in v for v in verify_bounds(s).violations)


def test_graph_aware_checks():
    g = ring_graph(3)
    s = hand_schedule(3, [{0, 1, 2}], [{(0, 1): 0, (1, 2): 0}], tau_proc=1, tau_msg=0)
    rep = verify_bounds(s, g)
    assert any("missing delay for 3->1" in v for v in rep.violations)
    s = hand_schedule(3, [{0, 1, 2}], [{(0, 1): 0, (1, 2): 0, (2, 0): 0, (1, 0): 0}], tau_proc=1, tau_msg=0)
    assert any("non-edge 2->1" in v for v in verify_bounds(s, g).violations)


def test_index_zero_must_activate_everyone():
    s = hand_schedule(2, [{0}, {0, 1}], tau_proc=2, tau_msg=0)
    assert any("index 0" in v for v in verify_bounds(s).violations)


def test_text_round_trip(tmp_path):
    g = erdos_renyi_graph(5, 0.5, 2)
    s = generate_schedule(5, 40, 3, 2, "uniform_random", seed=9, graph=g)
    text = dump_schedule(s)
    back = load_schedule(text)
    assert back == s
    assert dump_schedule(back) == text
    write_schedule(s, tmp_path / "s.txt")
    assert read_schedule(tmp_path / "s.txt") == s
    assert text.splitlines()[1] == "n=5 K=40 tau_proc_max=3 tau_msg_max=2 seed=9"


def test_truncate():
    s = generate_schedule(3, 20, 2, 1, "uniform_random", seed=1)
    t = truncate_schedule(s, 5)
    assert t.K == 5 and t.active == s.active[:5]
    with pytest.raises(IndexOutOfRange):
        truncate_schedule(s, 21)


@given(seed=st.integers(0, 5000))
def test_generation_is_deterministic(seed):
    rng1, rng2 = np.random.default_rng(seed), np.random.default_rng(seed)
    g = erdos_renyi_graph(4, 0.5, seed)
    a = dump_schedule(random_schedule(rng1, g, 60, seed)).encode()
    b = dump_schedule(random_schedule(rng2, g, 60, seed)).encode()
    assert a == b


@given(seed=st.integers(0, 5000), n=st.integers(1, 6), K=st.integers(1, 120))
def test_generated_schedules_are_valid(seed, n, K):
    rng = np.random.default_rng(seed)
    g = erdos_renyi_graph(n, 0.5, seed)
    s = random_schedule(rng, g, K, seed)
    rep = verify_bounds(s, g)
    assert rep.ok, rep.violations
    assert rep.max_observed_proc_gap <= s.tau_proc_max
    assert rep.max_observed_msg_delay <= s.tau_msg_max


@given(seed=st.integers(0, 5000), n=st.integers(2, 6))
def test_processed_messages_recur_within_tau_bar_plus_one(seed, n):
    rng = np.random.default_rng(seed)
    g = erdos_renyi_graph(n, 0.5, seed)
    K = 150
    s = random_schedule(rng, g, K, seed)
    for (i, j) in g.edges:
        if i == j:
            continue
        processed = sorted({k + s.delays[k][(i, j)] for k in range(K) if i in s.active[k]
                            and k + s.delays[k][(i, j)] < K})
        assert processed[0] <= s.tau_msg_max
        assert np.diff(processed).max(initial=1) <= s.tau_bar + 1


@given(seed=st.integers(0, 5000))
def test_counters_step_by_activation(seed):
    rng = np.random.default_rng(seed)
    g = erdos_renyi_graph(4, 0.5, seed)
    s = random_schedule(rng, g, 80, seed)
    c = s.counters
    assert np.all(c[0] == 1)
    inc = np.diff(c, axis=0)
    assert np.array_equal(inc, s.delta[1:])


def test_complete_graph_default():
    s = generate_schedule(3, 5, 1, 0, "semi_synchronous")
    assert verify_bounds(s, complete_graph(3)).ok
