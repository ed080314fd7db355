"""Activation sets and message delays over a finite horizon of time indices.

Conventions used throughout:

* agents are 0-based internally, 1-based in the text format;
* index 0 activates every agent, so every agent has ``delta_i[0] = 1``;
* stored delays are *effective* delays: a message agent ``i`` sends at index
  ``k`` with delay ``r`` is folded into the receiver's state during the
  receiver's gossip phase at index ``k + r``, so the receiver must be active
  there (or ``k + r`` must fall past the horizon).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import IndexOutOfRange, InfeasiblePolicy
from .topology import ReferenceGraph, complete_graph

__all__ = [
    "Schedule",
    "RateRatio",
    "BoundsReport",
    "generate_schedule",
    "pi",
    "verify_bounds",
    "local_iteration_counter",
    "truncate_schedule",
    "minimal_tau_msg",
    "half_slow_multipliers",
    "dump_schedule",
    "load_schedule",
    "write_schedule",
    "read_schedule",
]


@dataclass(frozen=True)
class RateRatio:
    """Agent ``i`` activates exactly at indices divisible by ``multipliers[i]``."""

    multipliers: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "multipliers", tuple(int(m) for m in self.multipliers))
        if any(m < 1 for m in self.multipliers):
            raise InfeasiblePolicy(f"period multipliers must be >= 1, got {self.multipliers}")


@dataclass(frozen=True)
class Schedule:
    n: int
    K: int
    active: tuple[frozenset[int], ...]
    delays: tuple[dict[tuple[int, int], int], ...]
    tau_proc_max: int
    tau_msg_max: int
    seed: int | None = None

    @property
    def tau_bar(self) -> int:
        return self.tau_msg_max + self.tau_proc_max - 1

    @cached_property
    def delta(self) -> np.ndarray:
        """``(K, n)`` 0/1 activation indicators, with row 0 forced to ones."""
        out = np.zeros((self.K, self.n), dtype=np.int64)
        for k, act in enumerate(self.active):
            out[k, list(act)] = 1
        if self.K:
            out[0, :] = 1
        return out

    @cached_property
    def counters(self) -> np.ndarray:
        """``(K, n)`` local iteration counters ``c_i[k]``."""
        return np.cumsum(self.delta, axis=0)

    @cached_property
    def _last_before(self) -> np.ndarray:
        # row k holds, per agent, the latest k' < k with the agent active (0 if none)
        out = np.zeros((self.K + 1, self.n), dtype=np.int64)
        last = np.zeros(self.n, dtype=np.int64)
        for k in range(self.K):
            out[k] = last
            for i in self.active[k]:
                last[i] = k
        out[self.K] = last
        return out


def pi(s: Schedule, i: int, k: int) -> int:
    """Latest index strictly before ``k`` at which agent ``i`` was active, else 0."""
    if not 1 <= k <= s.K:
        raise IndexOutOfRange(f"k={k} outside 1..{s.K}")
    return int(s._last_before[k, i])


def local_iteration_counter(s: Schedule, i: int, k: int) -> int:
    if not 0 <= k < s.K:
        raise IndexOutOfRange(f"k={k} outside 0..{s.K - 1}")
    return int(s.counters[k, i])


def truncate_schedule(s: Schedule, K: int) -> Schedule:
    """First ``K`` indices of ``s``; delays landing past the new horizon stay as drawn."""
    if not 1 <= K <= s.K:
        raise IndexOutOfRange(f"K={K} outside 1..{s.K}")
    return Schedule(s.n, K, s.active[:K], s.delays[:K], s.tau_proc_max, s.tau_msg_max, s.seed)


@dataclass
class BoundsReport:
    ok: bool
    max_observed_proc_gap: int
    max_observed_msg_delay: int
    violations: list[str] = field(default_factory=list)


def verify_bounds(s: Schedule, graph: ReferenceGraph | None = None) -> BoundsReport:
    """Check the processing-gap, delay-range and delivery-alignment invariants.

    With ``graph`` given, also checks that every active sender has a delay
    for each out-edge and that no delay names a non-edge.
    """
    v: list[str] = []
    n, K = s.n, s.K
    if len(s.active) != K or len(s.delays) != K:
        v.append(f"expected {K} activation sets and delay maps")
        return BoundsReport(False, 0, 0, v)
    if K and s.active[0] != frozenset(range(n)):
        v.append("index 0 must activate every agent")

    max_gap = 1
    last = [None] * n
    for k, act in enumerate(s.active):
        for i in act:
            if not 0 <= i < n:
                v.append(f"index {k}: agent {i + 1} out of range")
                continue
            if last[i] is not None:
                gap = k - last[i]
                max_gap = max(max_gap, gap)
                if gap > s.tau_proc_max:
                    v.append(f"agent {i + 1}: processing gap {gap} at index {k} exceeds {s.tau_proc_max}")
            last[i] = k

    max_delay = 0
    for k, dmap in enumerate(s.delays):
        act = s.active[k]
        for (i, j), r in dmap.items():
            if i not in act:
                v.append(f"index {k}: delay given for inactive sender {i + 1}")
                continue
            if i == j:
                if r != 0:
                    v.append(f"index {k}: self delay {r} for agent {i + 1}")
                continue
            max_delay = max(max_delay, r)
            if not 0 <= r <= s.tau_msg_max:
                v.append(f"index {k}: delay {i + 1}->{j + 1} = {r} outside 0..{s.tau_msg_max}")
            elif k + r < K and j not in s.active[k + r]:
                v.append(
                    f"index {k}: message {i + 1}->{j + 1} with delay {r} lands on index "
                    f"{k + r} where agent {j + 1} is idle"
                )
            if graph is not None and (i, j) not in graph.edges:
                v.append(f"index {k}: delay for non-edge {i + 1}->{j + 1}")
        if graph is not None:
            for i in act:
                for j in graph.out_neighbors(i):
                    if j != i and (i, j) not in dmap:
                        v.append(f"index {k}: missing delay for {i + 1}->{j + 1}")
    return BoundsReport(not v, max_gap, max_delay, v)


def minimal_tau_msg(multipliers, graph: ReferenceGraph | None = None) -> int:
    """Smallest message-delay bound under which a rate-ratio schedule can align deliveries."""
    m = tuple(int(x) for x in multipliers)
    n = len(m)
    g = graph or complete_graph(n)
    receivers = [j for j in range(n) if any(i != j for i in g.in_neighbors(j))]
    return max((m[j] - 1 for j in receivers), default=0)


def half_slow_multipliers(n: int, slow: int) -> tuple[int, ...]:
    """Alternate fast (period 1) and slow (period ``slow``) agents."""
    return tuple(1 if i % 2 == 0 else slow for i in range(n))


def _admissible(r_max: int, k: int, K: int, receiver_active) -> list[int]:
    return [r for r in range(r_max + 1) if k + r >= K or receiver_active(k + r)]


def _draw_delays(rng, graph, active, K, tau_msg_max):
    delays = []
    for k, act in enumerate(active):
        dmap = {}
        for i in sorted(act):
            for j in graph.out_neighbors(i):
                if j == i:
                    continue
                choices = _admissible(tau_msg_max, k, K, lambda t, j=j: j in active[t])
                dmap[(i, j)] = int(choices[rng.integers(len(choices))])
        delays.append(dmap)
    return tuple(delays)


def _random_activations(rng, graph, K, tau_proc_max, tau_msg_max, p):
    n = graph.n
    last = np.zeros(n, dtype=np.int64)
    oldest_unmet: list[int | None] = [None] * n
    active = []
    for k in range(K):
        if k == 0:
            act = set(range(n))
        else:
            draws = rng.random(n) < p
            act = {i for i in range(n) if draws[i] or k - last[i] >= tau_proc_max}
            act |= {
                j for j in range(n)
                if oldest_unmet[j] is not None and oldest_unmet[j] + tau_msg_max <= k
            }
            if tau_msg_max == 0:
                # zero delay means every receiver must process in the same index
                stack = list(act)
                while stack:
                    i = stack.pop()
                    for j in graph.out_neighbors(i):
                        if j not in act:
                            act.add(j)
                            stack.append(j)
        for i in act:
            last[i] = k
            oldest_unmet[i] = None
        for i in act:
            for j in graph.out_neighbors(i):
                if j not in act and oldest_unmet[j] is None:
                    oldest_unmet[j] = k
        active.append(frozenset(act))
    return tuple(active)


def generate_schedule(
    n: int,
    K: int,
    tau_proc_max: int,
    tau_msg_max: int,
    policy: str | RateRatio,
    seed: int | None = 0,
    graph: ReferenceGraph | None = None,
    activation_prob: float = 0.5,
) -> Schedule:
    """Build a valid schedule for one of the supported policies.

    ``policy`` is ``"semi_synchronous"``, ``"uniform_random"`` or a
    ``RateRatio``. Delays are drawn uniformly over the values that land on an
    active index of the receiver. Without ``graph`` a complete graph is used.
    """
    if tau_proc_max < 1:
        raise InfeasiblePolicy(f"tau_proc_max must be >= 1, got {tau_proc_max}")
    if tau_msg_max < 0:
        raise InfeasiblePolicy(f"tau_msg_max must be >= 0, got {tau_msg_max}")
    if K < 1:
        raise InfeasiblePolicy(f"horizon K must be >= 1, got {K}")
    g = graph or complete_graph(n)
    if g.n != n:
        raise InfeasiblePolicy(f"graph has {g.n} agents, schedule asked for {n}")
    rng = np.random.default_rng(seed)

    if isinstance(policy, RateRatio):
        m = policy.multipliers
        if len(m) != n:
            raise InfeasiblePolicy(f"{len(m)} multipliers for {n} agents")
        if max(m) > tau_proc_max:
            raise InfeasiblePolicy(
                f"multiplier {max(m)} exceeds tau_proc_max={tau_proc_max}"
            )
        need = minimal_tau_msg(m, g)
        if tau_msg_max < need:
            raise InfeasiblePolicy(
                f"rate ratio {m} needs tau_msg_max >= {need} to align deliveries, got {tau_msg_max}"
            )
        active = tuple(frozenset(i for i in range(n) if k % m[i] == 0) for k in range(K))
    elif policy == "semi_synchronous":
        active = tuple(frozenset(range(n)) for _ in range(K))
    elif policy == "uniform_random":
        if not 0.0 <= activation_prob <= 1.0:
            raise InfeasiblePolicy(f"activation_prob {activation_prob} outside [0, 1]")
        active = _random_activations(rng, g, K, tau_proc_max, tau_msg_max, activation_prob)
    else:
        raise InfeasiblePolicy(f"unknown schedule policy {policy!r}")

    delays = _draw_delays(rng, g, active, K, tau_msg_max)
    return Schedule(
        n=n,
        K=K,
        active=active,
        delays=delays,
        tau_proc_max=int(tau_proc_max),
        tau_msg_max=int(tau_msg_max),
        seed=seed,
    )


# ---------------------------------------------------------------- text format

_HEADER = "# agp-schedule v1"
_DELAY_RE = re.compile(r"(\d+)\s*->\s*(\d+)\s*:\s*(\d+)")


def dump_schedule(s: Schedule) -> str:
    seed = "none" if s.seed is None else str(s.seed)
    lines = [
        _HEADER,
        f"n={s.n} K={s.K} tau_proc_max={s.tau_proc_max} tau_msg_max={s.tau_msg_max} seed={seed}",
    ]
    for k in range(s.K):
        act = ",".join(str(i + 1) for i in sorted(s.active[k]))
        dl = " ".join(f"{i + 1}->{j + 1}:{r}" for (i, j), r in sorted(s.delays[k].items()))
        lines.append(f"{k} | active: {act} | delay {dl}".rstrip())
    return "\n".join(lines) + "\n"


def load_schedule(text: str) -> Schedule:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != _HEADER:
        raise ValueError("missing schedule header line")
    try:
        meta = dict(tok.split("=", 1) for tok in lines[1].split())
        n, K = int(meta["n"]), int(meta["K"])
        tau_proc, tau_msg = int(meta["tau_proc_max"]), int(meta["tau_msg_max"])
        seed = None if meta["seed"] == "none" else int(meta["seed"])
    except (IndexError, KeyError, ValueError) as exc:
        raise ValueError(f"malformed schedule metadata line: {exc}") from None
    body = lines[2:]
    if len(body) != K:
        raise ValueError(f"expected {K} index lines, found {len(body)}")
    active, delays = [], []
    for expect, line in enumerate(body):
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 3 or not parts[1].startswith("active:") or not parts[2].startswith("delay"):
            raise ValueError(f"line for index {expect}: cannot parse {line!r}")
        if int(parts[0]) != expect:
            raise ValueError(f"index lines out of order: expected {expect}, got {parts[0]}")
        ids = parts[1][len("active:"):].strip()
        active.append(frozenset(int(t) - 1 for t in ids.split(",")) if ids else frozenset())
        dmap = {}
        rest = parts[2][len("delay"):]
        for m in _DELAY_RE.finditer(rest):
            dmap[(int(m[1]) - 1, int(m[2]) - 1)] = int(m[3])
        if len(dmap) != len(_DELAY_RE.findall(rest)) or _DELAY_RE.sub("", rest).strip():
            raise ValueError(f"line for index {expect}: malformed delay list")
        delays.append(dmap)
    return Schedule(n, K, tuple(active), tuple(delays), tau_proc, tau_msg, seed)


def write_schedule(s: Schedule, path: str | Path) -> None:
    Path(path).write_text(dump_schedule(s))


def read_schedule(path: str | Path) -> Schedule:
    return load_schedule(Path(path).read_text())
