"""Threaded execution backend: one worker thread per agent, bounded inboxes.

Each worker repeatedly performs a local gradient step on its own state,
pushes shares of ``(x, y)`` to its out-neighbours' inboxes, keeps its own
share, and sums everything waiting in its inbox. A global counter taken
under a lock at every activation orders events into discrete indices, so
the event log maps back onto a :class:`~agpush.schedule.Schedule` for
replay in the simulator.
"""

from __future__ import annotations

import csv
import hashlib
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .agp import StepSizePolicy, known_rates_weights
from .errors import Deadlock, IncompleteLog, InfeasiblePolicy, QueueOverflow
from .schedule import Schedule
from .topology import ReferenceGraph

__all__ = [
    "Event",
    "EventLog",
    "AgentWorker",
    "ThreadedResult",
    "run_threaded",
    "reconstruct_schedule",
    "resolve_threaded_policy",
    "write_event_log",
    "read_event_log",
]

EVENT_KINDS = ("activation", "send", "deliver")
STOP_RULES = ("slowest", "own")


@dataclass(frozen=True)
class Event:
    index: int
    wall_ms: float
    agent: int
    kind: str
    msg_id: int | None = None
    digest: str = ""


@dataclass
class EventLog:
    n: int
    events: list[Event] = field(default_factory=list)

    def activations(self) -> list[Event]:
        return [e for e in self.events if e.kind == "activation"]


def _digest(v: np.ndarray, w: float) -> str:
    return hashlib.blake2b(np.append(v, w).tobytes(), digest_size=6).hexdigest()


def resolve_threaded_policy(
    policy: StepSizePolicy, n: int, stop: int, stop_rule: str = "slowest"
) -> StepSizePolicy:
    """Fix ``K`` and ``w`` before a threaded run starts.

    Under ``stop_rule="own"`` every agent performs exactly ``stop``
    activations; index 0 is shared and each later activation takes its own
    index, so the run spans ``K = 1 + n (stop - 1)`` indices and every final
    local counter is ``stop``. Under ``"slowest"`` the horizon is not known
    in advance, so constant kinds use ``policy.K`` or the nominal ``n * stop``
    and known-rates kinds need explicit multipliers.
    """
    if stop_rule not in STOP_RULES:
        raise ValueError(f"stop_rule must be one of {STOP_RULES}, got {stop_rule!r}")
    if stop_rule == "own":
        K = policy.K if policy.K is not None else 1 + n * (stop - 1)
    else:
        K = policy.K if policy.K is not None else n * stop
    w = policy.w
    if w is None:
        if policy.kind.startswith("known_rates"):
            if stop_rule != "own":
                raise InfeasiblePolicy(
                    "known-rates multipliers need final local counts, which only the 'own' stop rule fixes"
                )
            w = tuple(known_rates_weights(policy.kind, K, [stop] * n, policy.theta))
        else:
            w = (1.0,) * n
    return replace(policy, K=K, w=w)


class _Shared:
    """State guarded by one condition variable: the index counter and the barrier bookkeeping."""

    def __init__(self, n: int, cap: int | None, watchdog_s: float, stop: int, stop_rule: str):
        self.cond = threading.Condition()
        self.stop = stop
        self.stop_rule = stop_rule
        self.counts = [0] * n
        self.next_index = 1
        self.next_msg = 0
        self.cap = cap
        self.last = [0] * n
        self.running = set(range(n))
        self.events: list[Event] = []
        self.t0 = time.perf_counter()
        self.watchdog_s = watchdog_s
        self.failed = False

    def finished(self, i: int) -> bool:
        if self.stop_rule == "own":
            return self.counts[i] >= self.stop
        return min(self.counts) >= self.stop

    def now_ms(self) -> float:
        return (time.perf_counter() - self.t0) * 1e3

    def admissible(self, i: int) -> bool:
        """Whether agent ``i`` may take the next index without stranding a straggler.

        Every running agent must activate again by ``last + cap``; after
        handing out index ``k`` the remaining deadlines, sorted, must leave
        room for one index each.
        """
        if self.cap is None:
            return True
        k = self.next_index
        # agent i's own new deadline k + cap is never binding since cap >= n
        others = sorted(self.last[j] + self.cap for j in self.running if j != i)
        return all(d >= k + m for m, d in enumerate(others, start=1))


class AgentWorker:
    """One agent's local loop: compute, copy shares to neighbour inboxes, drain own inbox."""

    def __init__(self, i, graph, obj, x0, policy, stop, shared, inboxes, delay_s=0.0):
        self.i = i
        self.obj = obj
        self.x = np.array(x0, dtype=float)
        self.y = 1.0
        self.count = 0
        self.stop = stop
        self.policy = policy
        self.shared = shared
        self.inbox: queue.Queue = inboxes[i]
        self.out = [(j, inboxes[j]) for j in graph.out_neighbors(i) if j != i]
        self.share = 1.0 / graph.out_degree(i)
        self.delay_s = delay_s
        self.applied = np.zeros_like(self.x)

    @property
    def z(self) -> np.ndarray:
        return self.x / self.y

    def _alpha(self) -> float:
        p = self.policy
        w = p.w[self.i]
        if p.is_constant:
            return w * p.B / float(p.K) ** p.theta
        return w * p.B / float(self.count) ** p.theta

    def compute_and_send(self, k: int) -> None:
        sh = self.shared
        self.count += 1
        sh.counts[self.i] = self.count
        sh.events.append(Event(k, sh.now_ms(), self.i, "activation"))
        step = self._alpha() * self.obj.gradient(self.z)
        self.x = self.x - step
        self.applied += step
        mx, my = self.x * self.share, self.y * self.share
        for j, box in self.out:
            mid = sh.next_msg
            sh.next_msg += 1
            try:
                box.put_nowait((mid, k, mx.copy(), my))
            except queue.Full:
                raise QueueOverflow(f"inbox of agent {j + 1} is full") from None
            sh.events.append(Event(k, sh.now_ms(), self.i, "send", mid, _digest(mx, my)))
        self.x, self.y = mx, my

    def drain(self, k: int) -> None:
        sh = self.shared
        while True:
            try:
                mid, _, mx, my = self.inbox.get_nowait()
            except queue.Empty:
                return
            self.x = self.x + mx
            self.y = self.y + my
            sh.events.append(Event(k, sh.now_ms(), self.i, "deliver", mid, _digest(mx, my)))

    def run(self, start: threading.Barrier) -> None:
        sh = self.shared
        with sh.cond:
            self.compute_and_send(0)
        start.wait()
        with sh.cond:
            self.drain(0)
        start.wait()
        while True:
            # stands in for local computation time; without it one thread can
            # monopolise the interpreter and starve its peers' weight inflow
            time.sleep(self.delay_s)
            with sh.cond:
                waited_since = time.perf_counter()
                seen = sh.next_index
                while not sh.finished(self.i) and not sh.admissible(self.i):
                    if sh.failed:
                        return
                    sh.cond.wait(timeout=0.05)
                    if sh.next_index != seen:
                        seen, waited_since = sh.next_index, time.perf_counter()
                    elif time.perf_counter() - waited_since > sh.watchdog_s:
                        sh.failed = True
                        sh.cond.notify_all()
                        raise Deadlock(f"agent {self.i + 1} waited {sh.watchdog_s}s with no progress")
                if sh.finished(self.i) or sh.failed:
                    sh.running.discard(self.i)
                    sh.cond.notify_all()
                    return
                k = sh.next_index
                sh.next_index += 1
                sh.last[self.i] = k
                self.compute_and_send(k)
                self.drain(k)
                sh.cond.notify_all()


@dataclass
class ThreadedResult:
    log: EventLog
    x: np.ndarray
    y: np.ndarray
    inflight_x: np.ndarray
    inflight_y: float
    applied: np.ndarray
    schedule: Schedule
    policy: StepSizePolicy
    x0: np.ndarray
    wall_s: float

    @property
    def K(self) -> int:
        return self.schedule.K

    @property
    def xbar(self) -> np.ndarray:
        return (self.x.sum(axis=0) + self.inflight_x) / self.x.shape[0]

    @property
    def z(self) -> np.ndarray:
        return self.x / self.y[:, None]

    def conservation_defect(self) -> tuple[float, float]:
        """Deviation of total ``x`` and ``y`` mass from what the applied steps predict."""
        n = self.x.shape[0]
        x_expect = self.x0.sum(axis=0) - self.applied.sum(axis=0)
        dx = float(np.abs(self.x.sum(axis=0) + self.inflight_x - x_expect).max())
        dy = abs(float(self.y.sum()) + self.inflight_y - n)
        return dx, dy


def run_threaded(
    g: ReferenceGraph,
    objs,
    policy: StepSizePolicy,
    stop: int,
    straggler_delays=None,
    tau_proc_cap: int | None = None,
    seed: int | None = 0,
    x0=None,
    inbox_capacity: int | None = None,
    watchdog_s: float = 30.0,
    compute_s: float = 2e-4,
    stop_rule: str = "slowest",
) -> ThreadedResult:
    """Run every agent in its own thread until the stop rule fires.

    With ``stop_rule="slowest"`` (default) agents keep iterating until every
    agent has completed ``stop`` local iterations; with ``"own"`` each agent
    leaves after its own ``stop`` iterations.

    Every iteration after the first sleeps ``compute_s`` seconds plus
    ``straggler_delays[i]`` for agent ``i``. With ``tau_proc_cap``, an agent blocks
    rather than take an index that would leave some unfinished agent more
    than ``tau_proc_cap`` indices behind its last activation.
    """
    n = g.n
    if stop < 1:
        raise ValueError("stop must be a positive iteration budget")
    if len(objs) != n:
        raise ValueError(f"{len(objs)} objectives for {n} agents")
    if tau_proc_cap is not None and tau_proc_cap < n:
        raise InfeasiblePolicy(
            f"tau_proc_cap={tau_proc_cap} cannot be honoured by {n} agents taking one index each"
        )
    d = objs[0].dim
    if x0 is None:
        x0 = np.zeros((n, d))
        if seed is not None:
            x0 = np.random.default_rng(seed).standard_normal((n, d))
    x0 = np.asarray(x0, dtype=float).reshape(n, d)
    delays = list(straggler_delays) if straggler_delays is not None else [0.0] * n
    pol = resolve_threaded_policy(policy, n, stop, stop_rule)
    if inbox_capacity is None:
        lag = tau_proc_cap if tau_proc_cap is not None else stop
        inbox_capacity = n * (lag + 1) + n * stop
    shared = _Shared(n, tau_proc_cap, watchdog_s, stop, stop_rule)
    inboxes = [queue.Queue(maxsize=inbox_capacity) for _ in range(n)]
    workers = [
        AgentWorker(i, g, objs[i], x0[i], pol, stop, shared, inboxes, compute_s + delays[i])
        for i in range(n)
    ]
    start = threading.Barrier(n)
    errors: list[BaseException] = []

    def target(w):
        try:
            w.run(start)
        except BaseException as exc:  # re-raised in the caller
            errors.append(exc)
            with shared.cond:
                shared.failed = True
                shared.cond.notify_all()
            start.abort()

    threads = [threading.Thread(target=target, args=(w,), name=f"agent-{w.i + 1}") for w in workers]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wall = time.perf_counter() - t0
    real = [e for e in errors if not isinstance(e, threading.BrokenBarrierError)]
    if real or errors:
        raise (real or errors)[0]

    K = shared.next_index
    ix, iy = np.zeros(d), 0.0
    for j, box in enumerate(inboxes):
        # messages still waiting at the horizon count as processed at index K
        while not box.empty():
            mid, _, mx, my = box.get_nowait()
            ix += mx
            iy += my
            shared.events.append(Event(K, shared.now_ms(), j, "deliver", mid, _digest(mx, my)))
    log = EventLog(n=n, events=shared.events)
    return ThreadedResult(
        log=log,
        x=np.array([w.x for w in workers]),
        y=np.array([w.y for w in workers]),
        inflight_x=ix,
        inflight_y=iy,
        applied=np.array([w.applied for w in workers]),
        schedule=reconstruct_schedule(log),
        policy=pol,
        x0=x0,
        wall_s=wall,
    )


def reconstruct_schedule(log: EventLog) -> Schedule:
    """Map an event log onto discrete indices.

    Activation events give the activation sets; each message's delay is the
    receiver's processing index minus the sender's activation index, and the
    declared bounds are the observed maxima.
    """
    n = log.n
    acts = log.activations()
    if not acts:
        raise IncompleteLog("log has no activations")
    K = max(e.index for e in acts) + 1
    active = [set() for _ in range(K)]
    for e in acts:
        active[e.index].add(e.agent)
    sends = {e.msg_id: e for e in log.events if e.kind == "send"}
    delivers = {e.msg_id: e for e in log.events if e.kind == "deliver"}
    missing = sorted(set(sends) - set(delivers))
    if missing:
        raise IncompleteLog(f"{len(missing)} sent messages never delivered, first id {missing[0]}")
    orphan = sorted(set(delivers) - set(sends))
    if orphan:
        raise IncompleteLog(f"{len(orphan)} deliveries without a matching send, first id {orphan[0]}")
    delays = [dict() for _ in range(K)]
    max_delay = 0
    for mid, s in sends.items():
        r = delivers[mid].index - s.index
        if r < 0:
            raise IncompleteLog(f"message {mid} delivered before it was sent")
        delays[s.index][(s.agent, delivers[mid].agent)] = r
        max_delay = max(max_delay, r)
    last: dict[int, int] = {}
    max_gap = 1
    for k in range(K):
        for i in active[k]:
            if i in last:
                max_gap = max(max_gap, k - last[i])
            last[i] = k
    return Schedule(
        n=n,
        K=K,
        active=tuple(frozenset(a) for a in active),
        delays=tuple(delays),
        tau_proc_max=max_gap,
        tau_msg_max=max_delay,
        seed=None,
    )


def write_event_log(log: EventLog, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "wall_ms", "agent", "kind", "msg_id", "digest"])
        for e in log.events:
            w.writerow([e.index, f"{e.wall_ms:.3f}", e.agent + 1, e.kind,
                        "" if e.msg_id is None else e.msg_id, e.digest])


def read_event_log(path: str | Path) -> EventLog:
    events = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:5] != ["index", "wall_ms", "agent", "kind", "msg_id"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                kind = row[3]
                if kind not in EVENT_KINDS:
                    raise ValueError(f"unknown event kind {kind!r}")
                events.append(Event(int(row[0]), float(row[1]), int(row[2]) - 1, kind,
                                    int(row[4]) if row[4] else None, row[5] if len(row) > 5 else ""))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    n = len({e.agent for e in events if e.kind == "activation" and e.index == 0})
    return EventLog(n=n, events=events)
