"""Asynchronous gradient-push: push-sum mixing with locally applied gradient steps.

Two independent formulations are provided and are expected to agree to
rounding:

* :func:`run_agp` advances the stacked augmented state with one sparse
  mixing matrix per index;
* :func:`agent_pseudocode_run` runs each agent's local loop (compute, copy
  shares to a send buffer, drain the receive buffer) with explicit message
  objects in flight.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, StepSizeExceedsBound
from .objectives import global_constants
from .schedule import Schedule
from .topology import AugmentedGraph, build_consensus_matrix

log = logging.getLogger(__name__)

__all__ = [
    "POLICY_KINDS",
    "StepSizePolicy",
    "AgpRun",
    "theoretical_step_bound",
    "known_rates_weights",
    "step_size",
    "run_agp",
    "agent_pseudocode_run",
    "write_run_csv",
    "read_run_csv",
]

POLICY_KINDS = ("constant", "diminishing", "known_rates_constant", "known_rates_diminishing")


def theoretical_step_bound(mu: float, M: float, N_out_max: int, n: int, tau_bar: int) -> float:
    """Largest step size for which the worst-case analysis applies: ``mu/(2M^2) (1/N)^(n(tau_bar+1))``."""
    if mu <= 0 or M <= 0 or N_out_max < 1:
        raise ValueError("mu, M and N_out_max must be positive")
    exponent = n * (tau_bar + 1)
    if exponent < 0:
        raise ValueError("n * (tau_bar + 1) must be nonnegative")
    return mu / (2.0 * M * M) * (1.0 / N_out_max) ** exponent


def _partial_power_sum(m: int, theta: float) -> float:
    return float(np.sum(np.arange(1, m + 1, dtype=float) ** -theta))


def known_rates_weights(kind: str, K: int, final_counts, theta: float) -> np.ndarray:
    """Per-agent multipliers that equalise cumulative step mass given final local counts ``c_i[K-1]``."""
    c = np.asarray(final_counts, dtype=np.int64)
    if np.any(c < 1) or np.any(c > K):
        raise ValueError("final counts must lie in 1..K")
    if kind == "known_rates_constant":
        return K / c.astype(float)
    if kind == "known_rates_diminishing":
        total = _partial_power_sum(K, theta)
        return np.array([total / _partial_power_sum(int(ci), theta) for ci in c])
    raise ValueError(f"{kind!r} is not a known-rates policy")


@dataclass(frozen=True)
class StepSizePolicy:
    """Step-size regime. ``w`` defaults to ones; known-rates kinds fill it from a schedule."""

    kind: str = "diminishing"
    B: float = 1.0
    theta: float = 0.6
    w: tuple[float, ...] | None = None
    K: int | None = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown step-size kind {self.kind!r}")
        if not np.isfinite(self.B) or self.B < 0:
            raise ValueError(f"B must be finite and >= 0, got {self.B}")
        if not 0 < self.theta < 1:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        if self.w is not None:
            object.__setattr__(self, "w", tuple(float(v) for v in self.w))
            if any(v < 1 - 1e-12 for v in self.w):
                raise ValueError(f"multipliers w_i must be >= 1, got {self.w}")
        if self.K is not None and self.K < 1:
            raise ValueError("K must be positive")

    @property
    def is_constant(self) -> bool:
        return self.kind.endswith("constant")

    def resolve(self, s: Schedule) -> StepSizePolicy:
        """Fill in ``K`` and ``w`` from the schedule where they are unset."""
        K = self.K if self.K is not None else s.K
        w = self.w
        if w is None:
            if self.kind.startswith("known_rates"):
                w = tuple(known_rates_weights(self.kind, s.K, s.counters[-1], self.theta))
            else:
                w = (1.0,) * s.n
        if len(w) != s.n:
            raise DimensionMismatch(f"{len(w)} multipliers for {s.n} agents")
        return replace(self, K=K, w=w)

    def alphas(self, counts: np.ndarray) -> np.ndarray:
        """Step sizes of every agent given their current local counters ``c_i[k]``."""
        w = np.asarray(self.w if self.w is not None else np.ones(len(counts)))
        if self.is_constant:
            if self.K is None:
                raise ValueError("constant step sizes need the horizon K")
            return w * self.B / float(self.K) ** self.theta
        return w * self.B / np.asarray(counts, dtype=float) ** self.theta


def step_size(policy: StepSizePolicy, i: int, k: int, c_i_k: int) -> float:
    """Step size of agent ``i`` at index ``k`` whose local counter is ``c_i_k``."""
    if c_i_k < 1:
        raise ValueError("local counters start at 1")
    if policy.w is None and policy.kind.startswith("known_rates"):
        raise ValueError("known-rates policies must be resolved against a schedule first")
    w = 1.0 if policy.w is None else policy.w[i]
    if policy.is_constant:
        if policy.K is None:
            raise ValueError("constant step sizes need the horizon K")
        return w * policy.B / float(policy.K) ** policy.theta
    return w * policy.B / float(c_i_k) ** policy.theta


@dataclass
class AgpRun:
    """Per-index logs of one optimisation run.

    ``xbar`` and ``z`` have ``K + 1`` rows (indices 0..K); ``alpha`` and
    ``alpha_delta`` have ``K`` rows (the step applied at indices 0..K-1).
    """

    xbar: np.ndarray
    z: np.ndarray
    alpha: np.ndarray
    alpha_delta: np.ndarray
    y_real: np.ndarray
    x_total: np.ndarray
    y_total: np.ndarray
    x_final: np.ndarray
    y_final: np.ndarray
    grad_norm_max: float
    policy: StepSizePolicy | None = None
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.alpha_delta.shape[0]

    @property
    def n(self) -> int:
        return self.z.shape[1]

    @property
    def d(self) -> int:
        return self.xbar.shape[1]

    def consensus_errors(self) -> np.ndarray:
        return np.abs(self.z - self.xbar[:, None, :]).sum(axis=2).max(axis=1)


def _prepare(ag, s, objs, x0, policy):
    if s.n != ag.n or len(objs) != ag.n:
        raise DimensionMismatch(f"graph has {ag.n} agents, schedule {s.n}, objectives {len(objs)}")
    if s.tau_msg_max > ag.tau_msg_max:
        raise DimensionMismatch("schedule delays exceed the augmentation depth")
    if s.K and s.active[0] != frozenset(range(s.n)):
        raise ValueError("index 0 must activate every agent")
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = x0[:, None]
    d = objs[0].dim
    if x0.shape != (ag.n, d) or any(o.dim != d for o in objs):
        raise DimensionMismatch(f"x0 shape {x0.shape} does not match {ag.n} agents of dimension {d}")
    if not policy.is_constant and policy.theta <= 0.5:
        log.warning("diminishing steps with theta=%g <= 0.5 are not square-summable; "
                    "convergence guarantees do not apply", policy.theta)
    return x0, policy.resolve(s)


def _step_bound(ag, s, objs) -> float:
    c = global_constants(objs)
    return theoretical_step_bound(c.mu, c.M, ag.base.n_out_max, ag.n, s.tau_bar)


def _check_alphas(alpha, bound, enforce, warned) -> bool:
    if alpha.max(initial=0.0) <= bound:
        return warned
    if enforce:
        raise StepSizeExceedsBound(f"step size {alpha.max():.3e} exceeds the bound {bound:.3e}")
    if not warned:
        log.warning("step size %.3e exceeds the worst-case bound %.3e", alpha.max(), bound)
    return True


def run_agp(
    ag: AugmentedGraph,
    s: Schedule,
    objs,
    x0,
    policy: StepSizePolicy,
    enforce_theoretical_bound: bool = False,
) -> AgpRun:
    """Matrix formulation: ``x <- P[k] (x - G[k])``, ``y <- P[k] y``, ``z = x / y``.

    Row ``i`` of ``G[k]`` is ``alpha_i[k] delta_i[k] grad f_i(z_i[k])`` with
    ``z_i[k]`` the estimate held before mixing.
    """
    x0, pol = _prepare(ag, s, objs, x0, policy)
    n, d, K, N = ag.n, x0.shape[1], s.K, ag.size
    bound = _step_bound(ag, s, objs)
    warned = False

    x = np.zeros((N, d))
    x[:n] = x0
    y = np.zeros(N)
    y[:n] = 1.0
    xbar = np.empty((K + 1, d))
    z = np.empty((K + 1, n, d))
    y_real = np.empty((K + 1, n))
    x_total = np.empty((K + 1, d))
    y_total = np.empty(K + 1)
    alpha = np.empty((K, n))
    alpha_delta = np.empty((K, n))
    gmax = 0.0
    delta = s.delta
    counts = s.counters

    for k in range(K + 1):
        z[k] = x[:n] / y[:n, None]
        x_total[k] = x.sum(axis=0)
        xbar[k] = x_total[k] / n
        y_real[k] = y[:n]
        y_total[k] = y.sum()
        if k == K:
            break
        a = pol.alphas(counts[k])
        warned = _check_alphas(a, bound, enforce_theoretical_bound, warned)
        alpha[k] = a
        alpha_delta[k] = a * delta[k]
        G = np.zeros((N, d))
        for i in np.flatnonzero(delta[k]):
            g = objs[i].gradient(z[k, i])
            gmax = max(gmax, float(np.linalg.norm(g)))
            G[i] = alpha_delta[k, i] * g
        m = build_consensus_matrix(ag, s.active[k], s.delays[k])
        x = m.matvec(x - G)
        y = m.matvec(y)

    return AgpRun(xbar, z, alpha, alpha_delta, y_real, x_total, y_total, x, y, gmax, pol)


def agent_pseudocode_run(
    ag: AugmentedGraph,
    s: Schedule,
    objs,
    x0,
    policy: StepSizePolicy,
    enforce_theoretical_bound: bool = False,
) -> AgpRun:
    """Per-agent formulation with explicit send and receive buffers.

    At each index every active agent first performs its local computation
    and copies ``(x_i / N_i, y_i / N_i)`` to each out-neighbour with the
    scheduled delivery index; then every active agent keeps its own share and
    sums all messages whose delivery index has come due.
    """
    x0, pol = _prepare(ag, s, objs, x0, policy)
    g = ag.base
    n, d, K = ag.n, x0.shape[1], s.K
    bound = _step_bound(ag, s, objs)
    warned = False

    xs = [x0[i].copy() for i in range(n)]
    ys = [1.0] * n
    inbox: list[list[tuple[int, np.ndarray, float]]] = [[] for _ in range(n)]
    xbar = np.empty((K + 1, d))
    z = np.empty((K + 1, n, d))
    y_real = np.empty((K + 1, n))
    x_total = np.empty((K + 1, d))
    y_total = np.empty(K + 1)
    alpha = np.empty((K, n))
    alpha_delta = np.zeros((K, n))
    gmax = 0.0
    counts = s.counters

    def snapshot(k):
        for i in range(n):
            z[k, i] = xs[i] / ys[i]
            y_real[k, i] = ys[i]
        in_x = [m[1] for box in inbox for m in box]
        x_total[k] = np.sum(xs + in_x, axis=0)
        xbar[k] = x_total[k] / n
        y_total[k] = sum(ys) + sum(m[2] for box in inbox for m in box)

    for k in range(K + 1):
        snapshot(k)
        if k == K:
            break
        a = pol.alphas(counts[k])
        warned = _check_alphas(a, bound, enforce_theoretical_bound, warned)
        alpha[k] = a
        act = sorted(s.active[k])

        # local computation and send-buffer copy
        for i in act:
            grad = objs[i].gradient(xs[i] / ys[i])
            gmax = max(gmax, float(np.linalg.norm(grad)))
            alpha_delta[k, i] = a[i]
            xs[i] = xs[i] - a[i] * grad
            share = 1.0 / g.out_degree(i)
            for j in g.out_neighbors(i):
                if j != i:
                    inbox[j].append((k + s.delays[k][(i, j)], xs[i] * share, ys[i] * share))
            xs[i] = xs[i] * share
            ys[i] = ys[i] * share

        # drain every message that has come due
        for i in act:
            due = [m for m in inbox[i] if m[0] <= k]
            inbox[i] = [m for m in inbox[i] if m[0] > k]
            for _, mx, my in due:
                xs[i] = xs[i] + mx
                ys[i] = ys[i] + my

    # lay undelivered messages back onto the virtual rows they would occupy
    x_final = np.zeros((ag.size, d))
    y_final = np.zeros(ag.size)
    x_final[:n] = np.array(xs)
    y_final[:n] = ys
    for j, box in enumerate(inbox):
        for t, mx, my in box:
            flat = ag.index(j, max(t - K + 1, 0))
            x_final[flat] += mx
            y_final[flat] += my
    return AgpRun(xbar, z, alpha, alpha_delta, y_real, x_total, y_total, x_final, y_final, gmax, pol)


def write_run_csv(run: AgpRun, path: str | Path) -> None:
    """Tidy trajectory: ``k, agent, z_*, xbar_*, alpha_delta`` (blank step at the final index)."""
    d = run.d
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "agent"] + [f"z_{c}" for c in range(d)]
                   + [f"xbar_{c}" for c in range(d)] + ["alpha_delta"])
        xb = [[f"{v:.17g}" for v in row] for row in run.xbar]
        for k in range(run.K + 1):
            for i in range(run.n):
                ad = f"{run.alpha_delta[k, i]:.17g}" if k < run.K else ""
                w.writerow([k, i + 1] + [f"{v:.17g}" for v in run.z[k, i]] + xb[k] + [ad])


@dataclass
class RunTable:
    """What a trajectory CSV carries: enough for post-hoc bias and rate analysis."""

    xbar: np.ndarray
    z: np.ndarray
    alpha_delta: np.ndarray

    @property
    def K(self) -> int:
        return self.alpha_delta.shape[0]

    @property
    def n(self) -> int:
        return self.z.shape[1]


def read_run_csv(path: str | Path) -> RunTable:
    """Parse a trajectory CSV written by :func:`write_run_csv`; errors name the offending row."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        zc = [c for c in header if c.startswith("z_")]
        xc = [c for c in header if c.startswith("xbar_")]
        if header[:2] != ["k", "agent"] or header[-1] != "alpha_delta" or not zc or len(zc) != len(xc):
            raise ValueError(f"{path}: unexpected header {header}")
        d = len(zc)
        recs = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                k, i = int(row[0]), int(row[1])
                vals = [float(v) for v in row[2: 2 + 2 * d]]
                ad = float(row[-1]) if row[-1] != "" else np.nan
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            recs.append((k, i, vals, ad))
    if not recs:
        raise ValueError(f"{path}: no data rows")
    K = max(r[0] for r in recs)
    n = max(r[1] for r in recs)
    if len(recs) != (K + 1) * n:
        raise ValueError(f"{path}: expected {(K + 1) * n} rows for K={K}, n={n}, found {len(recs)}")
    z = np.empty((K + 1, n, d))
    xbar = np.empty((K + 1, d))
    ad = np.empty((K, n))
    for lineno, (k, i, vals, a) in enumerate(recs, start=2):
        if not (0 <= k <= K and 1 <= i <= n):
            raise ValueError(f"{path}:{lineno}: index out of range")
        z[k, i - 1] = vals[:d]
        xbar[k] = vals[d:]
        if k < K:
            if np.isnan(a):
                raise ValueError(f"{path}:{lineno}: missing alpha_delta")
            ad[k, i - 1] = a
    return RunTable(xbar=xbar, z=z, alpha_delta=ad)
