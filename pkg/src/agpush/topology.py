"""Reference digraphs, delay-chain augmentation, and column-stochastic mixing matrices.

Agents are 0-based internally. The plain-text edge-list format is 1-based.

Augmented node ``(i, r)`` (agent ``i``, delay slot ``r``) has flat index
``r * n + i``, so the ``n`` real agents come first, followed by one block of
``n`` virtual nodes per delay value.
"""

from __future__ import annotations

from collections import deque
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import (
    DelayOutOfBounds,
    IndexOutOfRange,
    MissingDelayAssignment,
    NonzeroSelfDelay,
    NotColumnStochastic,
    NotStronglyConnected,
)

__all__ = [
    "ReferenceGraph",
    "AugmentedGraph",
    "ConsensusMatrix",
    "build_reference_graph",
    "augment",
    "build_consensus_matrix",
    "column_stochasticity_defect",
    "hajnal_coefficient",
    "delta_min_bound",
    "ring_graph",
    "complete_graph",
    "erdos_renyi_graph",
    "fig1_graph",
    "read_edge_list",
    "write_edge_list",
]


@dataclass(frozen=True)
class ReferenceGraph:
    """Static directed communication graph over ``n`` real agents.

    ``edges`` holds ordered pairs ``(i, j)`` meaning agent ``i`` can send to
    agent ``j``. Every agent has a self-loop, so out-degrees count the agent
    itself.
    """

    n: int
    edges: frozenset[tuple[int, int]]

    @cached_property
    def _out(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in range(self.n)]
        for i, j in self.edges:
            out[i].append(j)
        return tuple(tuple(sorted(o)) for o in out)

    @cached_property
    def _in(self) -> tuple[tuple[int, ...], ...]:
        inn: list[list[int]] = [[] for _ in range(self.n)]
        for i, j in self.edges:
            inn[j].append(i)
        return tuple(tuple(sorted(o)) for o in inn)

    def out_neighbors(self, i: int) -> tuple[int, ...]:
        return self._out[i]

    def in_neighbors(self, j: int) -> tuple[int, ...]:
        return self._in[j]

    def out_degree(self, i: int) -> int:
        return len(self._out[i])

    def in_degree(self, j: int) -> int:
        return len(self._in[j])

    @property
    def n_out_max(self) -> int:
        return max(len(o) for o in self._out)

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)


def _unreachable_pair(n: int, edges: Iterable[tuple[int, int]]) -> tuple[int, int] | None:
    fwd: list[list[int]] = [[] for _ in range(n)]
    bwd: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges:
        fwd[i].append(j)
        bwd[j].append(i)

    def sweep(adj: list[list[int]]) -> list[bool]:
        seen = [False] * n
        seen[0] = True
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
        return seen

    for t, ok in enumerate(sweep(fwd)):
        if not ok:
            return (0, t)
    for s, ok in enumerate(sweep(bwd)):
        if not ok:
            return (s, 0)
    return None


def build_reference_graph(
    n: int, edges: Iterable[tuple[int, int]], add_self_loops: bool = True
) -> ReferenceGraph:
    """Validate and build a reference graph from 0-based ordered pairs.

    Raises ``NotStronglyConnected`` naming an ordered pair with no path, and
    ``IndexOutOfRange`` for endpoints outside ``0..n-1``.
    """
    if n < 1:
        raise ValueError(f"need at least one agent, got n={n}")
    edge_set = set()
    for i, j in edges:
        i, j = int(i), int(j)
        if not (0 <= i < n and 0 <= j < n):
            raise IndexOutOfRange(f"edge ({i}, {j}) has an endpoint outside 0..{n - 1}")
        edge_set.add((i, j))
    if add_self_loops:
        edge_set.update((i, i) for i in range(n))
    else:
        missing = [i for i in range(n) if (i, i) not in edge_set]
        if missing:
            raise ValueError(f"agents {[m + 1 for m in missing]} lack the required self-loop")
    bad = _unreachable_pair(n, edge_set)
    if bad is not None:
        raise NotStronglyConnected(*bad)
    return ReferenceGraph(n=n, edges=frozenset(edge_set))


def ring_graph(n: int) -> ReferenceGraph:
    """Directed ring ``0 -> 1 -> ... -> n-1 -> 0``."""
    return build_reference_graph(n, [(i, (i + 1) % n) for i in range(n)])


def complete_graph(n: int) -> ReferenceGraph:
    return build_reference_graph(n, [(i, j) for i in range(n) for j in range(n)])


def fig1_graph() -> ReferenceGraph:
    """The 4-agent network used to illustrate augmentation: ring 1->2->3->4->1 plus 3->1."""
    return build_reference_graph(4, [(0, 1), (1, 2), (2, 3), (3, 0), (2, 0)])


def erdos_renyi_graph(
    n: int, p: float, seed: int, max_tries: int = 1000
) -> ReferenceGraph:
    """Directed Erdos-Renyi graph, resampled until strongly connected."""
    rng = np.random.default_rng(seed)
    last_error: NotStronglyConnected | None = None
    for _ in range(max_tries):
        mask = rng.random((n, n)) < p
        edges = [(i, j) for i in range(n) for j in range(n) if i != j and mask[i, j]]
        try:
            return build_reference_graph(n, edges)
        except NotStronglyConnected as exc:
            last_error = exc
    assert last_error is not None
    raise last_error


def read_edge_list(path: str | Path, n: int | None = None, add_self_loops: bool = True) -> ReferenceGraph:
    """Read a 1-based ``i j`` edge list; ``#`` starts a comment line."""
    edges = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'i j', got {raw!r}")
        i, j = int(parts[0]), int(parts[1])
        if i < 1 or j < 1:
            raise IndexOutOfRange(f"{path}:{lineno}: indices are 1-based")
        edges.append((i - 1, j - 1))
    if n is None:
        n = max((max(e) for e in edges), default=0) + 1
    return build_reference_graph(n, edges, add_self_loops=add_self_loops)


def write_edge_list(g: ReferenceGraph, path: str | Path) -> None:
    lines = [f"# n = {g.n}"]
    lines += [f"{i + 1} {j + 1}" for i, j in g.sorted_edges()]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class AugmentedGraph:
    """Reference graph plus ``tau_msg_max`` virtual delay-chain nodes per agent."""

    base: ReferenceGraph
    tau_msg_max: int

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def size(self) -> int:
        return self.base.n * (self.tau_msg_max + 1)

    def index(self, agent: int, r: int) -> int:
        if not (0 <= agent < self.n and 0 <= r <= self.tau_msg_max):
            raise IndexOutOfRange(f"node ({agent}, {r}) not in augmented graph")
        return r * self.n + agent

    def node(self, flat: int) -> tuple[int, int]:
        if not 0 <= flat < self.size:
            raise IndexOutOfRange(f"flat index {flat} out of range")
        r, agent = divmod(flat, self.n)
        return agent, r

    def chain_edges(self) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        return [
            ((j, r), (j, r - 1))
            for j in range(self.n)
            for r in range(1, self.tau_msg_max + 1)
        ]

    def edges(self) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        """All augmented edges as ``((agent, r), (agent, r))`` pairs."""
        out = []
        for i, j in self.base.sorted_edges():
            out.append(((i, 0), (j, 0)))
            if i != j:
                out.extend(((i, 0), (j, r)) for r in range(1, self.tau_msg_max + 1))
        return out + self.chain_edges()


def augment(g: ReferenceGraph, tau_msg_max: int) -> AugmentedGraph:
    if tau_msg_max < 0:
        raise ValueError(f"tau_msg_max must be >= 0, got {tau_msg_max}")
    return AugmentedGraph(base=g, tau_msg_max=int(tau_msg_max))


@dataclass(frozen=True, eq=False)
class ConsensusMatrix:
    """Sparse column-stochastic mixing matrix over the augmented state (COO storage)."""

    n: int
    tau_msg_max: int
    rows: np.ndarray
    cols: np.ndarray
    data: np.ndarray
    _csr: list = field(default_factory=list, repr=False)

    @property
    def dim(self) -> int:
        return self.n * (self.tau_msg_max + 1)

    def to_sparse(self) -> sp.csr_array:
        if not self._csr:
            m = sp.coo_array((self.data, (self.rows, self.cols)), shape=(self.dim, self.dim))
            self._csr.append(m.tocsr())
        return self._csr[0]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        np.add.at(out, (self.rows, self.cols), self.data)
        return out

    def matvec(self, v: np.ndarray) -> np.ndarray:
        if v.shape[0] != self.dim:
            raise ValueError(f"vector has {v.shape[0]} rows, matrix is {self.dim}x{self.dim}")
        return self.to_sparse() @ v

    __matmul__ = matvec

    def column_sums(self) -> np.ndarray:
        return np.bincount(self.cols, weights=self.data, minlength=self.dim)

    def block(self, r: int) -> np.ndarray:
        """Dense ``n x n`` block of the first block-column for delay ``r``."""
        lo, hi = r * self.n, (r + 1) * self.n
        sel = (self.cols < self.n) & (self.rows >= lo) & (self.rows < hi)
        out = np.zeros((self.n, self.n))
        np.add.at(out, (self.rows[sel] - lo, self.cols[sel]), self.data[sel])
        return out


def build_consensus_matrix(
    ag: AugmentedGraph,
    active: Iterable[int],
    delays: Mapping[tuple[int, int], int],
) -> ConsensusMatrix:
    """Mixing matrix for one time index.

    ``delays[(i, j)]`` is the delay of the message agent ``i`` sends to
    out-neighbour ``j``. Self delays may be omitted and must be zero if given.
    Entries for edges of inactive senders are ignored.
    """
    g = ag.base
    n, tau = g.n, ag.tau_msg_max
    active_set = set(active)
    for i in active_set:
        if not 0 <= i < n:
            raise IndexOutOfRange(f"active agent {i} outside 0..{n - 1}")

    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    for i in range(n):
        if i not in active_set:
            rows.append(i)
            cols.append(i)
            vals.append(1.0)
            continue
        share = 1.0 / g.out_degree(i)
        for j in g.out_neighbors(i):
            if j == i:
                r = delays.get((i, i), 0)
                if r != 0:
                    raise NonzeroSelfDelay(f"agent {i} has self delay {r}")
            else:
                try:
                    r = delays[(i, j)]
                except KeyError:
                    raise MissingDelayAssignment(
                        f"no delay for active sender {i} -> {j}"
                    ) from None
                if not 0 <= r <= tau:
                    raise DelayOutOfBounds(f"delay {r} for {i} -> {j} outside 0..{tau}")
            rows.append(r * n + j)
            cols.append(i)
            vals.append(share)

    # virtual node (j, r) forwards everything to (j, r - 1)
    chain = np.arange(n, n * (tau + 1))
    return ConsensusMatrix(
        n=n,
        tau_msg_max=tau,
        rows=np.concatenate([np.asarray(rows, dtype=np.int64), chain - n]),
        cols=np.concatenate([np.asarray(cols, dtype=np.int64), chain]),
        data=np.concatenate([np.asarray(vals), np.ones(len(chain))]),
    )


def _as_dense(m) -> np.ndarray:
    if isinstance(m, ConsensusMatrix):
        return m.to_dense()
    if sp.issparse(m):
        return m.toarray()
    return np.asarray(m, dtype=float)


def column_stochasticity_defect(m) -> float:
    """Largest deviation of any column sum from one."""
    if isinstance(m, ConsensusMatrix):
        sums = m.column_sums()
    else:
        sums = _as_dense(m).sum(axis=0)
    return float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0


def hajnal_coefficient(m, tol: float = 1e-9) -> float:
    """Coefficient of ergodicity ``1 - min_{j1,j2} sum_i min(m[i,j1], m[i,j2])``.

    Values below one mean the columns overlap, i.e. the matrix contracts
    toward rank one.
    """
    a = _as_dense(m)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if np.any(a < -tol) or column_stochasticity_defect(a) > tol:
        raise NotColumnStochastic("hajnal_coefficient needs a nonnegative column-stochastic matrix")
    overlap = min(np.minimum(a[:, [j]], a).sum(axis=0).min() for j in range(a.shape[1]))
    return float(1.0 - overlap)


def delta_min_bound(g: ReferenceGraph, tau_bar: int) -> float:
    """Lower bound ``(1 / N_out_max) ** (n * (tau_bar + 1))`` on real-row product entries."""
    if tau_bar < 0:
        raise ValueError(f"tau_bar must be >= 0, got {tau_bar}")
    return (1.0 / g.n_out_max) ** (g.n * (tau_bar + 1))
