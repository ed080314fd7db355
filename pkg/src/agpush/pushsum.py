"""Perturbed push-sum averaging over the delay-augmented state.

Each index applies ``x <- P (x + eta)``, ``y <- P y`` and ``z = x / y``.
Virtual rows may carry zero weight; their ratio is undefined and reading it
raises instead of silently returning NaN.
"""

from __future__ import annotations

import csv
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DebiasUndefinedForRealNode,
    DimensionMismatch,
    InsufficientData,
    UndefinedEstimate,
)
from .schedule import Schedule
from .topology import AugmentedGraph, ConsensusMatrix, build_consensus_matrix

__all__ = [
    "PushSumState",
    "PushSumTrajectory",
    "GeometricFit",
    "initial_state",
    "pushsum_step",
    "run_pushsum",
    "consensus_error",
    "consensus_errors",
    "fit_geometric_rate",
    "write_trajectory_csv",
]


@dataclass(frozen=True)
class PushSumState:
    """Numerators ``x`` (N x d), weights ``y`` (N,) over all augmented rows."""

    n: int
    x: np.ndarray
    y: np.ndarray

    @property
    def dim(self) -> int:
        return self.y.shape[0]

    @property
    def defined(self) -> np.ndarray:
        return self.y > 0

    def estimate(self, flat: int) -> np.ndarray:
        """De-biased estimate of one augmented row."""
        if self.y[flat] <= 0:
            raise UndefinedEstimate(f"row {flat} has zero weight; its estimate is undefined")
        return self.x[flat] / self.y[flat]

    @property
    def z(self) -> np.ndarray:
        """All rows' estimates; rows with zero weight hold NaN as the undefined marker."""
        out = np.full_like(self.x, np.nan)
        ok = self.defined
        out[ok] = self.x[ok] / self.y[ok, None]
        return out

    @property
    def z_real(self) -> np.ndarray:
        y = self.y[: self.n]
        if np.any(y <= 0):
            bad = int(np.flatnonzero(y <= 0)[0])
            raise DebiasUndefinedForRealNode(f"real agent {bad + 1} has weight {y[bad]}")
        return self.x[: self.n] / y[:, None]


def initial_state(ag: AugmentedGraph, x0: np.ndarray) -> PushSumState:
    """Real rows start at ``x0`` with unit weight; virtual rows start empty."""
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = x0[:, None]
    if x0.shape[0] != ag.n:
        raise DimensionMismatch(f"x0 has {x0.shape[0]} rows for {ag.n} agents")
    x = np.zeros((ag.size, x0.shape[1]))
    x[: ag.n] = x0
    y = np.zeros(ag.size)
    y[: ag.n] = 1.0
    return PushSumState(n=ag.n, x=x, y=y)


def _full_eta(eta, state: PushSumState) -> np.ndarray | None:
    if eta is None:
        return None
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 1:
        eta = eta[:, None]
    if eta.shape == (state.n, state.x.shape[1]):
        out = np.zeros_like(state.x)
        out[: state.n] = eta
        return out
    if eta.shape != state.x.shape:
        raise DimensionMismatch(f"perturbation shape {eta.shape} does not match state {state.x.shape}")
    if np.any(eta[state.n:] != 0):
        raise DimensionMismatch("perturbation must vanish on virtual rows")
    return eta


def pushsum_step(
    state: PushSumState, matrix: ConsensusMatrix, eta: np.ndarray | None = None
) -> PushSumState:
    """One mixing step. ``eta`` is ``(n, d)`` on real rows or ``(N, d)`` zero on virtual rows."""
    if matrix.dim != state.dim:
        raise DimensionMismatch(f"matrix is {matrix.dim}-dimensional, state has {state.dim} rows")
    pert = _full_eta(eta, state)
    x = state.x if pert is None else state.x + pert
    new = PushSumState(n=state.n, x=matrix.matvec(x), y=matrix.matvec(state.y))
    if np.any(new.y[: new.n] <= 0):
        raise DebiasUndefinedForRealNode("a real agent lost all its weight")
    return new


@dataclass
class PushSumTrajectory:
    """Per-index logs: ``z_real`` (K+1, n, d), ``xbar`` (K+1, d), ``y`` (K+1, N)."""

    z_real: np.ndarray
    xbar: np.ndarray
    y: np.ndarray
    x_total: np.ndarray
    eta_total: np.ndarray

    @property
    def K(self) -> int:
        return self.xbar.shape[0] - 1


def run_pushsum(
    ag: AugmentedGraph,
    s: Schedule,
    x0: np.ndarray,
    eta: np.ndarray | Callable[[int], np.ndarray] | None = None,
) -> PushSumTrajectory:
    """Run the schedule to its horizon.

    ``eta`` is ``None``, an array of shape ``(K, n, d)``, or a callable
    ``k -> (n, d)``.
    """
    if s.n != ag.n:
        raise DimensionMismatch(f"schedule has {s.n} agents, graph has {ag.n}")
    if s.tau_msg_max > ag.tau_msg_max:
        raise DimensionMismatch(
            f"schedule delays up to {s.tau_msg_max} exceed augmentation depth {ag.tau_msg_max}"
        )
    state = initial_state(ag, x0)
    n, d, K = ag.n, state.x.shape[1], s.K
    z = np.empty((K + 1, n, d))
    xbar = np.empty((K + 1, d))
    ys = np.empty((K + 1, ag.size))
    xt = np.empty((K + 1, d))
    et = np.zeros((K, d))

    def log(k, st):
        z[k] = st.z_real
        xt[k] = st.x.sum(axis=0)
        xbar[k] = xt[k] / n
        ys[k] = st.y

    log(0, state)
    for k in range(K):
        if eta is None:
            e = None
        elif callable(eta):
            e = eta(k)
        else:
            e = eta[k]
        if e is not None:
            e = np.asarray(e, dtype=float).reshape(n, d)
            et[k] = e.sum(axis=0)
        m = build_consensus_matrix(ag, s.active[k], s.delays[k])
        state = pushsum_step(state, m, e)
        log(k + 1, state)
    return PushSumTrajectory(z_real=z, xbar=xbar, y=ys, x_total=xt, eta_total=et)


def consensus_errors(traj: PushSumTrajectory) -> np.ndarray:
    """``max_i ||z_i[k] - xbar[k]||_1`` for every logged index."""
    return np.abs(traj.z_real - traj.xbar[:, None, :]).sum(axis=2).max(axis=1)


def consensus_error(traj: PushSumTrajectory, k: int) -> float:
    if not 0 <= k <= traj.K:
        raise IndexError(f"k={k} outside 0..{traj.K}")
    return float(np.abs(traj.z_real[k] - traj.xbar[k]).sum(axis=1).max())


@dataclass
class GeometricFit:
    q_hat: float
    C_hat: float
    r_squared: float
    non_decaying: bool
    samples: int


def fit_geometric_rate(
    errors, start: int = 0, floor: float = 0.0, scale: float = 1.0, min_samples: int = 10
) -> GeometricFit:
    """Least-squares fit of ``log e_k = log(C * scale) + k log q`` on ``k >= start``.

    Samples at or below ``floor`` are dropped (rounding noise once consensus
    is reached). ``C_hat`` is the intercept divided by ``scale``, so passing
    ``scale = ||x_i[0]||_1`` yields the normalised constant.
    """
    e = np.asarray(errors, dtype=float)
    ks = np.arange(e.size)
    keep = (ks >= start) & (e > floor) & np.isfinite(e)
    if keep.sum() < min_samples:
        raise InsufficientData(f"need {min_samples} positive tail samples, have {int(keep.sum())}")
    kk, le = ks[keep].astype(float), np.log(e[keep])
    slope, intercept = np.polyfit(kk, le, 1)
    resid = le - (slope * kk + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(((le - le.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    q = float(np.exp(slope))
    return GeometricFit(
        q_hat=q,
        C_hat=float(np.exp(intercept)) / scale,
        r_squared=r2,
        non_decaying=q >= 1.0 - 1e-12,
        samples=int(keep.sum()),
    )


def write_trajectory_csv(traj: PushSumTrajectory, path: str | Path) -> None:
    """Tidy CSV: one row per (k, agent) with z and xbar components and the consensus error."""
    d = traj.xbar.shape[1]
    err = consensus_errors(traj)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "agent"] + [f"z_{c}" for c in range(d)]
                   + [f"xbar_{c}" for c in range(d)] + ["consensus_error"])
        for k in range(traj.K + 1):
            for i in range(traj.z_real.shape[1]):
                w.writerow([k, i + 1] + [f"{v:.17g}" for v in traj.z_real[k, i]]
                           + [f"{v:.17g}" for v in traj.xbar[k]] + [f"{err[k]:.17g}"])
