"""Post-hoc analysis of completed runs.

Covers the re-weighted objective implied by the cumulative step mass each
agent applied, the distance between its minimiser and the unbiased one
together with the a-priori bound on that distance, and rate diagnostics
for the time-averaged optimality gap.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BoundViolated, EmptyRun, InsufficientData
from .objectives import global_constants, global_minimizer, weighted_minimizer
from .pushsum import consensus_errors, fit_geometric_rate, run_pushsum
from .schedule import Schedule, truncate_schedule
from .topology import AugmentedGraph

__all__ = [
    "ReweightedObjective",
    "BiasReport",
    "ConsensusConstants",
    "RateDiagnostics",
    "reweighted_weights",
    "reweighted_minimizer",
    "asynchrony_measure",
    "bias_report",
    "estimate_consensus_constants",
    "prefix_mean_sq_err",
    "loglog_slope",
    "rate_diagnostics",
    "write_report",
]


@dataclass
class ReweightedObjective:
    """Cumulative step mass ``p`` per agent and its normalisation ``p_bar``.

    ``degenerate`` is set when no step mass was applied at all, in which
    case ``p_bar`` falls back to uniform.
    """

    p: np.ndarray
    p_bar: np.ndarray
    degenerate: bool = False
    objs: list | None = None


def _normalise(p: np.ndarray) -> tuple[np.ndarray, bool]:
    total = p.sum()
    if total <= 0:
        return np.full(p.size, 1.0 / p.size), True
    return p / total, False


def reweighted_weights(run, objs=None, K: int | None = None) -> ReweightedObjective:
    """Sum the logged ``alpha_delta`` over the first ``K`` indices (default all)."""
    ad = np.asarray(run.alpha_delta, dtype=float)
    K = ad.shape[0] if K is None else K
    if K < 1 or ad.shape[0] < 1:
        raise EmptyRun("a run with no indices has no step mass")
    p = ad[:K].sum(axis=0)
    p_bar, degenerate = _normalise(p)
    return ReweightedObjective(p=p, p_bar=p_bar, degenerate=degenerate, objs=objs)


def reweighted_minimizer(rw: ReweightedObjective, objs=None) -> np.ndarray:
    objs = objs if objs is not None else rw.objs
    if objs is None:
        raise ValueError("objectives are required to locate the re-weighted minimiser")
    return weighted_minimizer(objs, rw.p_bar)


def asynchrony_measure(p_bar) -> float:
    """``sqrt(sum_i |1/n - p_bar_i|)``: zero for balanced step mass, near ``sqrt(2)`` for extreme skew."""
    p_bar = np.asarray(p_bar, dtype=float)
    return math.sqrt(float(np.abs(1.0 / p_bar.size - p_bar).sum()))


@dataclass
class BiasReport:
    delta_K: float
    S_pairwise: np.ndarray
    S_to_global: np.ndarray
    S_bar: float
    kappa: float
    bound: float
    actual: float
    x_star: np.ndarray
    x_star_K: np.ndarray
    p_bar: np.ndarray

    @property
    def holds(self) -> bool:
        return self.actual <= self.bound * (1 + 1e-9) + 1e-12


def bias_report(rw: ReweightedObjective, objs=None, check: bool = True) -> BiasReport:
    """Distance between re-weighted and unbiased minimisers, and its a-priori bound.

    With ``check`` set, a measured distance above the bound raises
    ``BoundViolated``.
    """
    objs = objs if objs is not None else rw.objs
    locals_ = np.array([o.minimizer() for o in objs])
    x_star = global_minimizer(objs)
    x_star_K = weighted_minimizer(objs, rw.p_bar)
    S_i = np.linalg.norm(locals_ - x_star, axis=1)
    S_ij = np.linalg.norm(locals_[:, None, :] - locals_[None, :, :], axis=2)
    # j = i is allowed in the inner minimum
    S_bar = float((S_ij + S_i[None, :]).min(axis=1).max())
    kappa = global_constants(objs).kappa
    delta = asynchrony_measure(rw.p_bar)
    rep = BiasReport(
        delta_K=delta,
        S_pairwise=S_ij,
        S_to_global=S_i,
        S_bar=S_bar,
        kappa=kappa,
        bound=S_bar * math.sqrt(kappa) * delta / math.sqrt(2.0),
        actual=float(np.linalg.norm(x_star_K - x_star)),
        x_star=x_star,
        x_star_K=x_star_K,
        p_bar=rw.p_bar,
    )
    if check and not rep.holds:
        raise BoundViolated(f"minimiser distance {rep.actual:.6g} exceeds bound {rep.bound:.6g}")
    return rep


@dataclass
class ConsensusConstants:
    """Envelope ``err_k <= C q^k`` measured on an unperturbed probe of a schedule."""

    C: float
    q: float
    r_squared: float
    probe_K: int


def estimate_consensus_constants(
    ag: AugmentedGraph, s: Schedule, probe_K: int = 2000, floor: float = 1e-13
) -> ConsensusConstants:
    """Fit ``q`` on a push-sum probe started from unit vectors, then take ``C`` as the envelope.

    Every agent starts with a distinct standard basis vector, so each
    starting row has unit l1 norm and the measured error covers the
    worst single-agent initialisation.
    """
    probe = truncate_schedule(s, min(probe_K, s.K))
    traj = run_pushsum(ag, probe, np.eye(ag.n))
    err = consensus_errors(traj)
    try:
        fit = fit_geometric_rate(err, floor=floor)
        q, r2 = min(fit.q_hat, 1.0 - 1e-12), fit.r_squared
    except InsufficientData:
        # consensus within a handful of steps
        q, r2 = 0.0, 1.0
    ks = np.flatnonzero(err > floor)
    if q == 0.0:
        C = float(err[0])
    else:
        C = float(np.max(err[ks] / q ** ks.astype(float))) if ks.size else float(err[0])
    return ConsensusConstants(C=max(C, float(err[0])), q=q, r_squared=r2, probe_K=probe.K)


def prefix_mean_sq_err(run, objs, prefixes) -> np.ndarray:
    """``(1/K') sum_{k<K'} ||xbar[k] - x*_{K'}||^2`` with the minimiser re-weighted per prefix."""
    out = np.empty(len(prefixes))
    csum = np.cumsum(np.asarray(run.alpha_delta, dtype=float), axis=0)
    for t, Kp in enumerate(prefixes):
        p_bar, _ = _normalise(csum[Kp - 1])
        target = weighted_minimizer(objs, p_bar)
        diff = run.xbar[:Kp] - target
        out[t] = float((diff * diff).sum(axis=1).mean())
    return out


def loglog_slope(prefixes, values) -> float:
    x = np.log(np.asarray(prefixes, dtype=float))
    v = np.asarray(values, dtype=float)
    keep = v > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(x[keep], np.log(v[keep]), 1)[0])


@dataclass
class RateDiagnostics:
    mean_sq_err: float
    prefixes: np.ndarray
    prefix_mse: np.ndarray
    loglog_slope: float
    certificate: float | None
    certificate_terms: dict = field(default_factory=dict)


def _certificate(run, objs, x_star_K, consts: ConsensusConstants, x0) -> tuple[float, dict]:
    pol = run.policy
    n, K = run.n, run.K
    c = global_constants(objs)
    mu, kappa = c.mu, c.kappa
    L = max(run.grad_norm_max, 1e-300)
    C, q = consts.C, consts.q
    B, theta = pol.B, pol.theta
    w = np.asarray(pol.w, dtype=float)
    x0_norm = float(np.abs(np.asarray(x0, dtype=float)).sum(axis=1).max())
    start = float(np.sum((run.xbar[0] - x_star_K) ** 2))
    terms = {"C": C, "q": q, "L": L, "mu": mu, "kappa": kappa}
    if pol.is_constant:
        mean_w = B / n * w.sum()
        A1 = (math.sqrt(L) * mean_w) ** 2
        A2 = 2 * kappa * L ** 2 * C * x0_norm * mean_w / (1 - q)
        A3 = 2 * kappa * L ** 3 * C * mean_w ** 2 / (1 - q)
        rhs = (
            K ** -theta * n * (A1 + A3) / (2 * mu * B)
            + K ** -1.0 * n * A2 / (2 * mu * B)
            + K ** -(1 - theta) * n * start / (2 * mu * B)
        )
        terms.update(A1=A1, A2=A2, A3=A3)
        return rhs, terms
    ad = np.asarray(run.alpha_delta, dtype=float)
    mean_ad = ad.mean(axis=1)
    b1 = L * float((mean_ad ** 2).sum())
    gamma = kappa * L * C * x0_norm * q ** np.arange(K, dtype=float)
    b2 = 2 * L * float((mean_ad * gamma).sum())
    chi = np.empty_like(ad)
    acc = np.zeros(n)
    for k in range(K):
        acc = q * acc + ad[k]
        chi[k] = kappa * L ** 2 * C * acc
    b3 = 2 * L * float(((ad * chi).sum(axis=1) / n).sum())
    A = b1 + b2 + b3
    rhs = K ** -(1 - theta) * n * (start + A) / (2 * mu * B)
    terms.update(b1=b1, b2=b2, b3=b3, A=A)
    return rhs, terms


def rate_diagnostics(
    run,
    rw: ReweightedObjective,
    objs=None,
    consensus_constants: ConsensusConstants | None = None,
    x0=None,
    n_prefixes: int = 25,
    fit_decades: float = 1.0,
) -> RateDiagnostics:
    """Time-averaged optimality gap, its log-log slope over the final decade, and the rate certificate.

    The certificate needs ``consensus_constants`` and the initial iterates
    ``x0``; without them it is reported as ``None``.
    """
    objs = objs if objs is not None else rw.objs
    K = run.K
    if K < 1:
        raise EmptyRun("run has no indices")
    x_star_K = weighted_minimizer(objs, rw.p_bar)
    diff = run.xbar[:K] - x_star_K
    mse = float((diff * diff).sum(axis=1).mean())

    lo = max(1.0, K / 10.0 ** fit_decades)
    prefixes = np.unique(np.round(np.geomspace(lo, K, n_prefixes)).astype(int))
    prefix_mse = prefix_mean_sq_err(run, objs, prefixes)
    slope = loglog_slope(prefixes, prefix_mse) if prefixes.size >= 2 else float("nan")

    cert, terms = None, {}
    if consensus_constants is not None and x0 is not None and run.policy is not None:
        cert, terms = _certificate(run, objs, x_star_K, consensus_constants, x0)
    return RateDiagnostics(mse, prefixes, prefix_mse, slope, cert, terms)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{v:.17g}"
    return str(v)


def write_report(path_stem: str | Path, bias: BiasReport, rates: RateDiagnostics | None = None,
                 extra: dict | None = None) -> None:
    """Write ``<stem>.csv`` (one key,value row per metric) and a readable ``<stem>.txt``."""
    rows = {
        "delta_K": bias.delta_K,
        "S_bar": bias.S_bar,
        "kappa": bias.kappa,
        "bound": bias.bound,
        "actual": bias.actual,
        "bound_holds": bias.holds,
    }
    for i, v in enumerate(bias.p_bar):
        rows[f"p_bar_{i + 1}"] = float(v)
    if rates is not None:
        rows.update(mean_sq_err=rates.mean_sq_err, loglog_slope=rates.loglog_slope,
                    certificate=rates.certificate)
        rows.update({f"cert_{k}": v for k, v in rates.certificate_terms.items()})
    rows.update(extra or {})
    stem = Path(path_stem)
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in rows.items():
            w.writerow([k, _fmt(v)])
    lines = [
        f"asynchrony measure Delta_K : {bias.delta_K:.6g}",
        f"S_bar                      : {bias.S_bar:.6g}",
        f"kappa                      : {bias.kappa:.6g}",
        f"distance bound             : {bias.bound:.6g}",
        f"measured distance          : {bias.actual:.6g}",
        f"bound holds                : {bias.holds}",
    ]
    if rates is not None:
        lines += [
            f"mean squared error         : {rates.mean_sq_err:.6g}",
            f"log-log slope (last decade): {rates.loglog_slope:.6g}",
            f"rate certificate           : {_fmt(rates.certificate) or 'n/a'}",
        ]
    for k, v in (extra or {}).items():
        lines.append(f"{k:<27}: {_fmt(v)}")
    stem.with_suffix(".txt").write_text("\n".join(lines) + "\n")
