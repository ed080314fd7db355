"""Local objective functions with exact curvature constants and synthetic data.

Three families are provided: quadratics ``0.5 (x - b)^T A (x - b)``, an
agent's share of a global least-squares loss, and a ridge-regularised
softmax cross-entropy. Each exposes value, gradient, Hessian, its
strong-convexity and smoothness constants, and its own minimiser.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import InvalidTarget, NonFiniteInput, SingularSystem

__all__ = [
    "Constants",
    "Objective",
    "QuadraticObjective",
    "LeastSquaresObjective",
    "LogisticObjective",
    "global_constants",
    "global_minimizer",
    "weighted_minimizer",
    "newton_minimize",
    "generate_least_squares_partition",
    "generate_synthetic_partition",
    "generate_logistic_partition",
    "write_quadratics_csv",
    "read_quadratics_csv",
    "write_dataset_csv",
    "read_dataset_csv",
]


class Constants(NamedTuple):
    mu: float
    M: float

    @property
    def kappa(self) -> float:
        return self.M / self.mu


def _check_point(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != dim:
        raise ValueError(f"expected a point of dimension {dim}, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("objective evaluated at a non-finite point")
    return x


class Objective:
    """Interface shared by all local objectives; points are flat vectors of length ``dim``."""

    dim: int

    def value(self, x) -> float:
        raise NotImplementedError

    def gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, x) -> np.ndarray:
        raise NotImplementedError

    def constants(self) -> Constants:
        raise NotImplementedError

    def minimizer(self) -> np.ndarray:
        return newton_minimize([self], np.ones(1))

    def quadratic_form(self) -> tuple[np.ndarray, np.ndarray] | None:
        """``(A, b)`` when the objective is a quadratic up to a constant, else None."""
        return None


@dataclass(frozen=True, eq=False)
class QuadraticObjective(Objective):
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float)).reshape(-1)
        if A.shape != (b.size, b.size):
            raise ValueError(f"A has shape {A.shape} but b has length {b.size}")
        if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
            raise ValueError("A must be symmetric")
        A = 0.5 * (A + A.T)
        if np.linalg.eigvalsh(A)[0] <= 0:
            raise ValueError("A must be positive definite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.b.size

    def value(self, x) -> float:
        r = _check_point(x, self.dim) - self.b
        return 0.5 * float(r @ self.A @ r)

    def gradient(self, x) -> np.ndarray:
        return self.A @ (_check_point(x, self.dim) - self.b)

    def hessian(self, x=None) -> np.ndarray:
        return self.A.copy()

    def constants(self) -> Constants:
        ev = np.linalg.eigvalsh(self.A)
        return Constants(float(ev[0]), float(ev[-1]))

    def minimizer(self) -> np.ndarray:
        return self.b.copy()

    def quadratic_form(self):
        return self.A, self.b


@dataclass(frozen=True, eq=False)
class LeastSquaresObjective(Objective):
    """``(1/D) ||X w - y||^2`` where ``D`` is the global sample count.

    A ridge of ``ridge / 2 ||w||^2`` is added automatically when ``X`` does
    not have full column rank, and ``regularized`` records that it was.
    """

    X: np.ndarray
    y: np.ndarray
    D: int
    ridge: float = 1e-8
    regularized: bool = field(default=False, init=False)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.size:
            raise ValueError(f"X has {X.shape[0]} rows, y has {y.size}")
        if self.D < 1:
            raise ValueError("D must be positive")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        full_rank = X.shape[0] >= X.shape[1] and np.linalg.matrix_rank(X) == X.shape[1]
        object.__setattr__(self, "regularized", not full_rank)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def _rho(self) -> float:
        return self.ridge if self.regularized else 0.0

    def value(self, x) -> float:
        w = _check_point(x, self.dim)
        r = self.X @ w - self.y
        return float(r @ r) / self.D + 0.5 * self._rho * float(w @ w)

    def gradient(self, x) -> np.ndarray:
        w = _check_point(x, self.dim)
        return (2.0 / self.D) * (self.X.T @ (self.X @ w - self.y)) + self._rho * w

    def hessian(self, x=None) -> np.ndarray:
        return (2.0 / self.D) * (self.X.T @ self.X) + self._rho * np.eye(self.dim)

    def quadratic_form(self):
        A = self.hessian()
        b = np.linalg.solve(A, (2.0 / self.D) * (self.X.T @ self.y))
        return A, b

    def to_quadratic(self) -> QuadraticObjective:
        return QuadraticObjective(*self.quadratic_form())

    def constants(self) -> Constants:
        ev = np.linalg.eigvalsh(self.hessian())
        return Constants(float(ev[0]), float(ev[-1]))

    def minimizer(self) -> np.ndarray:
        return self.quadratic_form()[1]


@dataclass(frozen=True, eq=False)
class LogisticObjective(Objective):
    """Softmax cross-entropy over local samples plus ``lam / 2 ||W||_F^2``.

    Parameters are the flattened ``(n_classes, p)`` weight matrix.
    """

    X: np.ndarray
    labels: np.ndarray
    n_classes: int
    lam: float

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if X.shape[0] != labels.size:
            raise ValueError("one label per sample required")
        if self.lam <= 0:
            raise ValueError("lam must be positive for strong convexity")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in 0..{self.n_classes - 1}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.n_classes * self.X.shape[1]

    def _probs(self, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        logits = self.X @ W.T
        logits -= logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(logits).sum(axis=1))
        return logits, np.exp(logits - logz[:, None])

    def _W(self, x) -> np.ndarray:
        return _check_point(x, self.dim).reshape(self.n_classes, self.X.shape[1])

    def value(self, x) -> float:
        W = self._W(x)
        logits, _ = self._probs(W)
        logz = np.log(np.exp(logits).sum(axis=1))
        nll = float((logz - logits[np.arange(len(self.labels)), self.labels]).sum())
        return nll + 0.5 * self.lam * float((W * W).sum())

    def gradient(self, x) -> np.ndarray:
        W = self._W(x)
        _, P = self._probs(W)
        P[np.arange(len(self.labels)), self.labels] -= 1.0
        return (P.T @ self.X + self.lam * W).reshape(-1)

    def hessian(self, x) -> np.ndarray:
        W = self._W(x)
        _, P = self._probs(W)
        C, p = self.n_classes, self.X.shape[1]
        H = np.zeros((C * p, C * p))
        for prob, row in zip(P, self.X):
            H += np.kron(np.diag(prob) - np.outer(prob, prob), np.outer(row, row))
        return H + self.lam * np.eye(C * p)

    def constants(self) -> Constants:
        # the softmax Jacobian diag(p) - p p^T never exceeds 1/2 in spectral norm
        top = np.linalg.eigvalsh(self.X.T @ self.X)[-1] if self.X.size else 0.0
        return Constants(float(self.lam), float(self.lam + 0.5 * top))


def global_constants(objs) -> Constants:
    cs = [o.constants() for o in objs]
    return Constants(min(c.mu for c in cs), max(c.M for c in cs))


def newton_minimize(objs, weights, x0=None, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Damped Newton on ``sum_i weights[i] f_i`` until the gradient norm is <= ``tol``."""
    weights = np.asarray(weights, dtype=float)
    dim = objs[0].dim
    x = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=float).copy()

    def val(v):
        return sum(w * o.value(v) for w, o in zip(weights, objs) if w)

    for _ in range(max_iter):
        g = sum(w * o.gradient(x) for w, o in zip(weights, objs) if w)
        H = sum(w * o.hessian(x) for w, o in zip(weights, objs) if w)
        if np.linalg.norm(g) <= tol:
            # one undamped polish step; near the optimum it squares the residual
            try:
                cand = x - np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                return x
            gc = sum(w * o.gradient(cand) for w, o in zip(weights, objs) if w)
            return cand if np.linalg.norm(gc) <= np.linalg.norm(g) else x
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            raise SingularSystem("Hessian of the weighted objective is singular") from None
        t, f0, slope = 1.0, val(x), float(g @ step)
        while t > 1e-12 and val(x - t * step) > f0 - 1e-4 * t * slope:
            t *= 0.5
        x = x - t * step
    g = sum(w * o.gradient(x) for w, o in zip(weights, objs) if w)
    if np.linalg.norm(g) > 1e3 * tol:
        raise SingularSystem(f"Newton solve stalled at gradient norm {np.linalg.norm(g):.3e}")
    return x


def weighted_minimizer(objs, weights) -> np.ndarray:
    """Minimiser of ``sum_i weights[i] f_i``; exact linear solve when every term is quadratic."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(objs),):
        raise ValueError(f"{weights.size} weights for {len(objs)} objectives")
    forms = [o.quadratic_form() for o in objs]
    if all(f is not None for f in forms):
        H = sum(w * A for w, (A, _) in zip(weights, forms))
        r = sum(w * (A @ b) for w, (A, b) in zip(weights, forms))
        H = np.atleast_2d(H)
        if not np.all(np.isfinite(H)) or np.linalg.cond(H) > 1e14:
            raise SingularSystem("weighted quadratic system is numerically singular")
        return np.linalg.solve(H, np.atleast_1d(r))
    return newton_minimize(objs, weights)


def global_minimizer(objs) -> np.ndarray:
    """Minimiser of the unweighted sum, solved with the normalised weights ``1/n``.

    Using the same normalisation as re-weighted targets makes a perfectly
    balanced run reproduce this point bit for bit.
    """
    return weighted_minimizer(objs, np.full(len(objs), 1.0 / len(objs)))


# ------------------------------------------------------------ synthetic data

def _check_targets(condition_targets, n: int) -> np.ndarray:
    t = np.asarray(condition_targets, dtype=float).reshape(-1)
    if t.size != n:
        raise InvalidTarget(f"{t.size} condition targets for {n} agents")
    if not np.all(np.isfinite(t)) or np.any(t < 1):
        raise InvalidTarget("condition targets must be finite and >= 1")
    return t


def generate_least_squares_partition(
    n: int,
    d: int,
    samples_per_agent: int,
    condition_targets,
    seed: int,
    minimizer_spread: float = 1.0,
    noise: float = 0.1,
) -> list[LeastSquaresObjective]:
    """Least-squares shares whose local Hessians have prescribed condition numbers.

    Each agent's data matrix is assembled from random orthonormal factors and
    singular values chosen so that ``(2/D) X^T X`` has a log-spaced spectrum
    of unit geometric mean spanning the target condition number. Targets are
    generated around agent-specific ground-truth weights, which makes the
    local minimisers differ.
    """
    targets = _check_targets(condition_targets, n)
    if samples_per_agent < d:
        raise InvalidTarget(f"need at least d={d} samples per agent for a full-rank local term")
    rng = np.random.default_rng(seed)
    D = n * samples_per_agent
    truth = rng.standard_normal(d)
    out = []
    for kappa in targets:
        spectrum = np.exp(np.linspace(-0.5, 0.5, d) * np.log(kappa))
        U, _ = np.linalg.qr(rng.standard_normal((samples_per_agent, d)))
        V, _ = np.linalg.qr(rng.standard_normal((d, d)))
        X = (U * np.sqrt(spectrum * D / 2.0)) @ V.T
        w_local = truth + minimizer_spread * rng.standard_normal(d)
        y = X @ w_local + noise * rng.standard_normal(samples_per_agent)
        out.append(LeastSquaresObjective(X, y, D))
    return out


def generate_synthetic_partition(
    n: int,
    d: int,
    samples_per_agent: int,
    condition_targets,
    seed: int,
    minimizer_spread: float = 1.0,
    noise: float = 0.1,
) -> list[QuadraticObjective]:
    """Quadratic forms of :func:`generate_least_squares_partition`."""
    return [
        ls.to_quadratic()
        for ls in generate_least_squares_partition(
            n, d, samples_per_agent, condition_targets, seed, minimizer_spread, noise
        )
    ]


def generate_logistic_partition(
    n: int, samples_per_agent: int, p: int, n_classes: int, lam: float, seed: int
) -> list[LogisticObjective]:
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, p))
    out = []
    for _ in range(n):
        labels = rng.integers(n_classes, size=samples_per_agent)
        X = centers[labels] + rng.standard_normal((samples_per_agent, p))
        out.append(LogisticObjective(X, labels, n_classes, lam))
    return out


# ---------------------------------------------------------------- file formats

def write_quadratics_csv(objs, path: str | Path) -> None:
    """One row per (agent, matrix row): ``agent,row,b,A_0..A_{d-1}`` (1-based agent ids)."""
    d = objs[0].dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["agent", "row", "b"] + [f"A_{c}" for c in range(d)])
        for i, o in enumerate(objs):
            A, b = o.quadratic_form()
            for r in range(d):
                w.writerow([i + 1, r, f"{b[r]:.17g}"] + [f"{v:.17g}" for v in A[r]])


def read_quadratics_csv(path: str | Path) -> list[QuadraticObjective]:
    rows: dict[int, list[tuple[int, float, list[float]]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["agent", "row", "b"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                rows.setdefault(int(rec[0]), []).append(
                    (int(rec[1]), float(rec[2]), [float(v) for v in rec[3:]])
                )
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    out = []
    for agent in sorted(rows):
        recs = sorted(rows[agent])
        out.append(QuadraticObjective(np.array([r[2] for r in recs]), np.array([r[1] for r in recs])))
    return out


def write_dataset_csv(X, labels, path: str | Path) -> None:
    X = np.asarray(X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"feature_{c}" for c in range(X.shape[1])] + ["label"])
        for row, lab in zip(X, labels):
            w.writerow([f"{v:.17g}" for v in row] + [int(lab)])


def read_dataset_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``feature..., label`` columns; the label column must be last."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1].strip() != "label":
            raise ValueError(f"{path}: last column must be 'label'")
        feats, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            try:
                feats.append([float(v) for v in rec[:-1]])
                labels.append(int(rec[-1]))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return np.array(feats), np.array(labels, dtype=np.int64)
