import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from agpush.errors import InvalidTarget, NonFiniteInput
from agpush.objectives import (
    LeastSquaresObjective,
    LogisticObjective,
    QuadraticObjective,
    generate_least_squares_partition,
    generate_logistic_partition,
    generate_synthetic_partition,
    global_constants,
    global_minimizer,
    read_dataset_csv,
    read_quadratics_csv,
    weighted_minimizer,
    write_dataset_csv,
    write_quadratics_csv,
)

from _corpus import random_quadratics


def central_differences(f, x, h=1e-6):
    g = np.empty_like(x)
    for c in range(x.size):
        e = np.zeros_like(x)
        e[c] = h
        g[c] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_relative_error(obj, x):
    g = obj.gradient(x)
    fd = central_differences(obj.value, x)
    return np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8)


def sample_objectives(seed):
    """One representative of each class, small enough for per-coordinate differencing."""
    rng = np.random.default_rng(seed)
    quad = random_quadratics(rng, 1, 4, 1.0, 10.0, 1.0)[0]
    ls = generate_least_squares_partition(3, 5, 8, [2.0, 5.0, 9.0], seed)[1]
    X = rng.standard_normal((6, 3))
    logit = LogisticObjective(X, rng.integers(3, size=6), 3, 0.1)
    return {"quadratic": quad, "least_squares": ls, "logistic": logit}


# ---------------------------------------------------------------- gradients

def test_quadratic_gradient_example():
    q = QuadraticObjective(2 * np.eye(1), np.array([1.0]))
    assert q.gradient(np.zeros(1)).tolist() == [-2.0]
    assert q.gradient(q.minimizer()).tolist() == [0.0]


@pytest.mark.parametrize("kind", ["quadratic", "least_squares", "logistic"])
def test_gradient_matches_finite_differences(kind):
    obj = sample_objectives(7)[kind]
    rng = np.random.default_rng(11)
    errs = [fd_relative_error(obj, rng.standard_normal(obj.dim)) for _ in range(20)]
    assert max(errs) <= 1e-5


def test_logistic_three_samples():
    X = np.array([[1.0, 0.5], [-0.3, 2.0], [0.7, -1.1]])
    obj = LogisticObjective(X, [0, 1, 1], 2, 0.1)
    x = np.array([0.2, -0.4, 0.9, 0.1])
    assert fd_relative_error(obj, x) <= 1e-5


def test_logistic_hessian_matches_gradient_differences():
    obj = sample_objectives(3)["logistic"]
    x = np.random.default_rng(0).standard_normal(obj.dim)
    H = obj.hessian(x)
    fd = np.column_stack([
        (obj.gradient(x + 1e-6 * e) - obj.gradient(x - 1e-6 * e)) / 2e-6 for e in np.eye(obj.dim)
    ])
    assert np.abs(H - fd).max() <= 1e-6 * max(1.0, np.abs(H).max())


def test_non_finite_points_rejected():
    for obj in sample_objectives(0).values():
        x = np.zeros(obj.dim)
        x[0] = np.nan
        with pytest.raises(NonFiniteInput):
            obj.gradient(x)
        with pytest.raises(ValueError):
            obj.value(np.zeros(obj.dim + 1))


# ---------------------------------------------------------------- constants

def test_constants_examples():
    c = QuadraticObjective(np.diag([3.0, 37.0]), np.zeros(2)).constants()
    assert (c.mu, c.M) == (3.0, 37.0)
    c = QuadraticObjective(2 * np.eye(3), np.zeros(3)).constants()
    assert c.mu == c.M == 2.0 and c.kappa == 1.0
    X = np.random.default_rng(0).standard_normal((5, 2))
    assert LogisticObjective(X, [0, 1, 0, 1, 1], 2, 1e-4).constants().mu == 1e-4


def test_global_constants_aggregate():
    objs = [QuadraticObjective(np.diag([3.0, 5.0]), np.zeros(2)), QuadraticObjective(np.diag([4.0, 37.0]), np.ones(2))]
    c = global_constants(objs)
    assert (c.mu, c.M, c.kappa) == (3.0, 37.0, 37.0 / 3.0)


@pytest.mark.parametrize("kind", ["quadratic", "least_squares", "logistic"])
def test_strong_convexity_and_smoothness(kind):
    obj = sample_objectives(5)[kind]
    mu, M = obj.constants()
    rng = np.random.default_rng(1)
    for _ in range(100):
        x, y = rng.standard_normal(obj.dim) * 2, rng.standard_normal(obj.dim) * 2
        gx, gy = obj.gradient(x), obj.gradient(y)
        lower = obj.value(x) + gx @ (y - x) + 0.5 * mu * (y - x) @ (y - x)
        assert obj.value(y) >= lower - 1e-10 * max(1.0, abs(lower))
        assert np.linalg.norm(gx - gy) <= M * np.linalg.norm(x - y) * (1 + 1e-10)


def test_rejects_bad_construction():
    with pytest.raises(ValueError):
        QuadraticObjective(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2))
    with pytest.raises(ValueError):
        QuadraticObjective(np.diag([1.0, -1.0]), np.zeros(2))
    with pytest.raises(ValueError):
        LogisticObjective(np.ones((2, 2)), [0, 1], 2, 0.0)
    with pytest.raises(ValueError):
        LogisticObjective(np.ones((2, 2)), [0, 2], 2, 0.1)


# ---------------------------------------------------------------- least squares

def test_least_squares_quadratic_form_is_shift_consistent():
    ls = generate_least_squares_partition(2, 4, 10, [3.0, 6.0], seed=2)[0]
    A, b = ls.quadratic_form()
    assert np.allclose(A, 2.0 / ls.D * ls.X.T @ ls.X)
    q = ls.to_quadratic()
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((5, 4))
    diffs = [ls.value(x) - q.value(x) for x in pts]
    assert np.ptp(diffs) <= 1e-10 * max(1.0, abs(diffs[0]))
    assert not ls.regularized


def test_rank_deficient_share_gets_ridge():
    X = np.array([[1.0, 1.0], [2.0, 2.0]])
    ls = LeastSquaresObjective(X, np.array([1.0, 0.0]), D=4)
    assert ls.regularized
    assert ls.constants().mu == pytest.approx(1e-8, rel=1e-6)
    wide = LeastSquaresObjective(np.ones((1, 3)), np.ones(1), D=2)
    assert wide.regularized


# ---------------------------------------------------------------- minimizers

def test_minimizer_examples():
    pair = [QuadraticObjective(2 * np.eye(1), [1.0]), QuadraticObjective(2 * np.eye(1), [-1.0])]
    assert global_minimizer(pair)[0] == pytest.approx(0.0, abs=1e-15)
    three = [QuadraticObjective(a * np.eye(1), [b]) for a, b in [(1, 0), (2, 1), (3, 2)]]
    assert global_minimizer(three)[0] == pytest.approx(4 / 3, rel=1e-14)
    one = QuadraticObjective(np.diag([2.0, 5.0]), [0.3, -0.7])
    assert np.allclose(global_minimizer([one]), [0.3, -0.7], rtol=0, atol=1e-15)


def test_weighted_minimizer_closed_form():
    objs = [QuadraticObjective(2 * np.eye(1), [b]) for b in (1.0, -1.0)]
    assert weighted_minimizer(objs, [2 / 3, 1 / 3])[0] == pytest.approx(1 / 3, rel=1e-14)
    with pytest.raises(ValueError):
        weighted_minimizer(objs, [1.0])


def test_logistic_global_minimizer_is_stationary():
    objs = generate_logistic_partition(4, 15, 3, 3, 1e-2, seed=0)
    x = global_minimizer(objs)
    g = sum(o.gradient(x) for o in objs)
    assert np.linalg.norm(g) <= 1e-10


@given(seed=st.integers(0, 5000), n=st.integers(1, 6), d=st.integers(1, 4))
def test_quadratic_global_minimizer_zeroes_gradient(seed, n, d):
    objs = random_quadratics(np.random.default_rng(seed), n, d, 0.5, 20.0, 3.0)
    x = global_minimizer(objs)
    g = sum(o.gradient(x) for o in objs)
    scale = sum(np.linalg.norm(o.A @ o.b) for o in objs)
    assert np.linalg.norm(g) <= 1e-12 * max(1.0, scale)


# ---------------------------------------------------------------- synthetic partitions

def test_synthetic_conditioning_profile():
    targets = np.linspace(3, 37, 40)
    objs = generate_synthetic_partition(40, 50, 60, targets, seed=0)
    kappas = np.array([o.constants().kappa for o in objs])
    assert np.all(np.abs(kappas / targets - 1) <= 0.05)
    assert np.all(np.diff(kappas) > 0)
    H = sum(o.A for o in objs)
    ev = np.linalg.eigvalsh(H)
    assert abs(ev[-1] / ev[0] - 2.0) <= 0.5


def test_unit_targets_give_scalar_identities():
    for o in generate_synthetic_partition(3, 4, 6, [1.0, 1.0, 1.0], seed=1):
        assert np.allclose(o.A, o.A[0, 0] * np.eye(4), rtol=0, atol=1e-12)


def test_synthetic_is_deterministic():
    a = generate_synthetic_partition(3, 4, 6, [2.0, 3.0, 4.0], seed=5)
    b = generate_synthetic_partition(3, 4, 6, [2.0, 3.0, 4.0], seed=5)
    assert all(np.array_equal(x.A, y.A) and np.array_equal(x.b, y.b) for x, y in zip(a, b))
    c = generate_synthetic_partition(3, 4, 6, [2.0, 3.0, 4.0], seed=6)
    assert not np.array_equal(a[0].b, c[0].b)


@pytest.mark.parametrize("targets", [[0.5, 2.0], [np.inf, 2.0], [2.0]])
def test_invalid_targets(targets):
    with pytest.raises(InvalidTarget):
        generate_synthetic_partition(2, 3, 5, targets, seed=0)


def test_too_few_samples():
    with pytest.raises(InvalidTarget):
        generate_synthetic_partition(2, 5, 3, [2.0, 2.0], seed=0)


# ---------------------------------------------------------------- files

def test_quadratics_csv_round_trip(tmp_path):
    objs = random_quadratics(np.random.default_rng(0), 3, 2, 1.0, 9.0, 1.0)
    path = tmp_path / "q.csv"
    write_quadratics_csv(objs, path)
    back = read_quadratics_csv(path)
    assert all(np.array_equal(a.A, b.A) and np.array_equal(a.b, b.b) for a, b in zip(objs, back))
    assert path.read_text().splitlines()[0] == "agent,row,b,A_0,A_1"


def test_quadratics_csv_bad_row(tmp_path):
    path = tmp_path / "q.csv"
    path.write_text("agent,row,b,A_0\n1,0,x,1\n")
    with pytest.raises(ValueError, match=":2:"):
        read_quadratics_csv(path)


def test_dataset_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    X, labels = rng.standard_normal((7, 3)), rng.integers(4, size=7)
    path = tmp_path / "d.csv"
    write_dataset_csv(X, labels, path)
    X2, l2 = read_dataset_csv(path)
    assert np.array_equal(X, X2) and np.array_equal(labels, l2)
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="label"):
        read_dataset_csv(path)
