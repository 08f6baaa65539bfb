import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_spd
from stripd.errors import RejectedInputError
from stripd.metric import SpdOperator
from stripd.prox import (
    AffineSetIndicator,
    BoxIndicator,
    L1Norm,
    LinearEqualityIndicator,
    PointIndicator,
    SeparableSum,
    SumConstraintIndicator,
    Zero,
    box_qp,
    prox,
    prox_conjugate,
)


def test_box_projection_identity_metric():
    f = BoxIndicator([0.0, 0.0], [1.0, 1.0])
    np.testing.assert_array_equal(prox(f, SpdOperator.identity(2), np.array([2.0, -1.0])), [1.0, 0.0])


def test_soft_threshold():
    f = L1Norm(3, 1.0)
    out = prox(f, SpdOperator.identity(3), np.array([3.0, -0.5, -2.0]))
    np.testing.assert_allclose(out, [2.0, 0.0, -1.0])


def test_point_and_zero():
    q = SpdOperator.identity(2)
    np.testing.assert_array_equal(prox(PointIndicator([1.0, 2.0]), q, np.zeros(2)), [1.0, 2.0])
    np.testing.assert_array_equal(prox(Zero(2), q, np.array([5.0, 6.0])), [5.0, 6.0])


def test_sum_constraint_projection():
    f = SumConstraintIndicator(3, 3.0)
    out = prox(f, SpdOperator.identity(3), np.array([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out, [1.0, 1.0, 1.0])


def test_linear_equality_edge_projection():
    # projection onto {w1 + w2 = b} subtracts half the gap from each copy
    f = LinearEqualityIndicator(np.array([[1.0, 1.0]]), [1.0])
    np.testing.assert_allclose(prox(f, SpdOperator.identity(2), np.array([2.0, 3.0])), [0.0, 1.0])


def test_conjugate_of_point_is_shift():
    f = PointIndicator([1.0, -1.0])
    sigma_inv = SpdOperator.diagonal([2.0, 4.0])
    out = prox_conjugate(f, sigma_inv, np.array([0.0, 0.0]))
    np.testing.assert_allclose(out, [-0.5, 0.25])


def test_dimension_mismatch_rejected():
    with pytest.raises(RejectedInputError):
        prox(Zero(2), SpdOperator.identity(3), np.zeros(3))
    with pytest.raises(RejectedInputError):
        BoxIndicator([1.0], [0.0])
    with pytest.raises(RejectedInputError):
        LinearEqualityIndicator(np.array([[1.0, 1.0], [2.0, 2.0]]), [0.0, 0.0])


def test_separable_sum_rejects_coupling_metric():
    f = SeparableSum((Zero(1), Zero(1)))
    with pytest.raises(RejectedInputError):
        prox(f, SpdOperator.from_matrix(np.array([[2.0, 1.0], [1.0, 2.0]])), np.zeros(2))


def test_splits_over():
    assert BoxIndicator([0, 0], [1, 1]).splits_over([(0, 1), (1, 2)])
    assert not SumConstraintIndicator(2, 0.0).splits_over([(0, 1), (1, 2)])
    assert SumConstraintIndicator(2, 0.0).splits_over([(0, 2)])
    f = SeparableSum((SumConstraintIndicator(2, 0.0), Zero(2)))
    assert f.splits_over([(0, 2), (2, 4)])
    assert not f.splits_over([(0, 1), (1, 4)])


def _box_kkt(q, x, u, lo, hi, tol=1e-9):
    g = q @ (u - x)
    interior = (u > lo + tol) & (u < hi - tol)
    assert np.all(np.abs(g[interior]) <= tol * max(1.0, np.max(np.abs(g))))
    assert np.all(g[np.isclose(u, lo) & ~np.isclose(u, hi)] >= -tol)
    assert np.all(g[np.isclose(u, hi) & ~np.isclose(u, lo)] <= tol)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2**32 - 1))
def test_box_qp_kkt(n, seed):
    rng = np.random.default_rng(seed)
    q = random_spd(rng, n, 0.2, 5.0)
    lo = -rng.uniform(0, 2, n)
    hi = rng.uniform(0, 2, n)
    x = 3.0 * rng.standard_normal(n)
    u = box_qp(q, x, lo, hi)
    assert np.all(u >= lo) and np.all(u <= hi)
    _box_kkt(q, x, u, lo, hi)


def test_box_qp_matches_brute_force():
    # exhaustive face enumeration on a tiny instance
    rng = np.random.default_rng(3)
    q = random_spd(rng, 3)
    lo, hi = -np.ones(3), np.ones(3)
    x = np.array([2.0, -3.0, 0.4])
    best = None
    for pat in itertools.product((0, 1, 2), repeat=3):
        pat = np.array(pat)
        fixed = pat < 2
        u = np.where(pat == 0, lo, hi).astype(float)
        free = ~fixed
        if np.any(free):
            rhs = q[np.ix_(free, free)] @ x[free] - q[np.ix_(free, fixed)] @ (u[fixed] - x[fixed])
            u[free] = np.linalg.solve(q[np.ix_(free, free)], rhs)
        if np.all(u >= lo - 1e-12) and np.all(u <= hi + 1e-12):
            val = (u - x) @ q @ (u - x)
            if best is None or val < best[0]:
                best = (val, u)
    np.testing.assert_allclose(box_qp(q, x, lo, hi), best[1], atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_l1_dense_metric_optimality(n, seed):
    rng = np.random.default_rng(seed)
    q = SpdOperator.from_matrix(random_spd(rng, n))
    w = rng.uniform(0.1, 2.0)
    x = 3.0 * rng.standard_normal(n)
    u = prox(L1Norm(n, w), q, x)
    # Q(x - u) must be a subgradient of w||.||_1 at u
    g = q.apply(x - u)
    nz = np.abs(u) > 1e-10
    np.testing.assert_allclose(g[nz], w * np.sign(u[nz]), atol=1e-8)
    assert np.all(np.abs(g[~nz]) <= w + 1e-8)


def test_affine_projection_dense_metric():
    rng = np.random.default_rng(4)
    q = SpdOperator.from_matrix(random_spd(rng, 4))
    f = AffineSetIndicator([1.0, -2.0, 0.5, 1.0], 3.0)
    x = rng.standard_normal(4)
    u = prox(f, q, x)
    assert f.normal @ u == pytest.approx(3.0)
    # optimality: Q(x - u) is parallel to the normal
    g = q.apply(x - u)
    assert np.linalg.matrix_rank(np.vstack([g, f.normal]), tol=1e-9) == 1
