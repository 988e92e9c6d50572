import math

import numpy as np
import pytest
import scipy.integrate
from hypothesis import given, settings, strategies as st

from markovlife.errors import DomainError, StructuralError
from markovlife.matrixcore import (PiecewiseMatrixFunction, align, check_intensity, delta,
                                   expm, expm_action, kron, kron_sum, prod_integral,
                                   prod_integral_apply, prod_integral_inverse, van_loan)

from conftest import random_intensity


def taylor_expm(a, terms=50):
    out = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for k in range(1, terms):
        term = term @ a / k
        out = out + term
    return out


def random_piecewise(rng, n, pieces=3, scale=1.0, intensity=False, end=None):
    bp = np.concatenate([[0.0], np.cumsum(rng.uniform(0.2, 1.0, pieces))])
    if end is not None:
        bp = bp * (end / bp[-1])
    if intensity:
        vals = np.stack([random_intensity(rng, n, scale) for _ in range(pieces)])
    else:
        vals = rng.normal(0, scale, (pieces, n, n))
    return PiecewiseMatrixFunction(bp, vals)


def test_expm_matches_taylor(rng):
    for _ in range(20):
        a = rng.normal(size=(4, 4))
        a /= np.linalg.norm(a, 2)
        assert np.abs(expm(a) - taylor_expm(a)).max() < 1e-10


def test_expm_action_matches_dense(rng):
    a = random_intensity(rng, 6, 3.0)
    v = rng.normal(size=(6, 2))
    assert np.allclose(expm_action(a * 2.5, v), expm(a * 2.5) @ v, atol=1e-12)


def test_constant_product_integral_is_expm(rng):
    a = rng.normal(size=(3, 3))
    assert np.abs(prod_integral(a, 0.3, 1.7) - expm(a * 1.4)).max() < 1e-12


def test_product_rule(rng):
    for _ in range(10):
        F = random_piecewise(rng, 3)
        s, t, u = sorted(rng.uniform(F.start, F.end, 3))
        lhs = prod_integral(F, s, u)
        rhs = prod_integral(F, s, t) @ prod_integral(F, t, u)
        assert np.abs(lhs - rhs).max() < 1e-10


def test_stochastic_rows(rng):
    F = random_piecewise(rng, 4, intensity=True, scale=2.0)
    P = prod_integral(F, F.start, F.end)
    assert P.min() >= -1e-12
    assert np.abs(P.sum(axis=1) - 1).max() < 1e-10


def test_apply_matches_dense(rng):
    F = random_piecewise(rng, 5)
    v = rng.normal(size=5)
    assert np.allclose(prod_integral_apply(F, 0.1, F.end, v), prod_integral(F, 0.1, F.end) @ v,
                       atol=1e-11)


def test_reversed_interval_rejected(rng):
    F = random_piecewise(rng, 2)
    with pytest.raises(DomainError):
        prod_integral(F, 1.0, 0.5)
    with pytest.raises(DomainError):
        prod_integral(F, 0.0, F.end + 1)


def test_van_loan_lower_triangular_block_zero(rng):
    A, B, C = rng.normal(size=(2, 2)), rng.normal(size=(2, 3)), rng.normal(size=(3, 3))
    UL, UR, LR = van_loan(A, B, C, 0.0, 1.0)
    assert np.allclose(UL, expm(A)) and np.allclose(LR, expm(C))


def test_van_loan_shape_mismatch():
    with pytest.raises(StructuralError):
        van_loan(np.eye(2), np.ones((3, 3)), np.eye(3), 0.0, 1.0)


def test_kron_index_convention():
    a = np.arange(4.0).reshape(2, 2)
    b = np.arange(9.0).reshape(3, 3)
    K = kron(a, b)
    # combined index i*p + j
    assert K[1 * 3 + 2, 0 * 3 + 1] == a[1, 0] * b[2, 1]
    assert np.allclose(kron_sum(a, b), np.kron(a, np.eye(3)) + np.kron(np.eye(2), b))


def test_kron_sum_of_intensities_is_intensity(rng):
    check_intensity(kron_sum(random_intensity(rng, 3), random_intensity(rng, 2)))


def test_check_intensity_rejects():
    with pytest.raises(DomainError):
        check_intensity(np.array([[-1.0, 0.5], [0.2, -0.2]]))
    with pytest.raises(DomainError):
        check_intensity(np.array([[0.1, -0.1], [0.2, -0.2]]))
    check_intensity(np.array([[-1.0, 0.5], [0.2, -0.2]]), sub=True)


def test_piecewise_validation():
    with pytest.raises(DomainError):
        PiecewiseMatrixFunction([0.0, 0.0], np.zeros((1, 2, 2)))
    with pytest.raises(StructuralError):
        PiecewiseMatrixFunction([0.0, 1.0, 2.0], np.zeros((1, 2, 2)))
    with pytest.raises(DomainError):
        PiecewiseMatrixFunction([0.0, 1.0], np.full((1, 1, 1), np.nan))


def test_from_callable_keeps_breakpoints():
    F = PiecewiseMatrixFunction.from_callable(lambda s: [[s]], [0.0, 1.0, 2.5], step=0.3)
    assert 1.0 in F.breakpoints
    assert F(0.0)[0, 0] == pytest.approx(0.125)
    assert F(2.5)[0, 0] == pytest.approx(2.5 - 0.15)


def test_align_common_grid(rng):
    F = PiecewiseMatrixFunction([0.0, 1.0, 3.0], np.stack([np.eye(2), 2 * np.eye(2)]))
    G = PiecewiseMatrixFunction([0.0, 2.0, 3.0], np.stack([np.eye(2), 3 * np.eye(2)]))
    grid, (fv, gv) = align(F, G)
    assert list(grid) == [0.0, 1.0, 2.0, 3.0]
    assert fv[:, 0, 0].tolist() == [1, 2, 2] and gv[:, 0, 0].tolist() == [1, 1, 3]


def test_delta():
    assert np.array_equal(delta([1, 2]), np.diag([1.0, 2.0]))


def test_van_loan_against_quadrature(rng):
    A = random_piecewise(rng, 3, pieces=2, end=1.0)
    C = random_piecewise(rng, 3, pieces=2, end=1.0)
    B = random_piecewise(rng, 3, pieces=2, end=1.0)
    UR = van_loan(A, B, C, 0.0, 1.0)[1]

    def integrand(x, Bx):
        return prod_integral(A, 0.0, x) @ Bx @ prod_integral(C, x, 1.0)

    pts = sorted(set(np.concatenate([A.breakpoints, B.breakpoints, C.breakpoints])))
    total = np.zeros((3, 3))
    for lo, hi in zip(pts[:-1], pts[1:]):
        xs = np.linspace(lo, hi, 201)
        Bx = B(0.5 * (lo + hi))
        vals = np.stack([integrand(x, Bx) for x in xs])
        total += scipy.integrate.simpson(vals, x=xs, axis=0)
    assert np.abs(UR - total).max() < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31), st.floats(0.0, 2.0))
def test_scalar_shift_property(seed, r):
    rng = np.random.default_rng(seed)
    F = random_piecewise(rng, 3)
    s, t = F.start, F.end
    lhs = math.exp(-r * (t - s)) * prod_integral(F, s, t)
    rhs = prod_integral(F - r * np.eye(3), s, t)
    assert np.abs(lhs - rhs).max() < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31))
def test_inverse_property(seed):
    rng = np.random.default_rng(seed)
    F = random_piecewise(rng, 3, scale=0.5, end=3.0)
    s, t = sorted(rng.uniform(0, 3.0, 2))
    I = prod_integral(F, s, t) @ prod_integral_inverse(F, s, t)
    assert np.abs(I - np.eye(3)).max() < 1e-9
