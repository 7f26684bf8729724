import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from statn.errors import ConstraintError, NumericalError
from statn.manifold import (
    centred_error, constrained_sgd_step, jacobi_eigh, polar_factor, proj_centred, proj_stiefel,
    restore, retr_centred, retr_stiefel, stiefel_error, sym,
)
from statn.tensor_core import Param


def stiefel_point(rng, n=12, k=4):
    return np.linalg.qr(rng.standard_normal((n, k)))[0]


def centred_point(rng, m=2, n=9):
    x = rng.standard_normal((m, n))
    return x - x.mean(axis=1, keepdims=True)


# -- centred manifold ------------------------------------------------------------

def test_proj_centred_cases(rng):
    x = centred_point(rng)
    u = centred_point(rng)
    np.testing.assert_allclose(proj_centred(x, u), u, atol=1e-15)
    np.testing.assert_array_equal(proj_centred(x, np.ones((2, 9))), np.zeros((2, 9)))


@given(st.integers(0, 2 ** 20))
def test_proj_centred_row_sums_and_idempotence(seed):
    r = np.random.default_rng(seed)
    x, u = centred_point(r), r.standard_normal((2, 9)) * 10
    p = proj_centred(x, u)
    assert np.abs(p.sum(axis=1)).max() < 1e-13
    np.testing.assert_allclose(proj_centred(x, p), p, atol=1e-13)


def test_retr_centred_cases(rng):
    x = centred_point(rng)
    np.testing.assert_array_equal(retr_centred(x, np.zeros_like(x)), x)
    v = centred_point(rng)
    np.testing.assert_array_equal(retr_centred(np.zeros_like(x), v), v)
    out = retr_centred(x, proj_centred(x, rng.standard_normal(x.shape)))
    assert centred_error(out) < 1e-12


def test_retr_centred_rejects_uncentred(rng):
    x = centred_point(rng)
    with pytest.raises(ConstraintError):
        retr_centred(x + 1, np.zeros_like(x))
    with pytest.raises(ConstraintError):
        retr_centred(x, np.ones_like(x))


# -- Stiefel projection ------------------------------------------------------------

def test_proj_stiefel_of_point_is_zero(rng):
    x = stiefel_point(rng)
    assert np.abs(proj_stiefel(x, x)).max() < 1e-14


@given(st.integers(0, 2 ** 20))
def test_proj_stiefel_tangent_and_idempotent(seed):
    r = np.random.default_rng(seed)
    x, u = stiefel_point(r), r.standard_normal((12, 4))
    t = proj_stiefel(x, u)
    m = x.T @ t
    assert np.linalg.norm(m + m.T) < 1e-10
    np.testing.assert_allclose(proj_stiefel(x, t), t, atol=1e-12)


@given(st.integers(0, 2 ** 20))
def test_proj_stiefel_orthogonal_to_normal_space(seed):
    r = np.random.default_rng(seed)
    x, u = stiefel_point(r), r.standard_normal((12, 4))
    s = sym(r.standard_normal((4, 4)))
    assert abs(np.sum(proj_stiefel(x, u) * (x @ s))) < 1e-10


@given(st.integers(0, 2 ** 20), st.floats(-3, 3), st.floats(-3, 3))
def test_projections_are_linear(seed, a, b):
    r = np.random.default_rng(seed)
    x, u, v = stiefel_point(r), r.standard_normal((12, 4)), r.standard_normal((12, 4))
    np.testing.assert_allclose(proj_stiefel(x, a * u + b * v),
                               a * proj_stiefel(x, u) + b * proj_stiefel(x, v), atol=1e-10)
    xc, uc, vc = centred_point(r), r.standard_normal((2, 9)), r.standard_normal((2, 9))
    np.testing.assert_allclose(proj_centred(xc, a * uc + b * vc),
                               a * proj_centred(xc, uc) + b * proj_centred(xc, vc), atol=1e-10)


def test_proj_stiefel_rejects_off_manifold(rng):
    x = stiefel_point(rng) * 1.01
    with pytest.raises(ConstraintError):
        proj_stiefel(x, x)


# -- eigensolver and polar factor -----------------------------------------------------

@given(st.integers(0, 2 ** 20), st.integers(1, 12))
def test_jacobi_matches_numpy_eigh(seed, k):
    r = np.random.default_rng(seed)
    a = sym(r.standard_normal((k, k)))
    lam, e = jacobi_eigh(a)
    np.testing.assert_allclose(np.sort(lam), np.linalg.eigvalsh(a), atol=1e-12)
    np.testing.assert_allclose(e @ np.diag(lam) @ e.T, a, atol=1e-12)
    np.testing.assert_allclose(e.T @ e, np.eye(k), atol=1e-12)


def test_jacobi_handles_diagonal_and_degenerate():
    lam, e = jacobi_eigh(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_array_equal(lam, [3.0, 1.0, 2.0])
    lam, _ = jacobi_eigh(np.ones((3, 3)))
    np.testing.assert_allclose(np.sort(lam), [0, 0, 3], atol=1e-14)


def test_polar_factor_matches_svd(rng):
    a = rng.standard_normal((20, 5))
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    np.testing.assert_allclose(polar_factor(a), u @ vt, atol=1e-12)


def test_polar_factor_rank_deficient(rng):
    a = rng.standard_normal((10, 3))
    a[:, 2] = a[:, 0] + a[:, 1]
    with pytest.raises(NumericalError, match="rank-deficient"):
        polar_factor(a)


# -- Stiefel retraction ----------------------------------------------------------

def test_retr_stiefel_zero_step_is_exact(rng):
    x = stiefel_point(rng)
    assert np.array_equal(retr_stiefel(x, np.zeros_like(x)), x)


def test_retr_stiefel_of_orthonormal_sum(rng):
    x = stiefel_point(rng)
    q = stiefel_point(rng)
    np.testing.assert_allclose(retr_stiefel(x, q - x), q, atol=1e-12)


def test_retr_stiefel_is_nearest_orthonormal(rng):
    x = stiefel_point(rng, 15, 3)
    v = proj_stiefel(x, 0.3 * rng.standard_normal((15, 3)))
    q = retr_stiefel(x, v)
    assert stiefel_error(q) < 1e-10
    best = np.linalg.norm(q - (x + v))
    for _ in range(1000):
        cand = stiefel_point(rng, 15, 3)
        assert best <= np.linalg.norm(cand - (x + v))
    # nearby candidates are the hard case for random sampling
    for _ in range(200):
        cand = polar_factor(q + 1e-3 * rng.standard_normal(q.shape))
        assert best <= np.linalg.norm(cand - (x + v)) + 1e-15


@given(st.integers(0, 2 ** 20))
def test_retr_stiefel_output_orthonormal(seed):
    r = np.random.default_rng(seed)
    x = stiefel_point(r)
    q = retr_stiefel(x, r.standard_normal(x.shape))
    assert stiefel_error(q) < 1e-10


def test_retraction_is_first_order(rng):
    x = stiefel_point(rng)
    v = proj_stiefel(x, rng.standard_normal(x.shape))
    ts = np.logspace(-1, -4, 7)
    errs = [np.linalg.norm(retr_stiefel(x, t * v) - (x + t * v)) for t in ts]
    slope = np.polyfit(np.log(ts), np.log(errs), 1)[0]
    assert abs(slope - 2) < 0.1


# -- constrained SGD -----------------------------------------------------------------

def test_zero_gradient_leaves_value(rng):
    for p in (Param(stiefel_point(rng), "stiefel"), Param(centred_point(rng), "centred"),
              Param(rng.standard_normal(3))):
        before = p.value.copy()
        constrained_sgd_step(p, 0.1)
        np.testing.assert_array_equal(p.value, before)


def test_unconstrained_step():
    p = Param(np.array([2.0]))
    p.grad[:] = 3.0
    constrained_sgd_step(p, 0.5)
    assert p.value[0] == 0.5


def test_entry_invariant_is_checked(rng):
    p = Param(stiefel_point(rng) * 1.1, "stiefel")
    with pytest.raises(ConstraintError):
        constrained_sgd_step(p, 0.1)
    q = Param(centred_point(rng) + 0.1, "centred")
    with pytest.raises(ConstraintError):
        constrained_sgd_step(q, 0.1)


def test_random_gradient_sweep_keeps_invariants(rng):
    for n, k in ((72, 4), (3072, 10)):
        p = Param(stiefel_point(rng, n, k), "stiefel", learning_rate=0.05)
        for _ in range(200):
            p.grad = rng.standard_normal(p.value.shape)
            constrained_sgd_step(p)
            assert stiefel_error(p.value) < 1e-5
    c = Param(centred_point(rng, 2, 36), "centred", learning_rate=0.05)
    for _ in range(200):
        c.grad = rng.standard_normal(c.value.shape)
        constrained_sgd_step(c)
        assert centred_error(c.value) < 1e-8


def test_restore_repairs_drift(rng):
    p = Param(stiefel_point(rng), "stiefel")
    p.value = p.value + 1e-7 * rng.standard_normal(p.value.shape)
    assert restore(p)
    assert stiefel_error(p.value) < 1e-12
    assert not restore(p)
    c = Param(centred_point(rng), "centred")
    c.value = c.value + 1e-6
    assert restore(c) and centred_error(c.value) < 1e-14
