import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hbloc.hypermodel import NoiseModel, VarianceGrouping
from hbloc.solver import (
    LinearOperator,
    RankDeficientError,
    SolverConfig,
    cgls,
    dense_lsq,
    priorconditioned_solve,
    whitened_operator,
)
from oracles import stacked_tikhonov


def test_cgls_identity_one_step():
    b = np.array([1.0, -2.0, 3.0])
    x, iters, hist = cgls(np.eye(3), b)
    assert iters == 1
    assert np.allclose(x, b)
    assert hist[-1] == pytest.approx(0.0, abs=1e-14)


def test_cgls_zero_rhs():
    x, iters, _ = cgls(np.ones((3, 2)), np.zeros(3))
    assert iters == 0 and np.all(x == 0)


def test_cgls_zero_operator_flag():
    res = cgls(np.zeros((3, 2)), np.ones(3))
    assert res.zero_operator and np.all(res.x == 0)


def test_cgls_residual_history_monotone():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((30, 20))
    b = rng.standard_normal(30)
    res = cgls(A, b, SolverConfig(max_iters=20, rel_residual_tol=1e-14))
    assert np.all(np.diff(res.residual_history) <= 1e-12)


def test_cgls_damped_matches_normal_equations():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((15, 25))
    b = rng.standard_normal(15)
    x = cgls(A, b, SolverConfig.exact(25), damp=0.7).x
    ref = np.linalg.solve(A.T @ A + 0.49 * np.eye(25), A.T @ b)
    assert np.allclose(x, ref, rtol=1e-10, atol=1e-12)


def test_cgls_accepts_operator():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((12, 6))
    op = LinearOperator(12, 6, lambda v: A @ v, lambda y: A.T @ y)
    b = rng.standard_normal(12)
    assert np.allclose(cgls(op, b, SolverConfig.exact(6)).x, np.linalg.lstsq(A, b, rcond=None)[0])
    with pytest.raises(ValueError):
        cgls(op, np.ones(5))


def test_whitened_operator_adjoint():
    rng = np.random.default_rng(5)
    M = rng.standard_normal((7, 10))
    g = VarianceGrouping.blocks(5, 2)
    op, _ = whitened_operator(M, NoiseModel(0.3), rng.uniform(0.1, 2, 5), g)
    x, y = rng.standard_normal(10), rng.standard_normal(7)
    assert np.dot(op.apply(x), y) == pytest.approx(np.dot(x, op.apply_transpose(y)), rel=1e-12)


def test_priorconditioned_dimension_checks():
    g = VarianceGrouping.identity(3)
    with pytest.raises(ValueError):
        priorconditioned_solve(np.ones((2, 3)), np.ones(3), NoiseModel(1.0), np.ones(3), g)
    with pytest.raises(ValueError):
        priorconditioned_solve(np.ones((2, 3)), np.ones(2), NoiseModel(1.0), np.ones(2), g)
    with pytest.raises(ValueError):
        priorconditioned_solve(np.ones((2, 3)), np.ones(2), NoiseModel(1.0), np.array([1.0, 0.0, 1.0]), g)


@pytest.mark.parametrize("method", ["cgls", "direct"])
@pytest.mark.parametrize("shape", [(8, 20), (20, 8)])
def test_priorconditioned_matches_stacked(method, shape):
    rng = np.random.default_rng(6)
    L, K = shape
    M = rng.standard_normal((L, K))
    b = rng.standard_normal(L)
    theta = rng.uniform(0.05, 3.0, K)
    alpha = priorconditioned_solve(M, b, NoiseModel(0.4), theta, VarianceGrouping.identity(K),
                                   SolverConfig.exact(K, method=method))
    ref = stacked_tikhonov(M, b, 0.4, theta)
    assert np.linalg.norm(alpha - ref) <= 1e-10 * np.linalg.norm(ref)


def test_truncated_mode_is_early_stopped_cgls():
    rng = np.random.default_rng(7)
    M = rng.standard_normal((10, 30))
    b = rng.standard_normal(10)
    theta = np.ones(30)
    a3 = priorconditioned_solve(M, b, NoiseModel(1.0), theta, VarianceGrouping.identity(30),
                                SolverConfig(max_iters=3, mode="truncated", rel_residual_tol=1e-30))
    ref = cgls(M, b, SolverConfig(max_iters=3, rel_residual_tol=1e-30)).x
    assert np.allclose(a3, ref)


def test_dense_lsq_rank_deficient():
    A = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    with pytest.raises(RankDeficientError, match="rank 1"):
        dense_lsq(A, np.ones(3))
    with pytest.raises(RankDeficientError):
        dense_lsq(np.ones((2, 3)), np.ones(2))


def test_dense_lsq_full_rank():
    rng = np.random.default_rng(8)
    A = rng.standard_normal((9, 4))
    b = rng.standard_normal(9)
    assert np.allclose(dense_lsq(A, b), np.linalg.lstsq(A, b, rcond=None)[0], rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), L=st.integers(2, 12), K=st.integers(2, 12),
       scale=st.floats(min_value=1e-3, max_value=1e3))
def test_cgls_exact_property(seed, L, K, scale):
    rng = np.random.default_rng(seed)
    M = scale * rng.standard_normal((L, K))
    b = rng.standard_normal(L)
    theta = rng.uniform(0.1, 1.0, K)
    alpha = priorconditioned_solve(M, b, NoiseModel(1.0), theta, VarianceGrouping.identity(K), SolverConfig.exact(K))
    ref = stacked_tikhonov(M, b, 1.0, theta)
    assert np.linalg.norm(alpha - ref) <= 1e-7 * max(np.linalg.norm(ref), 1e-300)
