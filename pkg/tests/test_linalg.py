import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kklcert.linalg import (NoSolutionError, ObserverDesign, gamma_factor, lyapunov_residual,
                            power_iteration_norm, solve_lyapunov, spectral_norm_upper,
                            sym_eigenvalues)


def _random_spd(rng, n):
    M = rng.normal(size=(n, n))
    return M @ M.T + n * np.eye(n) * 0.1


def test_lyapunov_identity_case():
    assert np.allclose(solve_lyapunov(-np.eye(2), 2 * np.eye(2)), np.eye(2), atol=1e-14)


def test_lyapunov_substitution():
    A = -np.diag(np.arange(1.0, 6.0))
    Q = 2 * np.diag(np.arange(1.0, 6.0))
    assert lyapunov_residual(A, np.eye(5), Q) <= 1e-12
    assert np.allclose(solve_lyapunov(A, Q), np.eye(5), atol=1e-12)


def test_lyapunov_scalar_blocks():
    lam = np.arange(2.0, 11.0, 2.0)
    P = solve_lyapunov(-np.diag(lam), np.eye(5))
    assert np.allclose(P, np.diag(1 / (2 * lam)), atol=1e-14)


def test_lyapunov_rejects_unstable():
    with pytest.raises(NoSolutionError):
        solve_lyapunov(np.diag([-1.0, 1.0]), np.eye(2))
    with pytest.raises(NoSolutionError):
        solve_lyapunov(np.zeros((2, 2)), np.eye(2))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 31))
def test_lyapunov_random_hurwitz(n, seed):
    rng = np.random.default_rng(seed)
    A = -np.diag(rng.uniform(0.1, 10.0, n))
    Q = _random_spd(rng, n)
    P = solve_lyapunov(A, Q)
    assert lyapunov_residual(A, P, Q) <= 1e-10
    assert np.allclose(P, P.T)
    assert sym_eigenvalues(P)[0] > 0


@pytest.mark.parametrize("M, expected", [
    (np.eye(3), [1, 1, 1]),
    (np.diag([3.0, 1.0, 2.0]), [1, 2, 3]),
    ([[2.0, 1.0], [1.0, 2.0]], [1, 3]),
])
def test_sym_eigenvalues_examples(M, expected):
    assert np.allclose(sym_eigenvalues(M), expected, atol=1e-12)


def test_sym_eigenvalues_rejects_asymmetric():
    with pytest.raises(ValueError):
        sym_eigenvalues([[1.0, 2.0], [0.0, 1.0]])


@pytest.mark.parametrize("M, upper", [
    (np.eye(4), 1.0),
    (np.ones((2, 2)), 2.0),
    ([[0.0, 1.0], [0.0, 0.0]], 1.0),
])
def test_spectral_norm_examples(M, upper):
    up, wit = spectral_norm_upper(M)
    assert np.isclose(up, upper)
    assert np.isclose(wit, np.linalg.norm(np.asarray(M), 2), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_spectral_norm_brackets(m, n, seed):
    M = np.random.default_rng(seed).normal(size=(m, n))
    up, wit = spectral_norm_upper(M)
    assert up >= wit * (1 - 1e-12)
    assert up >= np.linalg.norm(M, 2) * (1 - 1e-12)
    assert up <= np.sqrt(min(m, n)) * np.linalg.norm(M, 2) * (1 + 1e-12)


def test_power_iteration_batched():
    M = np.stack([np.diag([2.0, 1.0]), np.diag([0.5, 3.0])])
    assert np.allclose(power_iteration_norm(M), [2.0, 3.0], atol=1e-9)


def test_gamma_examples():
    d1 = ObserverDesign.diagonal(np.arange(1.0, 6.0))
    assert gamma_factor(d1) == 1.0
    assert np.isclose(gamma_factor(d1, optimized=False), 1.0)
    d2 = ObserverDesign.diagonal(np.arange(2.0, 11.0, 2.0))
    assert gamma_factor(d2) == 0.25
    assert d2.gamma == 0.25


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 31))
def test_gamma_never_beats_optimum(n, seed):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(0.5, 10.0, n)
    A = -np.diag(lam)
    P = np.diag(rng.uniform(0.1, 10.0, n))
    Q = -(P @ A + A.T @ P)
    design = ObserverDesign(A, np.ones((n, 1)), P, Q)
    assert gamma_factor(design, optimized=False) >= (1 / lam.min() ** 2) * (1 - 1e-12)


def test_design_validation():
    with pytest.raises(ValueError):
        ObserverDesign(np.diag([1.0, -1.0]), np.ones((2, 1)), np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        ObserverDesign(-np.eye(2), np.ones((2, 1)), np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        ObserverDesign([[-1.0, 0.1], [0.0, -2.0]], np.ones((2, 1)), np.eye(2), np.eye(2))


def test_design_round_trip():
    d = ObserverDesign.diagonal([1.0, 2.0, 3.0], Q=np.eye(3))
    e = ObserverDesign.from_dict(d.to_dict())
    assert np.array_equal(e.A, d.A) and np.allclose(e.P, d.P) and e.gamma == d.gamma
