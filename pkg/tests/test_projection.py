"""Unit and property tests for the projection kernel."""

import numpy as np
import numpy.testing as npt
import pytest

from craftfl.errors import InvalidInputError
from craftfl.projection import (
    DEFAULT_RANK_TOL,
    config_direction,
    craft_correct,
    gram_solve,
    normalize,
)

RT2 = np.sqrt(2.0)


def random_instance(rng, m=None, d=None):
    """Full-row-rank alignment matrix with positive normalized targets."""
    m = m if m is not None else int(rng.integers(1, 11))
    d = d if d is not None else int(rng.integers(max(2 * m, 20), 201))
    U = rng.standard_normal((m, d))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    rho = rng.uniform(0.1, 1.0, size=m)
    rho /= rho.sum()
    return U, rho


# ---------------------------------------------------------------------------
# normalize
# ---------------------------------------------------------------------------

def test_normalize_unit_limit():
    out = normalize(np.array([3.0, 4.0]), eps=1e-15)
    npt.assert_allclose(out, [0.6, 0.8], atol=1e-12)


def test_normalize_zero_vector_fixed_point():
    out = normalize(np.zeros(3), eps=1e-8)
    npt.assert_array_equal(out, np.zeros(3))


def test_normalize_eps_arithmetic():
    out = normalize(np.array([1.0, 0.0]), eps=1.0)
    npt.assert_array_equal(out, [0.5, 0.0])


def test_normalize_shrinks_below_unit():
    rng = np.random.default_rng(7)
    for _ in range(20):
        v = rng.standard_normal(5)
        n = np.linalg.norm(normalize(v))
        assert 0.0 < n < 1.0


def test_normalize_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        normalize(np.array([1.0, np.nan]))
    with pytest.raises(InvalidInputError):
        normalize(np.array([np.inf, 0.0]))


def test_normalize_rejects_bad_eps():
    with pytest.raises(InvalidInputError):
        normalize(np.ones(2), eps=0.0)


# ---------------------------------------------------------------------------
# gram_solve
# ---------------------------------------------------------------------------

def test_gram_solve_orthonormal_rows_identity_gram():
    U = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    y, rank = gram_solve(U, np.array([0.5, 0.5]))
    assert rank == 2
    npt.assert_allclose(y, [0.5, 0.5], atol=1e-15)


def test_gram_solve_explicit_2x2_inverse_oracle():
    # Gram matrix [[1, 1/sqrt(2)], [1/sqrt(2), 1]] has the explicit inverse
    # [[2, -sqrt(2)], [-sqrt(2), 2]]; the expected values below were frozen
    # from that inverse applied to b.
    U = np.array([[1.0, 0.0], [1.0 / RT2, 1.0 / RT2]])
    b = np.array([0.6, 0.4])
    oracle = np.array([[2.0, -RT2], [-RT2, 2.0]]) @ b
    y, rank = gram_solve(U, b)
    assert rank == 2
    npt.assert_allclose(y, oracle, atol=1e-12)
    npt.assert_allclose(y, [0.634314575050762, -0.048528137423857], atol=1e-12)


def test_gram_solve_duplicate_rows_rank_one():
    # By hand: G = [[1, 1], [1, 1]] has eigenpairs (2, (1,1)/sqrt(2)) and
    # (0, (1,-1)/sqrt(2)), so G+ b = (0.25, 0.25) for b = (0.5, 0.5).
    U = np.array([[1.0, 0.0], [1.0, 0.0]])
    b = np.array([0.5, 0.5])
    y, rank = gram_solve(U, b)
    assert rank == 1
    npt.assert_allclose(y, [0.25, 0.25], atol=1e-12)
    npt.assert_allclose(U @ U.T @ y, b, atol=1e-12)


def test_gram_solve_scale_covariance_power_of_two_exact():
    rng = np.random.default_rng(3)
    U, _ = random_instance(rng, m=4, d=30)
    b = rng.standard_normal(4)
    y1, _ = gram_solve(U, b)
    y2, _ = gram_solve(U, 2.0 * b)
    npt.assert_array_equal(y2, 2.0 * y1)


def test_gram_solve_scale_covariance_general():
    rng = np.random.default_rng(4)
    for _ in range(20):
        U, _ = random_instance(rng)
        b = rng.standard_normal(U.shape[0])
        c = rng.uniform(-5.0, 5.0)
        y1, _ = gram_solve(U, b)
        y2, _ = gram_solve(U, c * b)
        npt.assert_allclose(y2, c * y1, rtol=1e-11, atol=1e-13)


def test_gram_solve_input_validation():
    U = np.eye(2)
    with pytest.raises(InvalidInputError):
        gram_solve(U, np.array([1.0]))
    with pytest.raises(InvalidInputError):
        gram_solve(U, np.array([1.0, np.nan]))
    with pytest.raises(InvalidInputError):
        gram_solve(U, np.array([1.0, 1.0]), rank_tol=0.0)


# ---------------------------------------------------------------------------
# craft_correct
# ---------------------------------------------------------------------------

def test_craft_orthonormal_rows():
    U = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    res = craft_correct(U, np.array([0.5, 0.5]), np.array([0.0, 0.0, 1.0]))
    npt.assert_allclose(res.direction, [0.5, 0.5, 1.0], atol=1e-14)
    npt.assert_allclose(res.correction, [0.5, 0.5, 0.0], atol=1e-14)
    assert res.gram_rank == 2


def test_craft_feasible_reference_unchanged_bitwise():
    U = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    ref = np.array([0.3, 0.7, 5.0])
    res = craft_correct(U, np.array([0.3, 0.7]), ref)
    npt.assert_array_equal(res.correction, np.zeros(3))
    npt.assert_array_equal(res.direction, ref)


def test_craft_zero_reference_frozen_oracle():
    # Direction frozen from g = U^T y with y from the explicit Gram inverse.
    U = np.array([[1.0, 0.0], [1.0 / RT2, 1.0 / RT2]])
    rho = np.array([0.6, 0.4])
    res = craft_correct(U, rho, np.zeros(2))
    npt.assert_allclose(res.direction, [0.6, -0.034314575050762], atol=1e-12)
    npt.assert_allclose(U @ res.direction, rho, atol=1e-12)


def test_craft_direction_decomposition():
    rng = np.random.default_rng(11)
    for _ in range(30):
        U, rho = random_instance(rng)
        ref = rng.standard_normal(U.shape[1])
        res = craft_correct(U, rho, ref)
        npt.assert_array_equal(res.direction, ref + res.correction)
        npt.assert_allclose(res.residual, U @ res.direction - rho, atol=1e-14)


def test_craft_feasibility_and_conflict_freeness():
    rng = np.random.default_rng(12)
    for _ in range(100):
        U, rho = random_instance(rng)
        ref = rng.standard_normal(U.shape[1])
        res = craft_correct(U, rho, ref)
        assert res.gram_rank == U.shape[0]
        assert np.max(np.abs(U @ res.direction - rho)) <= 1e-8
        assert np.all(U @ res.direction > 0)


def test_craft_minimality_against_null_space_perturbations():
    rng = np.random.default_rng(13)
    for _ in range(25):
        U, rho = random_instance(rng)
        d = U.shape[1]
        ref = rng.standard_normal(d)
        res = craft_correct(U, rho, ref)
        dist = np.linalg.norm(res.direction - ref)
        for _ in range(20):
            w = rng.standard_normal(d)
            y, _ = gram_solve(U, U @ w)
            z = w - U.T @ y
            assert abs(res.correction @ z) <= 1e-8 * np.linalg.norm(res.correction) * np.linalg.norm(z)
            assert np.linalg.norm(res.direction + z - ref) >= dist - 1e-12


def test_craft_inconsistent_targets_least_squares_residual():
    # Duplicated row with incompatible targets: the solve must return the
    # least-squares projection rather than fail. Oracle: project the
    # right-hand side onto range(G) with an SVD-based pseudoinverse.
    U = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    rho = np.array([0.6, 0.4])
    ref = np.array([0.1, -0.2, 0.3])
    res = craft_correct(U, rho, ref)
    assert res.gram_rank == 1
    gram = U @ U.T
    rhs = rho - U @ ref
    oracle_residual = gram @ np.linalg.pinv(gram) @ rhs - rhs
    npt.assert_allclose(res.residual, oracle_residual, atol=1e-12)
    npt.assert_allclose(res.residual, [-0.1, 0.1], atol=1e-12)


def test_craft_duplicate_rows_consistent_targets():
    U = np.array([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    rho = np.array([0.5, 0.5])
    res = craft_correct(U, rho, np.zeros(3))
    npt.assert_allclose(U @ res.direction, rho, atol=1e-10)


def test_craft_dimension_mismatch_errors():
    U = np.eye(3)
    with pytest.raises(InvalidInputError):
        craft_correct(U, np.ones(2), np.zeros(3))
    with pytest.raises(InvalidInputError):
        craft_correct(U, np.ones(3), np.zeros(4))


# ---------------------------------------------------------------------------
# config_direction
# ---------------------------------------------------------------------------

def test_config_orthonormal_rows():
    U = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    res = config_direction(U, np.array([0.5, 0.5]))
    npt.assert_allclose(res.direction, [0.5, 0.5, 0.0], atol=1e-14)


def test_config_equals_craft_with_zero_reference_bitwise():
    rng = np.random.default_rng(21)
    for _ in range(50):
        U, rho = random_instance(rng)
        a = craft_correct(U, rho, np.zeros(U.shape[1]))
        b = config_direction(U, rho)
        npt.assert_array_equal(a.direction, b.direction)
        npt.assert_array_equal(a.residual, b.residual)
        assert a.gram_rank == b.gram_rank


def test_config_single_row():
    u = np.array([0.6, 0.8])
    res = config_direction(u[None, :], np.array([1.0]))
    # 1x1 Gram: g = u * rho / ||u||^2, which is u itself for a unit row.
    npt.assert_allclose(res.direction, u, atol=1e-12)


def test_projection_result_tolerance_contract():
    rng = np.random.default_rng(22)
    for _ in range(50):
        U, rho = random_instance(rng)
        ref = rng.standard_normal(U.shape[1])
        res = craft_correct(U, rho, ref, rank_tol=DEFAULT_RANK_TOL)
        if res.gram_rank == U.shape[0]:
            assert np.max(np.abs(res.residual)) <= 1e-9
