import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linprog

from calibra.errors import SolverError
from calibra.gamesolve import game_value, matrix_hash, solve_zero_sum


def lp_value(A):
    """Independent oracle: min_p max_b (p A)_b as an LP over (p, v)."""
    nr, nc = A.shape
    res = linprog(np.r_[np.zeros(nr), 1.0], A_ub=np.c_[A.T, -np.ones(nc)], b_ub=np.zeros(nc),
                  A_eq=np.r_[np.ones(nr), 0.0][None, :], b_eq=[1.0],
                  bounds=[(0, None)] * nr + [(None, None)], method="highs-ds")
    assert res.status == 0
    return res.fun


def certify(sol, A, tol=1e-7):
    assert sol.row.min() >= 0 and sol.col.min() >= 0
    assert sol.row.sum() == pytest.approx(1.0, abs=1e-12)
    assert sol.col.sum() == pytest.approx(1.0, abs=1e-12)
    upper = (sol.row @ A).max()
    lower = (A @ sol.col).min()
    assert upper - lower <= tol
    assert lower - 1e-12 <= sol.value <= upper + 1e-12


def test_zero_game():
    sol = solve_zero_sum(np.zeros((3, 4)))
    assert sol.value == 0.0
    certify(sol, np.zeros((3, 4)))


def test_matching_pennies():
    A = np.array([[1.0, -1.0], [-1.0, 1.0]])
    sol = solve_zero_sum(A)
    assert sol.value == pytest.approx(0.0, abs=1e-12)
    assert sol.row == pytest.approx([0.5, 0.5])
    assert sol.col == pytest.approx([0.5, 0.5])


def test_dominated_row_gets_no_mass():
    A = np.array([[0.0, 1.0], [2.0, 3.0]])
    sol = solve_zero_sum(A)
    assert sol.row.tolist() == pytest.approx([1.0, 0.0])
    assert sol.value == pytest.approx(1.0)


def test_duplicate_rows_are_lifted():
    A = np.array([[1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
    sol = solve_zero_sum(A)
    certify(sol, A)
    assert sol.row[1] == 0.0
    assert sol.value == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
              elements=st.floats(-3, 3, allow_nan=False)))
def test_random_games_match_lp_oracle(A):
    sol = solve_zero_sum(A)
    certify(sol, A)
    assert sol.value == pytest.approx(lp_value(A), abs=1e-7)


def test_near_degenerate_stage_like_games(rng):
    # rank-structured payoffs with many repeated values, like online stage games
    for _ in range(50):
        c1 = rng.integers(-3, 4, size=20) / 7
        c2 = rng.integers(0, 3, size=20) / 11
        Vu = np.linspace(-0.5, 0.5, 21)
        A = c1[:, None] * Vu[None, :] + c2[:, None] * Vu[None, :] ** 2
        sol = solve_zero_sum(A)
        certify(sol, A)
        assert sol.value == pytest.approx(lp_value(A), abs=1e-7)


@pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.zeros(3), np.array([[np.nan, 1.0]])])
def test_invalid_payoffs(bad):
    with pytest.raises(SolverError):
        solve_zero_sum(bad)


def test_game_value_and_hash():
    A = np.array([[2.0, 0.0], [0.0, 1.0]])
    # oracle: 2x2 without saddle point, value = (ad - bc) / (a + d - b - c)
    assert game_value(A) == pytest.approx(2.0 / 3.0)
    assert matrix_hash(A) == matrix_hash(A.copy())
    assert matrix_hash(A) != matrix_hash(A.T.copy() + 1)
