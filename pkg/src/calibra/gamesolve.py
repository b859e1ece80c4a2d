"""Zero-sum matrix games: the row player minimizes, the column player maximizes.

The online learner solves one small game per round, hundreds of thousands of
times per experiment, so the primary solver is a small revised simplex
compiled with numba: a general-purpose LP package's per-call overhead alone
would dominate the run.  HiGHS (through scipy) backs it up on the rare games
where the compiled solver cannot certify the tolerance.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import SolverError

GAME_TOL = 1e-7
_PIVOT_EPS = 1e-12


@dataclass(frozen=True)
class GameSolution:
    row: np.ndarray  # minimizer's mixed strategy
    col: np.ndarray  # maximizer's mixed strategy
    value: float
    gap: float  # upper minus lower bound certified by (row, col)


@njit(cache=True)
def _reinvert(F, cost, basis, nc, ntot):
    """Rebuild the tableau for ``basis`` from the original constraint data."""
    B = np.empty((nc, nc))
    for i in range(nc):
        for k in range(nc):
            B[i, k] = F[i, basis[k]]
    Binv = np.linalg.inv(B)
    body = Binv @ F
    rhs = Binv @ np.ones(nc)
    cb = np.empty(nc)
    for k in range(nc):
        cb[k] = cost[basis[k]]
    T = np.empty((nc + 1, ntot + 1))
    T[:nc, :ntot] = body
    T[:nc, ntot] = rhs
    T[nc, :ntot] = cb @ body - cost
    T[nc, ntot] = cb @ rhs
    return T


@njit(cache=True)
def _simplex(M, max_iter):
    """Tableau simplex for max 1'x s.t. M'x <= 1, x >= 0 with M > 0 (rows x cols).

    At apparent optimality the tableau is rebuilt from the original data
    and pivoting resumes if rounding had hidden an improving column; nearly
    degenerate games otherwise drift by far more than the tolerance.
    Returns (x, y, status): primal, duals of the column constraints,
    0 optimal / 1 iteration limit / 2 numerical failure.
    """
    nr, nc = M.shape
    ntot = nr + nc
    F = np.zeros((nc, ntot))
    for i in range(nc):
        for j in range(nr):
            F[i, j] = M[j, i]
        F[i, nr + i] = 1.0
    cost = np.zeros(ntot)
    cost[:nr] = 1.0
    basis = np.empty(nc, dtype=np.int64)
    for i in range(nc):
        basis[i] = nr + i
    T = np.zeros((nc + 1, ntot + 1))
    T[:nc, :ntot] = F
    T[:nc, ntot] = 1.0
    T[nc, :ntot] = -cost
    status = 1
    reinversions = 0
    for it in range(max_iter):
        bland = it > 50 * ntot
        enter = -1
        best = -_PIVOT_EPS
        for j in range(ntot):
            rc = T[nc, j]
            if rc < best:
                enter = j
                if bland:
                    break
                best = rc
        if enter < 0:
            if reinversions >= 3:
                status = 0
                break
            T = _reinvert(F, cost, basis, nc, ntot)
            reinversions += 1
            clean = True
            for j in range(ntot):
                if T[nc, j] < -_PIVOT_EPS:
                    clean = False
            if clean:
                status = 0
                break
            continue
        leave = -1
        ratio = np.inf
        for i in range(nc):
            a = T[i, enter]
            if a > 1e-11:
                r = max(T[i, ntot], 0.0) / a
                if r < ratio - 1e-15 or (abs(r - ratio) <= 1e-15 and leave >= 0 and basis[i] < basis[leave]):
                    ratio = r
                    leave = i
        if leave < 0:
            status = 2
            break
        piv = T[leave, enter]
        for j in range(ntot + 1):
            T[leave, j] /= piv
        for i in range(nc + 1):
            if i != leave:
                f = T[i, enter]
                if f != 0.0:
                    for j in range(ntot + 1):
                        T[i, j] -= f * T[leave, j]
        basis[leave] = enter
    x = np.zeros(nr)
    for i in range(nc):
        if basis[i] < nr:
            x[basis[i]] = max(T[i, ntot], 0.0)
    y = np.empty(nc)
    for i in range(nc):
        y[i] = T[nc, nr + i]
    return x, y, status


@njit(cache=True)
def _unique_rows(A):
    """Indices of the first occurrence of each distinct row, in row order."""
    nr, nc = A.shape
    keep = np.ones(nr, dtype=np.bool_)
    for i in range(nr):
        if not keep[i]:
            continue
        for k in range(i + 1, nr):
            if keep[k]:
                same = True
                for j in range(nc):
                    if A[i, j] != A[k, j]:
                        same = False
                        break
                if same:
                    keep[k] = False
    return np.flatnonzero(keep)


@njit(cache=True)
def _solve_lp(A, max_iter):
    shift = A.min() - 1.0
    M = A - shift
    x, y, status = _simplex(M, max_iter)
    sx = x.sum()
    sy = y.sum()
    nr, nc = A.shape
    p = np.empty(nr)
    q = np.empty(nc)
    if sx > 0:
        for j in range(nr):
            p[j] = max(x[j], 0.0) / sx
    else:
        p[:] = 1.0 / nr
    if sy > 0:
        for i in range(nc):
            q[i] = max(y[i], 0.0) / sy
    else:
        q[:] = 1.0 / nc
    p /= p.sum()
    q /= q.sum()
    upper = (p @ A).max()
    lower = (A @ q).min()
    return p, q, upper, lower, status


@njit(cache=True)
def _mw(A, iters):
    """Multiplicative weights for the row player against best responses.

    Returns the averaged row strategy and the empirical column strategy.
    """
    nr, nc = A.shape
    span = max(A.max() - A.min(), 1e-300)
    eta = np.sqrt(8.0 * np.log(max(nr, 2)) / iters)
    logw = np.zeros(nr)
    p_avg = np.zeros(nr)
    q_cnt = np.zeros(nc)
    for _ in range(iters):
        mx = logw.max()
        p = np.exp(logw - mx)
        p /= p.sum()
        p_avg += p
        payoff = p @ A
        b = np.argmax(payoff)
        q_cnt[b] += 1.0
        for j in range(nr):
            logw[j] -= eta * (A[j, b] - A.min()) / span
    p_avg /= iters
    q_cnt /= iters
    return p_avg, q_cnt


def matrix_hash(A: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(A, dtype=float).tobytes()).hexdigest()[:16]


def _mw_iterations(A: np.ndarray, tol: float) -> int:
    # averaged-strategy gap of MW is at most span * sqrt(ln(n) / (2 * iters))
    span = float(A.max() - A.min())
    return int(math.ceil(span * span * math.log(max(A.shape[0], 2)) / (2.0 * tol * tol)))


def _highs(A: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    from scipy.optimize import linprog

    nr, nc = A.shape
    res = linprog(
        np.r_[np.zeros(nr), 1.0],
        A_ub=np.c_[A.T, -np.ones(nc)], b_ub=np.zeros(nc),
        A_eq=np.r_[np.ones(nr), 0.0][None, :], b_eq=[1.0],
        bounds=[(0, None)] * nr + [(None, None)], method="highs",
    )
    if res.status != 0:
        return None
    p = np.maximum(res.x[:nr], 0.0)
    q = np.maximum(-res.ineqlin.marginals, 0.0)
    if p.sum() <= 0 or q.sum() <= 0:
        return None
    return p / p.sum(), q / q.sum()


def solve_zero_sum(A: np.ndarray, tol: float = GAME_TOL, mw_cap: int = 2_000_000) -> GameSolution:
    """min_P max_b (P A)_b with a certified duality gap of at most ``tol``.

    Duplicate rows are merged before solving (they only add degeneracy);
    the returned strategy puts their mass on the first copy.
    """
    A = np.ascontiguousarray(A, dtype=float)
    if A.ndim != 2 or A.size == 0:
        raise SolverError("payoff must be a non-empty matrix")
    if not np.all(np.isfinite(A)):
        raise SolverError(f"non-finite payoff matrix {matrix_hash(A)}")
    first = _unique_rows(A)
    U = A[first] if first.size < A.shape[0] else A

    def lift(pu: np.ndarray) -> np.ndarray:
        p = np.zeros(A.shape[0])
        p[first] = pu
        return p

    pu, q, upper, lower, status = _solve_lp(U, 100 * (U.shape[0] + U.shape[1]) + 100)
    if status == 0 and upper - lower <= tol:
        return GameSolution(lift(pu), q, float(upper), float(upper - lower))
    candidates = []
    hs = _highs(U)
    if hs is not None:
        candidates.append(hs)
    iters = _mw_iterations(U, tol)
    if iters <= mw_cap:
        candidates.append(_mw(U, max(iters, 1)))
    for pu, q in candidates:
        upper = float((pu @ U).max())
        lower = float((U @ q).min())
        if upper - lower <= tol:
            return GameSolution(lift(pu), q, upper, upper - lower)
    raise SolverError(
        f"game solver missed tolerance {tol:g} (gap {upper - lower:.3g}) on matrix {matrix_hash(A)}"
    )


def game_value(A: np.ndarray) -> float:
    return solve_zero_sum(A).value
