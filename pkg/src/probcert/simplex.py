"""Dense two-phase tableau simplex for small linear programs.

Solves  min c.x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  x >= 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LpInfeasible, LpUnbounded, SolverStall

PIVOT_TOL = 1e-10
FEAS_TOL = 1e-8


@dataclass(frozen=True)
class LpResult:
    x: np.ndarray
    fun: float
    duals: np.ndarray  # one multiplier per constraint row, ub rows first (<= 0 for binding ub rows)
    iterations: int
    max_violation: float


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    colv = T[:, col].copy()
    colv[row] = 0.0
    T -= np.outer(colv, T[row])


def _run(T: np.ndarray, basis: np.ndarray, allowed: np.ndarray, max_iter: int, it0: int) -> int:
    """Iterate on tableau T (last row = reduced costs, last column = rhs) to optimality."""
    it = it0
    degenerate = 0
    while True:
        rc = T[-1, :-1]
        cand = np.flatnonzero((rc < -PIVOT_TOL) & allowed)
        if cand.size == 0:
            return it
        if it >= max_iter:
            raise SolverStall(f"simplex hit the iteration limit {max_iter}", iterations=it)
        # Dantzig pricing, falling back to Bland's rule after a run of degenerate pivots
        col = int(cand[0]) if degenerate > 50 else int(cand[np.argmin(rc[cand])])
        colv = T[:-1, col]
        pos = colv > PIVOT_TOL
        if not pos.any():
            raise LpUnbounded(f"objective unbounded along column {col}")
        ratios = np.full(colv.shape, np.inf)
        ratios[pos] = T[:-1, -1][pos] / colv[pos]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + 1e-12 * max(1.0, abs(best)))
        row = int(ties[np.argmin(basis[ties])]) if degenerate > 50 else int(ties[np.argmax(colv[ties])])
        degenerate = degenerate + 1 if best <= PIVOT_TOL else 0
        _pivot(T, row, col)
        basis[row] = col
        it += 1


def solve_lp(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, max_iter: int = 50_000) -> LpResult:
    c = np.asarray(c, dtype=float)
    n = c.shape[0]
    A_ub = np.zeros((0, n)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, dtype=float))
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float).ravel()
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq

    # standard form: [A | slacks] with slack columns for ub rows; flip rows with negative rhs
    A = np.zeros((m, n + m_ub))
    A[:m_ub, :n] = A_ub
    A[:m_ub, n:] = np.eye(m_ub)
    A[m_ub:, :n] = A_eq
    b = np.concatenate([b_ub, b_eq])
    sign = np.where(b < 0, -1.0, 1.0)
    A *= sign[:, None]
    b = b * sign
    n_std = A.shape[1]

    # rows whose slack can start in the basis need no artificial
    basis = np.full(m, -1)
    for i in range(m_ub):
        if sign[i] > 0:
            basis[i] = n + i
    art_rows = np.flatnonzero(basis < 0)
    n_art = art_rows.size
    T = np.zeros((m + 1, n_std + n_art + 1))
    T[:m, :n_std] = A
    T[:m, -1] = b
    for k, r in enumerate(art_rows):
        T[r, n_std + k] = 1.0
        basis[r] = n_std + k

    it = 0
    rows = np.arange(m)
    if n_art:
        T[-1, n_std:n_std + n_art] = 1.0
        for r in art_rows:
            T[-1] -= T[r]
        allowed = np.ones(n_std + n_art, dtype=bool)
        it = _run(T, basis, allowed, max_iter, it)
        if T[-1, -1] < -FEAS_TOL * max(1.0, np.abs(b).max(initial=0.0)):
            raise LpInfeasible(f"phase 1 ended with infeasibility {-T[-1, -1]:.3g}")
        # drive remaining artificials out of the basis
        for r in np.flatnonzero(basis >= n_std):
            nz = np.flatnonzero(np.abs(T[r, :n_std]) > PIVOT_TOL)
            if nz.size:
                _pivot(T, r, int(nz[0]))
                basis[r] = int(nz[0])
        T = np.delete(T, np.s_[n_std:n_std + n_art], axis=1)
        keep = basis < n_std
        T = np.vstack([T[:-1][keep], T[-1:]])
        basis = basis[keep]
        rows = rows[keep]

    T[-1] = 0.0
    T[-1, :n_std] = np.concatenate([c, np.zeros(m_ub)])
    for r, j in enumerate(basis):
        if T[-1, j] != 0.0:
            T[-1] -= T[-1, j] * T[r]
    it = _run(T, basis, np.ones(n_std, dtype=bool), max_iter, it)

    x_std = np.zeros(n_std)
    x_std[basis] = T[:-1, -1]
    x = np.maximum(x_std[:n], 0.0)
    c_std = np.concatenate([c, np.zeros(m_ub)])
    # simplex multipliers from the final basis: B^T y = c_B
    y = np.zeros(m)
    y_sub, *_ = np.linalg.lstsq(A[rows][:, basis].T, c_std[basis], rcond=None)
    y[rows] = y_sub
    duals = y * sign
    viol = 0.0
    if m_ub:
        viol = max(viol, float(np.max(A_ub @ x - b_ub, initial=0.0)))
    if m_eq:
        viol = max(viol, float(np.max(np.abs(A_eq @ x - b_eq), initial=0.0)))
    return LpResult(x=x, fun=float(c @ x), duals=duals, iterations=it, max_violation=viol)
