"""Feasibility of homogeneous strict/non-strict linear constraint systems.

The question "is there theta with v_i^T theta > 0 for strict i and
v_i^T theta >= 0 for the rest" is answered with the LP

    max s  s.t.  v_i^T theta >= s (strict),  v_i^T theta >= 0 (non-strict),
                 ||theta||_inf <= 1,  s <= 1,

solved by a small dense tableau simplex. Writing theta = p - q with
0 <= p, q <= 1 puts every constraint in the form A x <= b with b >= 0, so the
slack basis (theta = 0, s = 0) is feasible from the start and no phase 1 is
needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRICT_TOL = 1e-9
PIVOT_TOL = 1e-12


class LpSolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class LpResult:
    feasible: bool
    theta: np.ndarray
    margin: float  # optimal s (min strict slack on unit-normalized constraints)
    pivots: int


def _simplex_max(c: np.ndarray, a: np.ndarray, b: np.ndarray, max_pivots: int = 5000) -> tuple[np.ndarray, float, int]:
    """max c^T x s.t. A x <= b, x >= 0, with b >= 0 (slack basis is feasible)."""
    m, n = a.shape
    tab = np.zeros((m + 1, n + m + 1))
    tab[:m, :n] = a
    tab[:m, n : n + m] = np.eye(m)
    tab[:m, -1] = b
    tab[m, :n] = -c
    basis = np.arange(n, n + m)
    degenerate = 0
    for pivots in range(max_pivots):
        red = tab[m, :-1]
        if degenerate > 50:
            cand = np.flatnonzero(red < -PIVOT_TOL)  # Bland's rule to escape cycling
            if cand.size == 0:
                break
            j = int(cand[0])
        else:
            j = int(np.argmin(red))
            if red[j] >= -PIVOT_TOL:
                break
        col = tab[:m, j]
        pos = col > PIVOT_TOL
        if not pos.any():
            raise LpSolverError("unbounded direction in a bounded LP")
        ratios = np.full(m, np.inf)
        ratios[pos] = tab[:m, -1][pos] / col[pos]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + PIVOT_TOL)
        i = int(ties[np.argmin(basis[ties])])
        degenerate = degenerate + 1 if best <= PIVOT_TOL else 0
        tab[i] /= tab[i, j]
        others = np.arange(m + 1) != i
        tab[others] -= np.outer(tab[others, j], tab[i])
        basis[i] = j
    else:
        raise LpSolverError(f"simplex did not terminate in {max_pivots} pivots")
    x = np.zeros(n + m)
    x[basis] = tab[:m, -1]
    return x[:n], float(tab[m, -1]), pivots


def lp_feasible(
    normals: np.ndarray,
    strict: np.ndarray,
    strict_tol: float = STRICT_TOL,
) -> LpResult:
    """Decide feasibility of {v_i^T theta > 0 (strict_i), v_i^T theta >= 0 (otherwise)}.

    Normals are scaled to unit length first (zero rows are kept as-is, which
    makes a strict zero row infeasible). Feasible iff the optimal margin
    exceeds ``strict_tol`` when a strict constraint is present; a system of
    non-strict constraints only is always feasible (theta = 0), and then the
    LP spreads its margin over all rows to return an interior point if one exists.
    """
    v = np.atleast_2d(np.asarray(normals, dtype=float))
    strict = np.asarray(strict, dtype=bool).ravel()
    m, k = v.shape
    if strict.size != m:
        raise ValueError("one strictness flag per constraint is required")
    norms = np.linalg.norm(v, axis=1)
    vn = v / np.where(norms > 0, norms, 1.0)[:, None]
    any_strict = bool(strict.any())
    if m == 0:
        return LpResult(True, np.zeros(k), np.inf, 0)
    with_s = strict if any_strict else np.ones(m, dtype=bool)
    # variables: p (k), q (k), s (1)
    a = np.zeros((m + 2 * k + 1, 2 * k + 1))
    a[:m, :k] = -vn
    a[:m, k : 2 * k] = vn
    a[:m, 2 * k] = with_s.astype(float)
    a[m : m + 2 * k, : 2 * k] = np.eye(2 * k)
    a[m + 2 * k, 2 * k] = 1.0
    b = np.zeros(m + 2 * k + 1)
    b[m:] = 1.0
    c = np.zeros(2 * k + 1)
    c[2 * k] = 1.0
    x, s, pivots = _simplex_max(c, a, b)
    theta = x[:k] - x[k : 2 * k]
    if any_strict:
        feasible = s > strict_tol
        margin = float(np.min(vn[strict] @ theta))
    else:
        feasible = True
        margin = float(np.min(vn @ theta)) if m else np.inf
    return LpResult(bool(feasible), theta, margin, pivots)
