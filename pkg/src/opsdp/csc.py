"""Cost-sensitive classification over range-gated benchmark policies.

Three backends answer argmin_pi sum_i c_i 1{pi(x_i) = a_i}:

* ``cells``: exact over the benchmark class. The labelings a benchmark policy
  can produce on a finite state set are constant on the sign cells of a
  hyperplane arrangement, so enumerating one representative per cell
  (breadth-first, one LP per branch) gives a finite candidate set that
  contains an optimum.
* ``bruteforce``: scan of a caller-supplied finite policy list.
* ``tabular``: per-state optimum over all deterministic tables; exact for the
  benchmark class only when features are one-hot (every labeling is reachable).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from opsdp.lp import STRICT_TOL, lp_feasible
from opsdp.mdp import LayeredMdp
from opsdp.policies import GatedBenchmark, LinearArgmax, Policy, Tabular, first_argmax

SIGN_TOL = 1e-12
DEFAULT_CELL_CAP = 1_000_000


class CellCapExceeded(RuntimeError):
    pass


# ---------------------------------------------------------------- cells


@dataclass(frozen=True)
class Cell:
    """One sign configuration: signs[j] = +1 means v_j^T theta >= 0, -1 means v_j^T theta < 0."""

    signs: np.ndarray
    rep: np.ndarray
    margin: float


@dataclass(frozen=True)
class CellSet:
    vectors: np.ndarray
    cells: tuple[Cell, ...]
    lp_calls: int = 0

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def patterns(self) -> set[tuple[int, ...]]:
        return {tuple(int(s) for s in c.signs) for c in self.cells}

    def normals(self, i: int) -> np.ndarray:
        """Halfspace normals of cell i, oriented so each constraint reads n^T theta >= 0 (or > 0)."""
        return self.vectors * self.cells[i].signs[:, None]


def sign_tuple(vectors: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """+1 where v^T theta >= 0 (up to rounding), -1 where v^T theta < 0."""
    vals = np.asarray(vectors, dtype=float) @ np.asarray(theta, dtype=float)
    scale = np.linalg.norm(vectors, axis=1) * max(float(np.linalg.norm(theta)), 1.0)
    return np.where(vals >= -SIGN_TOL * scale, 1, -1)


def goldberg_bound(n: int, k: int) -> float:
    """(8 e N / K)^K, the sign-pattern count bound for N linear functionals in K variables."""
    return (8.0 * math.e * n / k) ** k


def _satisfies(rep: np.ndarray, v: np.ndarray, sign: int) -> bool:
    val = float(v @ rep)
    nv = float(np.linalg.norm(v))
    if sign > 0:
        return val >= -SIGN_TOL * max(nv, 1.0)
    return nv > 0 and val <= -STRICT_TOL * nv


def bfs_sign_regions(
    vectors: np.ndarray,
    base: Sequence[tuple[np.ndarray, bool]] = (),
    cap: int = DEFAULT_CELL_CAP,
    strict_tol: float = STRICT_TOL,
) -> CellSet:
    """Enumerate every feasible sign configuration of v_1..v_N, breadth first.

    Each prior cell is split on {v_i^T theta >= 0} and {v_i^T theta < 0}; a
    branch is kept when the LP finds a point satisfying it, with strict
    constraints needing a positive margin. When the parent's representative
    already satisfies a branch that branch inherits it and no LP is solved.
    ``base`` constraints (normal, strict) restrict the whole space.

    Raises:
        CellCapExceeded: if more than ``cap`` cells are alive at some level.
    """
    v = np.atleast_2d(np.asarray(vectors, dtype=float))
    n, k = v.shape
    base_n = np.array([np.asarray(b[0], float) for b in base]).reshape(-1, k)
    base_s = np.array([bool(b[1]) for b in base], dtype=bool)
    lp_calls = 0
    start = lp_feasible(base_n, base_s, strict_tol)
    lp_calls += 1
    if not start.feasible:
        return CellSet(v, (), lp_calls)

    # (signs so far, rep, margin)
    frontier: list[tuple[list[int], np.ndarray, float]] = [([], start.theta, start.margin)]
    for i in range(n):
        vi = v[i]
        nxt: list[tuple[list[int], np.ndarray, float]] = []
        for signs, rep, margin in frontier:
            for sign in (1, -1):
                new_signs = signs + [sign]
                if _satisfies(rep, vi, sign):
                    new_margin = margin if sign > 0 else min(margin, -float(vi @ rep) / np.linalg.norm(vi))
                    nxt.append((new_signs, rep, new_margin))
                    continue
                if sign < 0 and not np.any(vi):
                    continue
                normals = np.vstack([base_n, v[: i + 1] * np.array(new_signs)[:, None]])
                strict = np.concatenate([base_s, np.array(new_signs) < 0])
                res = lp_feasible(normals, strict, strict_tol)
                lp_calls += 1
                if res.feasible:
                    nxt.append((new_signs, res.theta, res.margin))
        if len(nxt) > cap:
            raise CellCapExceeded(f"{len(nxt)} cells after {i + 1} vectors exceed cap {cap}")
        frontier = nxt
    cells = tuple(Cell(np.array(s, dtype=int), r, m) for s, r, m in frontier)
    return CellSet(v, cells, lp_calls)


# ---------------------------------------------------------------- instances


@dataclass(frozen=True)
class CscInstance:
    """Examples (c_i, x_i, a_i) at layer h; the objective of pi is sum_i c_i 1{pi(x_i) = a_i}."""

    h: int
    costs: np.ndarray
    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "costs", np.asarray(self.costs, dtype=float).ravel())
        object.__setattr__(self, "states", np.asarray(self.states, dtype=int).ravel())
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=int).ravel())
        if not (self.costs.size == self.states.size == self.actions.size):
            raise ValueError("costs, states and actions must have equal length")
        if not np.all(np.isfinite(self.costs)):
            raise ValueError("costs must be finite")

    def __len__(self) -> int:
        return self.costs.size

    def cost_matrix(self, n_states: int, n_actions: int) -> np.ndarray:
        out = np.zeros((n_states, n_actions))
        np.add.at(out, (self.states, self.actions), self.costs)
        return out

    @classmethod
    def from_matrix(cls, h: int, c: np.ndarray) -> CscInstance:
        xs, as_ = np.nonzero(np.ones_like(c, dtype=bool))
        return cls(h, c[xs, as_], xs, as_)


def csc_objective(instance: CscInstance, mdp: LayeredMdp, policy: Policy) -> float:
    """Exactly rounded objective (math.fsum), independent of summation order."""
    acts = policy.actions(mdp, instance.h)
    hit = acts[instance.states] == instance.actions
    return math.fsum(instance.costs[hit].tolist())


def delta_to_csc(
    h: int,
    states_h: np.ndarray,
    actions_h: np.ndarray,
    phi_h: np.ndarray,
    gate_weight: np.ndarray,
    bonus_values: np.ndarray,
    theta: np.ndarray,
    sign: int,
    n_actions: int,
) -> CscInstance:
    """CSC instance whose argmin maximizes sign * Delta(pi~) for one dataset.

    Per trajectory the discrepancy weight is
    A * 1{phi(x_{h-1}, a_{h-1})^T v >= 0} * (b(x_ell) - phi(x_h, a_h)^T theta) / n,
    passed in pieces: ``gate_weight`` holds the 0/1 indicator, ``bonus_values``
    the b(x_ell) values, ``phi_h`` the features phi(x_h, a_h). The CSC oracle
    minimizes, so the returned costs are the negated signed weights.
    """
    n = len(states_h)
    c = n_actions * np.asarray(gate_weight, float) * (np.asarray(bonus_values, float) - phi_h @ theta) / n
    return CscInstance(h, -sign * c, states_h, actions_h)


# ---------------------------------------------------------------- benchmark labelings


def _pair_diffs(y: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """Differences y_{ja} - y_{ja'} over states j and ordered pairs a != a'."""
    m, n_actions, _ = y.shape
    rows, keys = [], []
    for j in range(m):
        for a in range(n_actions):
            for b in range(n_actions):
                if a != b:
                    rows.append(y[j, a] - y[j, b])
                    keys.append((j, a, b))
    return np.array(rows).reshape(-1, y.shape[2]), keys


def _scale_into_ball(theta: np.ndarray, radius: float) -> np.ndarray:
    nrm = float(np.linalg.norm(theta))
    return theta * (radius / nrm) if nrm > radius else theta


@dataclass
class BenchmarkCells:
    """Every labeling the benchmark class can produce on a fixed state set.

    Built from two small arrangements instead of one arrangement in the full
    (g d + 1 + 2d)-dimensional parameter space: the three parameter blocks
    (gate vectors with gamma, first argmax vector, second argmax vector) enter
    disjoint functionals, so the joint cells are products of block cells.
    With gamma > 0 the gate fires where any single gate vector fires, so gate
    sets are unions of at most g single-vector gate sets.
    """

    y: np.ndarray  # (m, A, d) features of the covered states
    radius: float
    g: int
    lin_reps: list[np.ndarray] = field(default_factory=list)
    lin_labels: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), int))
    gate_masks: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), bool))
    gate_reps: list[tuple[np.ndarray, float]] = field(default_factory=list)
    lin_cells: CellSet | None = None
    single_cells: CellSet | None = None
    labelings: np.ndarray | None = None  # (U, m) distinct labelings, when few enough to tabulate
    labeling_keys: list[tuple[int, int, int]] = field(default_factory=list)

    @classmethod
    def build(cls, y: np.ndarray, g: int, radius: float, cap: int = DEFAULT_CELL_CAP) -> BenchmarkCells:
        y = np.asarray(y, dtype=float)
        m, n_actions, d = y.shape
        self = cls(y, radius, g)
        diffs, _ = _pair_diffs(y)
        if diffs.shape[0] == 0:
            diffs = np.zeros((1, d))
        # linear argmax block
        self.lin_cells = bfs_sign_regions(diffs, cap=cap)
        seen: dict[bytes, int] = {}
        labels = []
        for cell in self.lin_cells.cells:
            theta = _scale_into_ball(cell.rep, radius)
            lab = first_argmax(y @ theta)
            key = lab.tobytes()
            if key not in seen:
                seen[key] = len(labels)
                labels.append(lab)
                self.lin_reps.append(theta)
        self.lin_labels = np.array(labels, dtype=int)
        # single gate vector block, variables (theta, gamma) with gamma > 0
        gate_vecs = np.hstack([diffs, -np.ones((diffs.shape[0], 1))])
        gamma_pos = (np.eye(d + 1)[d], True)
        self.single_cells = bfs_sign_regions(gate_vecs, base=[gamma_pos], cap=cap)
        singles: dict[bytes, tuple[np.ndarray, float]] = {}
        for cell in self.single_cells.cells:
            theta, gamma = cell.rep[:d], float(cell.rep[d])
            gamma = max(gamma, STRICT_TOL)  # defensive; gamma > 0 is a base constraint
            probe = GatedBenchmark(theta[None, :] / gamma, 1.0, _ZERO, _ZERO)
            mask = _gate_on(probe, y)
            singles.setdefault(mask.tobytes(), (theta / gamma, 1.0))
        # unions of up to g single sets
        masks = {k: [v] for k, v in singles.items()}
        frontier = dict(masks)
        for _ in range(max(g - 1, 0)):
            grown = {}
            for key, reps in frontier.items():
                base_mask = np.frombuffer(key, dtype=bool)
                for skey, srep in singles.items():
                    union = base_mask | np.frombuffer(skey, dtype=bool)
                    ukey = union.tobytes()
                    if ukey not in masks and ukey not in grown:
                        grown[ukey] = reps + [srep]
            if not grown:
                break
            masks.update(grown)
            frontier = grown
        keys = sorted(masks, key=lambda kk: (np.frombuffer(kk, dtype=bool).sum(), kk))
        self.gate_reps = [self._gate_params(masks[kk]) for kk in keys]
        # masks are recomputed from the final scaled parameters so that the
        # search sees exactly what the returned policy does
        self.gate_masks = np.array(
            [_gate_on(GatedBenchmark(t, gm, _ZERO, _ZERO), y) for t, gm in self.gate_reps]
        ).reshape(len(keys), m)
        self._tabulate()
        return self

    def _tabulate(self, limit: int = 200_000) -> None:
        n_gate, n_lin = len(self.gate_reps), len(self.lin_reps)
        if n_gate * n_lin * n_lin > limit:
            return
        seen: dict[bytes, tuple[int, int, int]] = {}
        for gi, a, b in self.candidates():
            lab = np.where(self.gate_masks[gi], self.lin_labels[a], self.lin_labels[b])
            seen.setdefault(lab.tobytes(), (gi, a, b))
        self.labeling_keys = list(seen.values())
        self.labelings = np.array(
            [np.where(self.gate_masks[g], self.lin_labels[a], self.lin_labels[b]) for g, a, b in self.labeling_keys]
        ).reshape(len(self.labeling_keys), -1)

    def _gate_params(self, reps: list[tuple[np.ndarray, float]]) -> tuple[np.ndarray, float]:
        d = self.y.shape[2]
        thetas = np.zeros((self.g, d))
        for i, (theta, _) in enumerate(reps):
            thetas[i] = theta
        top = float(np.max(np.linalg.norm(thetas, axis=1))) if thetas.size else 0.0
        scale = min(1.0, self.radius / top) if top > 0 else 1.0
        return thetas * scale, scale

    def policy(self, gate_index: int, first: int, second: int) -> GatedBenchmark:
        thetas, gamma = self.gate_reps[gate_index]
        return GatedBenchmark(
            thetas, gamma, LinearArgmax(self.lin_reps[first]), LinearArgmax(self.lin_reps[second])
        )

    def candidates(self) -> Iterable[tuple[int, int, int]]:
        for gi in range(len(self.gate_reps)):
            for i in range(len(self.lin_reps)):
                for j in range(len(self.lin_reps)):
                    yield gi, i, j

    def n_labelings(self) -> int:
        """Distinct benchmark labelings of the covered states."""
        labs = set()
        for mask in self.gate_masks:
            for a in self.lin_labels:
                for b in self.lin_labels:
                    labs.add(np.where(mask, a, b).tobytes())
        return len(labs)

    def best(self, c: np.ndarray) -> list[tuple[float, int, int, int]]:
        """Candidates (value, gate, first, second) that may attain the exact minimum of c[j, pi(j)].

        Values are plain float sums. Anything within the float rounding
        bound of the best value is kept, one entry per distinct labeling.
        """
        m = self.y.shape[0]
        per = c[np.arange(m)[None, :], self.lin_labels]  # (L, m)
        gm = self.gate_masks.astype(float).T  # (m, G)
        on = per @ gm  # (L, G)
        off = per @ (1.0 - gm)
        slack = 8.0 * (m + 2) * np.finfo(float).eps * float(np.abs(c).sum()) + 1e-300
        if self.labelings is not None:
            vals = c[np.arange(m)[None, :], self.labelings].sum(axis=1)
            keep = np.flatnonzero(vals <= vals.min() + 2 * slack)
            return [(float(vals[u]), *self.labeling_keys[u]) for u in keep]
        i_on, i_off = np.argmin(on, axis=0), np.argmin(off, axis=0)
        cols = np.arange(gm.shape[1])
        totals = on[i_on, cols] + off[i_off, cols]
        best = totals.min()
        out: dict[bytes, tuple[float, int, int, int]] = {}
        for gi in np.flatnonzero(totals <= best + 2 * slack):
            mask = self.gate_masks[gi]
            fi = np.flatnonzero(on[:, gi] <= on[i_on[gi], gi] + 2 * slack)
            si = np.flatnonzero(off[:, gi] <= off[i_off[gi], gi] + 2 * slack)
            # labelings only differ through the states on each side of the gate
            _, fi_u = np.unique(self.lin_labels[fi][:, mask], axis=0, return_index=True)
            _, si_u = np.unique(self.lin_labels[si][:, ~mask], axis=0, return_index=True)
            for a in fi[np.sort(fi_u)]:
                for b in si[np.sort(si_u)]:
                    lab = np.where(mask, self.lin_labels[a], self.lin_labels[b])
                    out.setdefault(lab.tobytes(), (float(on[a, gi] + off[b, gi]), int(gi), int(a), int(b)))
        return list(out.values())


_ZERO = LinearArgmax(np.zeros(1))


def _gate_on(probe: GatedBenchmark, y: np.ndarray) -> np.ndarray:
    s = y @ probe.thetas.T
    spread = (s.max(axis=1) - s.min(axis=1)).max(axis=1)
    return spread >= probe.gamma - 1e-12 * (1.0 + probe.gamma)


def joint_cells(y: np.ndarray, g: int, cap: int = DEFAULT_CELL_CAP) -> tuple[CellSet, int]:
    """Cells of the full arrangement over (theta_1..theta_g, gamma, theta~_1, theta~_2).

    Only usable for tiny instances; kept as an independent cross-check of the
    block decomposition. Returns the cells and the variable count.
    """
    y = np.asarray(y, dtype=float)
    d = y.shape[2]
    diffs, _ = _pair_diffs(y)
    k = g * d + 1 + 2 * d
    rows = []
    for i in range(g):
        for dv in diffs:
            r = np.zeros(k)
            r[i * d : (i + 1) * d] = dv
            r[g * d] = -1.0
            rows.append(r)
    for block in (0, 1):
        off = g * d + 1 + block * d
        for dv in diffs:
            r = np.zeros(k)
            r[off : off + d] = dv
            rows.append(r)
    gamma_pos = (np.eye(k)[g * d], True)
    return bfs_sign_regions(np.array(rows), base=[gamma_pos], cap=cap), k


def joint_policy(rep: np.ndarray, g: int, d: int, radius: float) -> GatedBenchmark:
    thetas = rep[: g * d].reshape(g, d)
    gamma = max(float(rep[g * d]), STRICT_TOL)
    t1 = rep[g * d + 1 : g * d + 1 + d]
    t2 = rep[g * d + 1 + d :]
    top = float(np.max(np.linalg.norm(thetas, axis=1)))
    scale = min(1.0, radius / top) if top > 0 else 1.0
    return GatedBenchmark(
        thetas * scale,
        gamma * scale,
        LinearArgmax(_scale_into_ball(t1, radius)),
        LinearArgmax(_scale_into_ball(t2, radius)),
    )


# ---------------------------------------------------------------- oracle


@dataclass
class CscResult:
    policy: Policy
    objective: float


class CscOracle:
    """Cost-sensitive classification oracle with per-layer caching of the cell structure.

    Args:
        mdp: supplies the features of each layer.
        backend: ``cells`` | ``tabular`` | ``bruteforce``.
        g: number of gate vectors in the benchmark class (defaults to d).
        candidates: policy list scanned by the ``bruteforce`` backend.
    """

    def __init__(
        self,
        mdp: LayeredMdp,
        backend: str = "cells",
        g: int | None = None,
        candidates: Sequence[Policy] = (),
        cap: int = DEFAULT_CELL_CAP,
    ) -> None:
        if backend not in ("cells", "tabular", "bruteforce"):
            raise ValueError(f"unknown CSC backend {backend!r}")
        self.mdp = mdp
        self.backend = backend
        self.g = mdp.feature_dim if g is None else g
        self.candidates = list(candidates)
        self.cap = cap
        self.calls = 0
        self._layers: dict[tuple[int, tuple[int, ...]], BenchmarkCells] = {}

    def layer_cells(self, h: int, states: Sequence[int] | None = None) -> BenchmarkCells:
        states = tuple(range(self.mdp.layer_sizes[h - 1])) if states is None else tuple(states)
        key = (h, states)
        if key not in self._layers:
            y = self.mdp.features[h - 1][list(states)]
            self._layers[key] = BenchmarkCells.build(y, self.g, float(self.mdp.horizon), self.cap)
        return self._layers[key]

    def solve_matrix(self, h: int, c: np.ndarray) -> CscResult:
        """argmin over the class of sum_x c[x, pi(x)] for a full-layer cost matrix."""
        return self.solve(CscInstance.from_matrix(h, np.asarray(c, float)))

    def solve(self, instance: CscInstance) -> CscResult:
        if len(instance) == 0:
            raise ValueError("empty CSC instance")
        self.calls += 1
        mdp, h = self.mdp, instance.h
        if self.backend == "bruteforce":
            if not self.candidates:
                raise ValueError("bruteforce backend needs a candidate list")
            vals = [csc_objective(instance, mdp, p) for p in self.candidates]
            i = int(np.argmin(vals))
            return CscResult(self.candidates[i], vals[i])
        n_states = mdp.layer_sizes[h - 1]
        c = instance.cost_matrix(n_states, mdp.n_actions)
        if self.backend == "tabular":
            acts = first_argmax(-c)
            table = [np.zeros(n, dtype=int) for n in mdp.layer_sizes]
            table[h - 1] = acts
            pol = Tabular(tuple(table))
            return CscResult(pol, csc_objective(instance, mdp, pol))
        states = np.unique(instance.states)
        cells = self.layer_cells(h, states if states.size < n_states else None)
        sub = c[states] if states.size < n_states else c
        # the shortlist is rescored exactly from the cached labelings; they
        # coincide with the actions of the policies built from the same parameters
        pos = np.searchsorted(states, instance.states) if states.size < n_states else instance.states
        best: tuple[float, tuple[int, int, int]] | None = None
        for _, gi, a, b in cells.best(sub):
            lab = np.where(cells.gate_masks[gi], cells.lin_labels[a], cells.lin_labels[b])
            val = math.fsum(instance.costs[lab[pos] == instance.actions].tolist())
            if best is None or val < best[0]:
                best = (val, (gi, a, b))
        assert best is not None
        return CscResult(cells.policy(*best[1]), best[0])


def csc_argmin(
    instance: CscInstance,
    mdp: LayeredMdp,
    backend: str = "cells",
    g: int | None = None,
    candidates: Sequence[Policy] = (),
) -> CscResult:
    return CscOracle(mdp, backend, g, candidates).solve(instance)


def exhaustive_minimum(instance: CscInstance, mdp: LayeredMdp, g: int | None = None) -> float:
    """Minimum objective over every cell-representative policy (no shortcuts)."""
    oracle = CscOracle(mdp, "cells", g)
    states = np.unique(instance.states)
    n_states = mdp.layer_sizes[instance.h - 1]
    cells = oracle.layer_cells(instance.h, states if states.size < n_states else None)
    return min(csc_objective(instance, mdp, cells.policy(*t)) for t in cells.candidates())


def growth_bound(n: int, d: int, n_actions: int) -> float:
    """(81 n A^2 / d)^{(d+1)^2}; may be +inf for large arguments."""
    try:
        return (81.0 * n * n_actions**2 / d) ** ((d + 1) ** 2)
    except OverflowError:
        return float("inf")


def log_growth_bound(n: int, d: int, n_actions: int) -> float:
    return (d + 1) ** 2 * math.log(81.0 * n * n_actions**2 / d)
