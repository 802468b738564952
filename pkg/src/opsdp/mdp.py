"""Layered tabular MDPs, trajectory sampling and exact dynamic-programming oracles.

Layers are numbered 1..H in every public signature. Arrays are stored per
layer in tuples, so layer ``h`` lives at index ``h - 1``. States are dense
integer ids within their layer, which makes layers disjoint by construction.
Transitions out of layer H go to the fictitious terminal state, so only H-1
transition tensors are stored.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from opsdp.policies import Policy, Tabular, first_argmax

ROW_SUM_TOL = 1e-12
FEATURE_NORM_TOL = 1e-12
DEFAULT_PATH_CAP = 10**7


class PathCapExceeded(RuntimeError):
    """Raised when exact enumeration would visit more prefixes than allowed."""


@dataclass(frozen=True, eq=False)
class LayeredMdp:
    """Finite-horizon layered MDP with per-pair feature vectors.

    Attributes:
        transitions: H-1 arrays of shape (n_h, A, n_{h+1}).
        rewards: H arrays of shape (n_h, A) with entries in [0, 1].
        features: H arrays of shape (n_h, A, d) with row norms <= 1.
        init_dist: probability vector over the states of layer 1.
    """

    transitions: tuple[np.ndarray, ...]
    rewards: tuple[np.ndarray, ...]
    features: tuple[np.ndarray, ...]
    init_dist: np.ndarray
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "transitions", tuple(np.asarray(p, float) for p in self.transitions))
        object.__setattr__(self, "rewards", tuple(np.asarray(r, float) for r in self.rewards))
        object.__setattr__(self, "features", tuple(np.asarray(f, float) for f in self.features))
        object.__setattr__(self, "init_dist", np.asarray(self.init_dist, float).ravel())
        for arr in (*self.transitions, *self.rewards, *self.features, self.init_dist):
            arr.setflags(write=False)
        self.validate()

    @property
    def horizon(self) -> int:
        return len(self.rewards)

    @property
    def n_actions(self) -> int:
        return self.rewards[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features[0].shape[2]

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple(r.shape[0] for r in self.rewards)

    def validate(self) -> None:
        H = self.horizon
        if H < 1:
            raise ValueError("horizon must be positive")
        if len(self.features) != H or len(self.transitions) != H - 1:
            raise ValueError("need H reward/feature arrays and H-1 transition arrays")
        A, d = self.n_actions, self.feature_dim
        sizes = self.layer_sizes
        if self.init_dist.shape != (sizes[0],):
            raise ValueError(f"init_dist must have {sizes[0]} entries")
        _check_distribution(self.init_dist, "init_dist")
        for h in range(H):
            r, f = self.rewards[h], self.features[h]
            if r.shape != (sizes[h], A):
                raise ValueError(f"layer {h + 1}: rewards shape {r.shape} != {(sizes[h], A)}")
            if f.shape != (sizes[h], A, d):
                raise ValueError(f"layer {h + 1}: features shape {f.shape} != {(sizes[h], A, d)}")
            if np.any(r < 0) or np.any(r > 1):
                raise ValueError(f"layer {h + 1}: rewards must lie in [0, 1]")
            if np.any(np.linalg.norm(f, axis=-1) > 1 + FEATURE_NORM_TOL):
                raise ValueError(f"layer {h + 1}: feature vectors must have norm <= 1")
        for h, p in enumerate(self.transitions):
            if p.shape != (sizes[h], A, sizes[h + 1]):
                raise ValueError(
                    f"layer {h + 1}: transitions shape {p.shape} != {(sizes[h], A, sizes[h + 1])}"
                )
            _check_distribution(p, f"layer {h + 1} transitions")

    def __repr__(self) -> str:
        return (
            f"LayeredMdp(name={self.name!r}, H={self.horizon}, A={self.n_actions}, "
            f"d={self.feature_dim}, layers={self.layer_sizes})"
        )


def _check_distribution(p: np.ndarray, what: str) -> None:
    if np.any(p < 0):
        raise ValueError(f"{what}: negative probability")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > ROW_SUM_TOL):
        raise ValueError(f"{what}: rows must sum to 1 within {ROW_SUM_TOL}")


@dataclass(frozen=True)
class Trajectory:
    """One episode; ``states[h-1]``, ``actions[h-1]``, ``rewards[h-1]`` belong to layer h."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())


@dataclass(frozen=True)
class TrajectoryBatch:
    """Stacked episodes covering layers ``first_layer .. first_layer + depth - 1``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    first_layer: int = 1

    def __len__(self) -> int:
        return self.states.shape[0]

    def col(self, h: int) -> int:
        return h - self.first_layer

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.actions[i], self.rewards[i])


@dataclass(frozen=True)
class QTable:
    """Exact Q/V tables of one policy plus per-layer least-squares parameters."""

    q: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    theta: tuple[np.ndarray, ...]
    layer_residuals: tuple[float, ...]

    @property
    def residual(self) -> float:
        return max(self.layer_residuals)

    def realizable(self, tol: float = 1e-8) -> bool:
        return self.residual <= tol


def policy_tables(mdp: LayeredMdp, policy: Policy, layers: Sequence[int] | None = None) -> list[np.ndarray]:
    """Validated (n_h, A) action-probability tables for the requested layers."""
    out = []
    for h in layers if layers is not None else range(1, mdp.horizon + 1):
        table = np.asarray(policy.probs(mdp, h), dtype=float)
        if table.shape != (mdp.layer_sizes[h - 1], mdp.n_actions):
            raise ValueError(f"policy returned a table of shape {table.shape} at layer {h}")
        if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError(f"policy produced an invalid action distribution at layer {h}")
        out.append(table)
    return out


def _draw(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row; cdf has shape (m, k)."""
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def sample_batch(
    mdp: LayeredMdp,
    policy: Policy,
    n: int,
    rng: np.random.Generator,
    depth: int | None = None,
    tables: Sequence[np.ndarray] | None = None,
) -> TrajectoryBatch:
    """Draw n independent episodes truncated to the first ``depth`` layers."""
    depth = mdp.horizon if depth is None else depth
    tables = tables if tables is not None else policy_tables(mdp, policy, range(1, depth + 1))
    states = np.empty((n, depth), dtype=np.int64)
    actions = np.empty((n, depth), dtype=np.int64)
    rewards = np.empty((n, depth))
    s = _draw(np.cumsum(mdp.init_dist)[None, :].repeat(n, axis=0), rng.random(n))
    for k in range(depth):
        a = _draw(np.cumsum(tables[k], axis=1)[s], rng.random(n))
        states[:, k], actions[:, k] = s, a
        rewards[:, k] = mdp.rewards[k][s, a]
        if k + 1 < depth:
            s = _draw(np.cumsum(mdp.transitions[k][s, a], axis=1), rng.random(n))
    return TrajectoryBatch(states, actions, rewards)


def sample_trajectory(mdp: LayeredMdp, policy: Policy, rng: np.random.Generator) -> Trajectory:
    """Draw one episode. Deterministic given the state of ``rng``."""
    return sample_batch(mdp, policy, 1, rng)[0]


def q_values_dp(mdp: LayeredMdp, policy: Policy, fit: bool = True) -> QTable:
    """Backward DP for Q^pi and V^pi, with a least-squares fit of Q_h on the features."""
    tables = policy_tables(mdp, policy)
    H = mdp.horizon
    q: list[np.ndarray] = [None] * H  # type: ignore[list-item]
    v: list[np.ndarray] = [None] * H  # type: ignore[list-item]
    nxt = None
    for h in range(H - 1, -1, -1):
        qh = mdp.rewards[h].copy()
        if nxt is not None:
            qh += mdp.transitions[h] @ nxt
        q[h] = qh
        v[h] = (tables[h] * qh).sum(axis=1)
        nxt = v[h]
    thetas, residuals = [], []
    for h in range(H):
        if fit:
            theta, res = fit_linear(mdp.features[h], q[h])
        else:
            theta, res = np.zeros(mdp.feature_dim), float("nan")
        thetas.append(theta)
        residuals.append(res)
    return QTable(tuple(q), tuple(v), tuple(thetas), tuple(residuals))


def fit_linear(phi: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-norm least squares of target[x, a] on phi[x, a, :]; returns (theta, max abs residual)."""
    x = phi.reshape(-1, phi.shape[-1])
    y = np.asarray(target, dtype=float).reshape(x.shape[0], *np.shape(target)[2:])
    theta = np.linalg.lstsq(x, y, rcond=None)[0]
    res = float(np.max(np.abs(x @ theta - y))) if y.size else 0.0
    return theta, res


def policy_value(mdp: LayeredMdp, policy: Policy) -> float:
    """J(pi) = sum_x rho(x) V^pi_1(x)."""
    return float(mdp.init_dist @ q_values_dp(mdp, policy, fit=False).v[0])


def optimal_policy(mdp: LayeredMdp) -> tuple[Tabular, float]:
    """Deterministic optimal policy by backward value iteration, smallest index on ties."""
    H = mdp.horizon
    acts: list[np.ndarray] = [None] * H  # type: ignore[list-item]
    nxt = None
    for h in range(H - 1, -1, -1):
        qh = mdp.rewards[h].copy()
        if nxt is not None:
            qh += mdp.transitions[h] @ nxt
        acts[h] = first_argmax(qh)
        nxt = qh[np.arange(qh.shape[0]), acts[h]]
    return Tabular(tuple(acts)), float(mdp.init_dist @ nxt)


def exact_occupancy(
    mdp: LayeredMdp,
    policy: Policy,
    depth: int | None = None,
    start: tuple[int, np.ndarray] | None = None,
    tables: Sequence[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Forward DP for state-action occupancies d_h(x, a) on layers up to ``depth``.

    ``start=(h0, dist)`` starts from the given state distribution at layer h0
    instead of the initial distribution; layers before h0 are returned as None.
    """
    depth = mdp.horizon if depth is None else depth
    h0, dist = (1, mdp.init_dist) if start is None else (start[0], np.asarray(start[1], float))
    tables = tables if tables is not None else policy_tables(mdp, policy, range(1, depth + 1))
    out: list[np.ndarray] = [None] * depth  # type: ignore[list-item]
    for h in range(h0, depth + 1):
        occ = dist[:, None] * tables[h - 1]
        out[h - 1] = occ
        if h < depth:
            dist = np.einsum("xa,xay->y", occ, mdp.transitions[h - 1])
    return out


def conditional_expectation(
    mdp: LayeredMdp,
    policy: Policy,
    h: int,
    ell: int,
    g: np.ndarray,
    tables: Sequence[np.ndarray] | None = None,
) -> np.ndarray:
    """E^pi[g(x_ell) | x_h = x, a_h = a] for every (x, a) of layer h, with ell >= h.

    ``g`` is indexed by the states of layer ``ell``. Extra trailing axes of g
    are carried through, so vector- and matrix-valued functions work too.
    """
    g = np.asarray(g, dtype=float)
    if ell < h:
        raise ValueError("target layer must not precede the conditioning layer")
    if ell == h:
        return np.repeat(g[:, None, ...], mdp.n_actions, axis=1)
    tables = tables if tables is not None else policy_tables(mdp, policy)
    val = g
    for k in range(ell - 1, h - 1, -1):
        m = np.tensordot(mdp.transitions[k - 1], val, axes=([2], [0]))
        if k == h:
            return m
        val = np.einsum("xa,xa...->x...", tables[k - 1], m)
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class PrefixBatch:
    """All positive-probability prefixes from ``first_layer`` to ``last_layer``.

    Column ``h - first_layer`` of ``states``/``actions``/``rewards`` holds layer h.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    probs: np.ndarray
    first_layer: int

    @property
    def last_layer(self) -> int:
        return self.first_layer + self.states.shape[1] - 1

    def state(self, h: int) -> np.ndarray:
        return self.states[:, h - self.first_layer]

    def action(self, h: int) -> np.ndarray:
        return self.actions[:, h - self.first_layer]

    def reward(self, h: int) -> np.ndarray:
        return self.rewards[:, h - self.first_layer]


def enumerate_prefixes(
    mdp: LayeredMdp,
    policy: Policy,
    depth: int | None = None,
    start: tuple[int, int, int] | None = None,
    path_cap: int = DEFAULT_PATH_CAP,
) -> PrefixBatch:
    """Enumerate every positive-probability (state, action, reward) prefix.

    ``start=(h, x, a)`` conditions on x_h = x and a_h = a; the prefix then
    covers layers h..depth.

    Raises:
        PathCapExceeded: if more than ``path_cap`` prefixes would be kept.
    """
    depth = mdp.horizon if depth is None else depth
    tables = policy_tables(mdp, policy, range(1, depth + 1))
    if start is None:
        h0 = 1
        xs = np.flatnonzero(mdp.init_dist > 0)
        pr = mdp.init_dist[xs]
        states = xs[:, None]
        actions = np.empty((xs.size, 0), dtype=np.int64)
        probs = pr
    else:
        h0, x0, a0 = start
        states = np.array([[x0]])
        actions = np.empty((1, 0), dtype=np.int64)
        probs = np.ones(1)
    h = h0
    while True:
        # choose actions at layer h
        cur = states[:, -1]
        if start is not None and h == h0:
            a = np.full(cur.size, start[2])
            rows = np.arange(cur.size)
            pa = np.ones(cur.size)
        else:
            tab = tables[h - 1][cur]
            rows, a = np.nonzero(tab > 0)
            pa = tab[rows, a]
        states, actions = states[rows], np.column_stack([actions[rows], a])
        probs = probs[rows] * pa
        if probs.size > path_cap:
            raise PathCapExceeded(f"{probs.size} prefixes at layer {h} exceed cap {path_cap}")
        if h == depth:
            break
        p = mdp.transitions[h - 1][states[:, -1], actions[:, -1]]
        rows, y = np.nonzero(p > 0)
        if rows.size > path_cap:
            raise PathCapExceeded(f"{rows.size} prefixes at layer {h + 1} exceed cap {path_cap}")
        probs = probs[rows] * p[rows, y]
        states = np.column_stack([states[rows], y])
        actions = actions[rows]
        h += 1
    cols = np.arange(states.shape[1])
    rewards = np.stack(
        [mdp.rewards[h0 - 1 + c][states[:, c], actions[:, c]] for c in cols], axis=1
    )
    return PrefixBatch(states, actions, rewards, probs, h0)


def exact_functional_expectation(
    mdp: LayeredMdp,
    policy: Policy,
    f: Callable[[PrefixBatch], np.ndarray],
    depth: int | None = None,
    start: tuple[int, int, int] | None = None,
    path_cap: int = DEFAULT_PATH_CAP,
) -> np.ndarray | float:
    """E^pi[f(prefix)] by exhaustive prefix enumeration, no sampling.

    ``f`` maps a PrefixBatch to one value per prefix (trailing axes allowed).
    """
    batch = enumerate_prefixes(mdp, policy, depth, start, path_cap)
    vals = np.asarray(f(batch), dtype=float)
    out = np.tensordot(batch.probs, vals, axes=([0], [0]))
    return float(out) if np.ndim(out) == 0 else out
