"""Brute-force parameter sets, approximate G-optimal designs, range functions.

This is the verification substrate: everything here enumerates all
deterministic policies, so it is only meant for desk-scale MDPs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from opsdp.mdp import LayeredMdp
from opsdp.policies import dtilde

DEFAULT_POLICY_CAP = 200_000
DEDUPE_TOL = 1e-9
REALIZABLE_TOL = 1e-8
RANGE_FLOOR = 1e-12


class PolicyCapExceeded(RuntimeError):
    pass


class DesignNotConverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ThetaSet:
    """Least-squares parameters of Q^pi_h for every deterministic policy (deduplicated).

    ``policies[i]`` holds the action tables (layers h+1..H) of the first
    policy that produced ``thetas[i]``.
    """

    h: int
    thetas: np.ndarray
    residual: float
    tol: float
    policies: tuple[tuple[np.ndarray, ...], ...]
    n_enumerated: int

    @property
    def realizable(self) -> bool:
        return self.residual <= self.tol

    def __len__(self) -> int:
        return self.thetas.shape[0]


def count_policies(mdp: LayeredMdp, first_layer: int) -> int:
    return int(np.prod([mdp.n_actions ** n for n in mdp.layer_sizes[first_layer - 1 :]], dtype=object))


def _iter_tables(mdp: LayeredMdp, first_layer: int):
    per_layer = [
        list(itertools.product(range(mdp.n_actions), repeat=n))
        for n in mdp.layer_sizes[first_layer - 1 :]
    ]
    for combo in itertools.product(*per_layer):
        yield tuple(np.array(c, dtype=int) for c in combo)


def enumerate_theta(
    mdp: LayeredMdp,
    h: int,
    cap: int = DEFAULT_POLICY_CAP,
    tol: float = REALIZABLE_TOL,
) -> ThetaSet:
    """Fit theta^pi_h for all deterministic policies on layers h+1..H.

    Q^pi_h only depends on the policy after layer h, so those layers are the
    only ones enumerated.
    """
    H = mdp.horizon
    n_pol = count_policies(mdp, h + 1) if h < H else 1
    if n_pol > cap:
        raise PolicyCapExceeded(f"{n_pol} deterministic policies exceed cap {cap}")
    phi = mdp.features[h - 1]
    x = phi.reshape(-1, phi.shape[-1])
    pinv = np.linalg.pinv(x)
    thetas: list[np.ndarray] = []
    owners: list[tuple[np.ndarray, ...]] = []
    worst = 0.0
    tables = _iter_tables(mdp, h + 1) if h < H else iter([()])
    for acts in tables:
        v = None
        for k in range(H, h, -1):
            q = mdp.rewards[k - 1].copy()
            if v is not None:
                q += mdp.transitions[k - 1] @ v
            v = q[np.arange(q.shape[0]), acts[k - h - 1]]
        qh = mdp.rewards[h - 1].copy()
        if v is not None:
            qh += mdp.transitions[h - 1] @ v
        y = qh.ravel()
        theta = pinv @ y
        worst = max(worst, float(np.max(np.abs(x @ theta - y))))
        if not any(np.max(np.abs(theta - t)) <= DEDUPE_TOL for t in thetas):
            thetas.append(theta)
            owners.append(acts)
    return ThetaSet(h, np.array(thetas), worst, tol, tuple(owners), n_pol)


@dataclass(frozen=True)
class ApproxDesign:
    """Weights on a finite vector family with sup_c ||c||^2_{G^+} <= 2d.

    ``support`` indexes into the original vector list; ``weights`` align with it.
    """

    support: np.ndarray
    weights: np.ndarray
    matrix: np.ndarray
    sup_norm: float
    dim: int
    rank: int
    cap: int
    iterations: int

    @property
    def bound(self) -> float:
        return 2.0 * self.dim

    def to_dict(self) -> dict:
        return {
            "support": self.support.tolist(),
            "weights": self.weights.tolist(),
            "sup_norm": self.sup_norm,
            "rank": self.rank,
            "cap": self.cap,
        }


def design_sup_norm(vectors: np.ndarray, weights: np.ndarray, rel_tol: float = 1e-10) -> float:
    """max_c ||c||^2_{G^+} with G = sum_i w_i c_i c_i^T.

    A vector with a component outside range(G) has infinite norm in this
    sense (the design does not cover it), which a bare pseudo-inverse would hide.
    """
    c = np.asarray(vectors, dtype=float)
    g = (c * weights[:, None]).T @ c
    vals, vecs = np.linalg.eigh(g)
    top = max(vals[-1], 0.0)
    keep = vals > rel_tol * max(top, 1e-300)
    basis = vecs[:, keep]
    coords = c @ basis
    outside = np.linalg.norm(c - coords @ basis.T, axis=1)
    scale = max(1.0, float(np.max(np.linalg.norm(c, axis=1))))
    if np.any(outside > 1e-8 * scale):
        return float("inf")
    return float(np.max(np.sum(coords**2 / vals[keep], axis=1)))


def _greedy_basis(y: np.ndarray) -> list[int]:
    """Pick rank-many points greedily by residual norm (Kumar-Yildirim style start)."""
    chosen: list[int] = []
    resid = y.copy()
    for _ in range(y.shape[1]):
        norms = np.linalg.norm(resid, axis=1)
        j = int(np.argmax(norms))
        if norms[j] <= 1e-12:
            break
        chosen.append(j)
        q = resid[j] / norms[j]
        resid = resid - np.outer(resid @ q, q)
    return chosen


def approx_optimal_design(
    vectors: np.ndarray,
    cap: int | None = None,
    max_iter: int = 20_000,
    target_slack: float = 0.02,
) -> ApproxDesign:
    """Frank-Wolfe (Fedorov-Wynn steps) on log det G(rho), then greedy support pruning.

    The iteration works in an orthonormal basis of span(vectors), so a family
    that does not span R^d is still handled. It stops once the sup norm is
    within ``1 + target_slack`` of the rank (the optimum); the certified
    guarantee reported is sup ||c||^2_{G^+} <= 2d.

    Raises:
        DesignNotConverged: if the cap on iterations is hit before the bound 2d holds.
    """
    c = np.atleast_2d(np.asarray(vectors, dtype=float))
    m, d = c.shape
    cap = dtilde(d) if cap is None else cap
    if m == 0 or not np.any(c):
        raise ValueError("design needs at least one nonzero vector")
    _, s, vt = np.linalg.svd(c, full_matrices=False)
    r = int(np.sum(s > 1e-10 * s[0]))
    basis = vt[:r].T
    y = c @ basis

    rho = np.zeros(m)
    rho[_greedy_basis(y)] = 1.0
    rho /= rho.sum()
    it = 0
    while True:
        g = (y * rho[:, None]).T @ y
        ginv = np.linalg.inv(g)
        lev = np.einsum("ij,jk,ik->i", y, ginv, y)
        j = int(np.argmax(lev))
        top = lev[j]
        if top <= r * (1.0 + target_slack) or it >= max_iter:
            break
        step = (top / r - 1.0) / (top - 1.0)
        rho *= 1.0 - step
        rho[j] += step
        it += 1
    if top > 2 * d:
        raise DesignNotConverged(f"sup norm {top:.4f} > {2 * d} after {it} iterations")

    rho[rho < 1e-14] = 0.0
    rho /= rho.sum()
    support = [int(i) for i in np.argsort(rho) if rho[i] > 0]  # ascending weight
    kept = set(support)
    for i in support:
        if len(kept) <= cap:
            break
        trial = np.array(sorted(kept - {i}))
        w = rho[trial] / rho[trial].sum()
        if design_sup_norm(c, _spread(m, trial, w)) <= 2 * d:
            kept.discard(i)
    idx = np.array(sorted(kept))
    w = rho[idx] / rho[idx].sum()
    full = _spread(m, idx, w)
    g_full = (c * full[:, None]).T @ c
    return ApproxDesign(idx, w, g_full, design_sup_norm(c, full), d, r, cap, it)


def _spread(m: int, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = np.zeros(m)
    out[idx] = w
    return out


def range_values(mdp: LayeredMdp, h: int, thetas: np.ndarray) -> np.ndarray:
    """Rg(x) = max over ordered action pairs and theta of (phi(x,a) - phi(x,a'))^T theta."""
    thetas = np.atleast_2d(thetas)
    if thetas.shape[0] == 0:
        return np.zeros(mdp.layer_sizes[h - 1])
    s = mdp.features[h - 1] @ thetas.T  # (n, A, m)
    rg = (s.max(axis=1) - s.min(axis=1)).max(axis=1)
    # gaps at rounding level are ties in exact arithmetic
    floor = RANGE_FLOOR * (1.0 + float(np.max(np.abs(s))))
    return np.where(rg <= floor, 0.0, rg)


def range_of(mdp: LayeredMdp, theta_set: ThetaSet, x: int) -> float:
    return float(range_values(mdp, theta_set.h, theta_set.thetas)[x])


def design_range_values(mdp: LayeredMdp, theta_set: ThetaSet, design: ApproxDesign) -> np.ndarray:
    """Rg^D(x): the range restricted to the design's support."""
    return range_values(mdp, theta_set.h, theta_set.thetas[design.support])


def design_range(mdp: LayeredMdp, theta_set: ThetaSet, design: ApproxDesign, x: int) -> float:
    return float(design_range_values(mdp, theta_set, design)[x])


@dataclass(frozen=True)
class RangeProfile:
    """Per-state Rg and Rg^D of one layer."""

    h: int
    rg: np.ndarray
    rg_design: np.ndarray
    design: ApproxDesign
    theta_set: ThetaSet

    def sandwich_gap(self, d: int) -> float:
        """max_x Rg(x) - sqrt(2d) Rg^D(x); nonpositive when the sandwich holds."""
        return float(np.max(self.rg - np.sqrt(2 * d) * self.rg_design))


def range_profile(mdp: LayeredMdp, h: int, theta_set: ThetaSet | None = None) -> RangeProfile:
    theta_set = theta_set if theta_set is not None else enumerate_theta(mdp, h)
    design = approx_optimal_design(theta_set.thetas)
    return RangeProfile(
        h,
        range_values(mdp, h, theta_set.thetas),
        design_range_values(mdp, theta_set, design),
        design,
        theta_set,
    )


def check_admissible(f_values: np.ndarray, alpha: float, profile: RangeProfile, tol: float = 1e-12) -> bool:
    """True iff f(x) <= Rg^D(x) / alpha at every state of the layer."""
    f_values = np.asarray(f_values, dtype=float)
    bound = profile.rg_design / alpha
    return bool(np.all(f_values <= bound + tol * (1.0 + np.abs(bound))))
