"""Optimistic policy search by dynamic programming.

One control flow, two expectation backends. In ``exact`` mode every
expectation is computed by forward/backward DP over the tabular MDP; in
``sampled`` mode it is an empirical average over freshly drawn trajectories.
Both backends reduce the data of one roll-in policy to the same sufficient
statistics (state-action masses and joint masses with later layers), so the
fitting, discrepancy and design-direction code below never branches on mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from opsdp.csc import CscOracle, log_growth_bound
from opsdp.linalg import inv_sqrt, row_mahalanobis, top_abs_quadratic
from opsdp.mdp import LayeredMdp, policy_tables, policy_value, q_values_dp, sample_batch
from opsdp.policies import LinearArgmax, Policy, Uniform, compose, dtilde, varphi_layer
from opsdp.preconditioning import (
    Preconditioner,
    extend,
    initial,
    log_term,
    new_direction,
)

MODES = ("exact", "sampled")


class PreconditionBudgetExceeded(RuntimeError):
    pass


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class Params:
    """Run parameters. ``eps_prime`` overrides the discrepancy threshold when set."""

    eps: float
    delta: float
    T: int
    n_traj: int
    mu: float
    nu: float
    lam: float
    beta: float
    polylog: float = 1.0
    mode: str = "exact"
    eps_prime: float | None = None
    gates: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("eps", "delta", "mu", "nu", "lam", "beta", "polylog"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.eps < 1 and 0 < self.delta < 1):
            raise ValueError("eps and delta must lie in (0, 1)")
        if self.T < 1 or self.n_traj < 1:
            raise ValueError("T and n_traj must be positive")
        if self.eps_prime is not None and not self.eps_prime > 0:
            raise ValueError("eps_prime must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Params:
        return cls(**data)


def theory_params(d: int, horizon: int, n_actions: int, eps: float = 0.1, delta: float = 0.1, polylog: float = 1.0) -> Params:
    """Theoretical parameter choice. The episode count is astronomically large."""
    A, H, c = n_actions, horizon, polylog
    return Params(
        eps=eps,
        delta=delta,
        T=math.ceil(32 * d * H**2 * c),
        n_traj=math.ceil(A**8 * d**70 * H**80 * c / eps**24),
        mu=eps / (H * c),
        nu=eps**6 / (A**3 * H**20 * d**19 * c),
        lam=eps**4 / (A**2 * d**14 * H**11),
        beta=eps**12 / (A**4 * d**24 * H**40),
        polylog=c,
    )


DESK = {
    "exact": dict(eps=0.5, delta=0.1, T=200, n_traj=20_000, mu=1e-2, nu=1e-3, lam=1e-9, beta=1.0, eps_prime=1e-4),
    "sampled": dict(eps=0.5, delta=0.1, T=3, n_traj=20_000, mu=1e-2, nu=1e-3, lam=1e-6, beta=1.0, eps_prime=0.05),
}


def desk_params(mode: str = "exact", **overrides: Any) -> Params:
    """Desk-scale profile: small T and n, relaxed thresholds."""
    base = dict(DESK[mode], mode=mode)
    base.update(overrides)
    return Params(**base)


def make_params(profile: str, mdp: LayeredMdp, **overrides: Any) -> Params:
    """Profile defaults with per-field overrides applied on top."""
    overrides = {k: v for k, v in overrides.items() if v is not None}
    mode = overrides.pop("mode", "exact")
    if profile == "desk":
        return desk_params(mode, **overrides)
    if profile == "theory":
        eps = overrides.get("eps", 0.1)
        delta = overrides.get("delta", 0.1)
        c = overrides.get("polylog", 1.0)
        p = theory_params(mdp.feature_dim, mdp.horizon, mdp.n_actions, eps, delta, c)
        return replace(p, mode=mode, **overrides)
    raise ValueError(f"unknown profile {profile!r}")


def regression_error(p: Params, d: int, H: int, A: int, psi_size: int, n: float) -> float:
    """Bonus-regression error level used in the discrepancy threshold.

    ``n = inf`` (exact mode) removes the sampling terms.
    """
    lt = log_term(H, p.nu)
    dnu = 5.0 * d * lt
    dt = dtilde(d)
    dprime = p.delta / (6 * H * p.T)
    out = p.eps / (256 * psi_size * dnu * d**3 * H**5)
    out += 8 * A * dt * H**2 / p.mu * math.sqrt(2 * d * p.lam * psi_size)
    if math.isfinite(n):
        out += 2 * A * math.sqrt(d * math.log(2 / (dprime * p.lam)) / n)
        log_arg = math.log(2**12 * d**3 * dnu * H**6 * psi_size**2 / (p.eps * dprime))
        log_arg += log_growth_bound(int(n), d, A)
        out += 16 * H**2 * A * dt * d / p.mu * math.sqrt(2 * log_arg / n)
    return out


def discrepancy_threshold(p: Params, d: int, H: int, A: int, psi_size: int) -> float:
    """2 d c eps_reg + 8 c d nu H A / (mu lam), unless overridden."""
    if p.eps_prime is not None:
        return p.eps_prime
    c = 20.0 * d * log_term(H, p.nu)
    n = math.inf if p.mode == "exact" else float(p.n_traj)
    return 2 * d * c * regression_error(p, d, H, A, psi_size, n) + 8 * c * d * p.nu * H * A / (p.mu * p.lam)


# ---------------------------------------------------------------- bonuses


@dataclass(frozen=True)
class BonusSpec:
    u: np.ndarray
    w: np.ndarray
    beta: float
    mu: float
    eps: float
    horizon: int


def bonus_layer(phi: np.ndarray, spec: BonusSpec) -> tuple[np.ndarray, np.ndarray]:
    """Gated bonus and its ungated version for every state of a layer."""
    d = phi.shape[-1]
    inv = np.linalg.inv(spec.beta * np.eye(d) + spec.u)
    widths = row_mahalanobis(phi, inv).max(axis=1)
    raw = np.minimum(spec.horizon, spec.eps / (4 * spec.horizon) * widths)
    gate = np.linalg.norm(varphi_layer(phi, spec.w), axis=1) >= spec.mu
    return raw * gate, raw


def bonus(mdp: LayeredMdp, h: int, x: int, spec: BonusSpec) -> tuple[float, float]:
    gated, raw = bonus_layer(mdp.features[h - 1][x : x + 1], spec)
    return float(gated[0]), float(raw[0])


def optimistic_q_dp(mdp: LayeredMdp, policy: Policy, bonuses: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Q^pi_h(x, a) + E^pi[sum_{l >= h} b_l(x_l) | x_h = x, a_h = a] for every layer.

    ``bonuses[h-1]`` holds b_h on the states of layer h.
    """
    tables = policy_tables(mdp, policy)
    H = mdp.horizon
    out: list[np.ndarray] = [None] * H  # type: ignore[list-item]
    nxt = None
    for h in range(H - 1, -1, -1):
        q = mdp.rewards[h] + np.asarray(bonuses[h], float)[:, None]
        if nxt is not None:
            q = q + mdp.transitions[h] @ nxt
        out[h] = q
        nxt = (tables[h] * q).sum(axis=1)
    return out


# ---------------------------------------------------------------- policy sets


@dataclass
class PsiEntry:
    """A (policy, direction) pair; ``policy`` only matters on layers <= ``layer``.

    In exact mode the entry caches the distribution of x_{layer+1} under the
    policy, plain (``p_next``) and weighted by 1{phi(x_layer, a_layer)^T v >= 0} (``q_next``).
    """

    layer: int
    policy: Policy
    v: np.ndarray
    p_next: np.ndarray | None = None
    q_next: np.ndarray | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"layer": self.layer, "policy": self.policy.to_dict(), "v": self.v.tolist()}


def _next_layer_dists(mdp: LayeredMdp, entry: PsiEntry) -> None:
    k = entry.layer
    if k >= mdp.horizon:
        return
    if k == 0:
        entry.p_next = entry.q_next = mdp.init_dist.copy()
        return
    tables = policy_tables(mdp, entry.policy, range(1, k + 1))
    dist = mdp.init_dist
    for j in range(1, k):
        dist = np.einsum("x,xa,xay->y", dist, tables[j - 1], mdp.transitions[j - 1])
    occ = dist[:, None] * tables[k - 1]
    ind = (mdp.features[k - 1] @ entry.v >= 0).astype(float)
    entry.p_next = np.einsum("xa,xay->y", occ, mdp.transitions[k - 1])
    entry.q_next = np.einsum("xa,xay->y", occ * ind, mdp.transitions[k - 1])


def layerwise(policies: Sequence[Policy]) -> Policy:
    """Policy acting as policies[h-1] on layer h."""
    out = policies[-1]
    for h in range(len(policies) - 1, 0, -1):
        out = compose(policies[h - 1], h + 1, out)
    return out


# ---------------------------------------------------------------- statistics


class RollinStats:
    """Sufficient statistics of a list of roll-ins at layer h.

    For roll-in e, ``m[e]`` is the (x_h, a_h) mass, ``mi[e]`` the same mass
    restricted to trajectories whose previous-layer pair passes the direction
    test, and ``cond``/``wcond`` push functions of later states through the
    joint (x_h, a_h, x_l) masses. Sampled masses are empirical frequencies.
    """

    def __init__(self, mdp: LayeredMdp, h: int) -> None:
        self.mdp, self.h = mdp, h
        self.m: list[np.ndarray] = []
        self.mi: list[np.ndarray] = []
        self.ret = np.zeros((mdp.layer_sizes[h - 1], mdp.n_actions))

    @property
    def n_rollins(self) -> int:
        return len(self.m)

    def mass(self) -> np.ndarray:
        return np.sum(self.m, axis=0)

    def cond(self, ell: int, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def wcond(self, e: int, ell: int, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ExactStats(RollinStats):
    def __init__(self, mdp: LayeredMdp, h: int, entries: Sequence[PsiEntry], suffix_tables: list[np.ndarray]) -> None:
        super().__init__(mdp, h)
        A = mdp.n_actions
        for e in entries:
            self.m.append(np.repeat(e.p_next[:, None], A, axis=1) / A)
            self.mi.append(np.repeat(e.q_next[:, None], A, axis=1) / A)
        self.tables = suffix_tables
        self._kernels: dict[int, np.ndarray] = {}
        # E[sum_{l >= h} r_l | x_h, a_h] under the suffix policy
        q = None
        for k in range(mdp.horizon, h - 1, -1):
            qk = mdp.rewards[k - 1].copy()
            if q is not None:
                qk += mdp.transitions[k - 1] @ (self.tables[k] * q).sum(axis=1)
            q = qk
        self.qsuffix = q
        self.ret = self.mass() * q

    def kernel(self, ell: int) -> np.ndarray:
        """P(x_ell | x_h, a_h) under the suffix policy, shape (n_h, A, n_ell)."""
        if ell not in self._kernels:
            k = self.mdp.transitions[self.h - 1]
            for j in range(self.h + 1, ell):
                k = np.einsum("xay,yb,ybz->xaz", k, self.tables[j - 1], self.mdp.transitions[j - 1])
            self._kernels[ell] = k
        return self._kernels[ell]

    def cond(self, ell: int, g: np.ndarray) -> np.ndarray:
        ce = np.tensordot(self.kernel(ell), g, axes=([2], [0]))
        return _bcast(self.mass(), ce) * ce

    def wcond(self, e: int, ell: int, g: np.ndarray) -> np.ndarray:
        ce = np.tensordot(self.kernel(ell), g, axes=([2], [0]))
        return _bcast(self.mi[e] * self.mdp.n_actions, ce) * ce


class SampledStats(RollinStats):
    def __init__(self, mdp: LayeredMdp, h: int, batches: Sequence[Any], vs: Sequence[np.ndarray]) -> None:
        super().__init__(mdp, h)
        A = mdp.n_actions
        nh = mdp.layer_sizes[h - 1]
        self.joint: list[dict[int, np.ndarray]] = []
        self.wjoint: list[dict[int, np.ndarray]] = []
        for batch, v in zip(batches, vs):
            n = len(batch)
            s, a = batch.states, batch.actions
            pair = s[:, h - 1] * A + a[:, h - 1]
            if h == 1:
                ind = np.ones(n, dtype=bool)
            else:
                ind = mdp.features[h - 2][s[:, h - 2], a[:, h - 2]] @ v >= 0
            self.m.append(np.bincount(pair, minlength=nh * A).reshape(nh, A) / n)
            self.mi.append(np.bincount(pair[ind], minlength=nh * A).reshape(nh, A) / n)
            self.ret += np.bincount(pair, weights=batch.rewards[:, h - 1 :].sum(axis=1), minlength=nh * A).reshape(nh, A) / n
            joint, wjoint = {}, {}
            for ell in range(h + 1, mdp.horizon + 1):
                nl = mdp.layer_sizes[ell - 1]
                idx = pair * nl + s[:, ell - 1]
                joint[ell] = np.bincount(idx, minlength=nh * A * nl).reshape(nh, A, nl) / n
                wjoint[ell] = np.bincount(idx[ind], minlength=nh * A * nl).reshape(nh, A, nl) / n
            self.joint.append(joint)
            self.wjoint.append(wjoint)

    def cond(self, ell: int, g: np.ndarray) -> np.ndarray:
        return sum(np.tensordot(j[ell], g, axes=([2], [0])) for j in self.joint)

    def wcond(self, e: int, ell: int, g: np.ndarray) -> np.ndarray:
        return self.mdp.n_actions * np.tensordot(self.wjoint[e][ell], g, axes=([2], [0]))


def _bcast(mass: np.ndarray, like: np.ndarray) -> np.ndarray:
    return mass.reshape(mass.shape + (1,) * (like.ndim - 2))


# ---------------------------------------------------------------- FitOptValue


@dataclass
class FitResult:
    theta: np.ndarray
    theta_r: np.ndarray
    theta_bo: dict[int, np.ndarray]
    ws: dict[int, np.ndarray]
    max_delta: dict[int, float]
    violations: list[int]
    threshold: float
    csc_calls: int
    episodes: int


def _gather_fit_stats(
    mdp: LayeredMdp, h: int, entries: Sequence[PsiEntry], pi_hat: Policy, p: Params, rng: np.random.Generator | None
) -> tuple[RollinStats, int]:
    H = mdp.horizon
    if p.mode == "exact":
        tables = policy_tables(mdp, pi_hat)
        return ExactStats(mdp, h, entries, tables), 0
    batches = []
    suffix = compose(Uniform(), h + 1, pi_hat, H)
    for e in entries:
        rollin = compose(e.policy, h, suffix, H)
        batches.append(sample_batch(mdp, rollin, p.n_traj, rng))
    return SampledStats(mdp, h, batches, [e.v for e in entries]), p.n_traj * len(entries)


def fit_opt_value(
    mdp: LayeredMdp,
    h: int,
    entries: Sequence[PsiEntry],
    pi_hat: Policy,
    us: dict[int, np.ndarray],
    precs: dict[int, Preconditioner],
    p: Params,
    oracle: CscOracle,
    rng: np.random.Generator | None = None,
) -> FitResult:
    """Fit the optimistic value at layer h and propose preconditioning vectors for later layers.

    ``pi_hat`` supplies the actions on layers h+1..H; ``us`` and ``precs``
    map each later layer to its design matrix and preconditioner.
    """
    H, d, A = mdp.horizon, mdp.feature_dim, mdp.n_actions
    stats, episodes = _gather_fit_stats(mdp, h, entries, pi_hat, p, rng)
    phi = mdp.features[h - 1]
    psi_size = len(entries)
    eps_prime = discrepancy_threshold(p, d, H, A, psi_size)

    sigma = p.lam * psi_size * np.eye(d) + np.einsum("xa,xai,xaj->ij", stats.mass(), phi, phi)
    sigma_inv = np.linalg.inv(sigma)
    theta_r = sigma_inv @ np.einsum("xa,xai->i", stats.ret, phi)
    theta = theta_r.copy()
    theta_bo: dict[int, np.ndarray] = {}
    ws: dict[int, np.ndarray] = {}
    max_delta: dict[int, float] = {}
    violations: list[int] = []
    calls_before = oracle.calls
    for ell in range(h + 1, H + 1):
        phi_l = mdp.features[ell - 1]
        spec = BonusSpec(us[ell], precs[ell].matrix, p.beta, p.mu, p.eps, H)
        b, _ = bonus_layer(phi_l, spec)
        tb = sigma_inv @ np.einsum("xai,xa->i", phi, stats.cond(ell, b))
        theta_bo[ell] = tb
        theta += tb
        pred = phi @ tb
        best = (-1.0, 0, None)
        for e in range(psi_size):
            cmat = stats.wcond(e, ell, b) - A * stats.mi[e] * pred
            for sign in (-1, 1):
                res = oracle.solve_matrix(h, -sign * cmat)
                acts = res.policy.actions(mdp, h)
                delta = float(np.sum(cmat[np.arange(cmat.shape[0]), acts]))
                if abs(delta) > best[0]:
                    best = (abs(delta), e, acts)
        max_delta[ell] = best[0]
        if best[0] <= eps_prime:
            continue
        violations.append(ell)
        vphi = varphi_layer(phi_l, precs[ell].matrix)
        norms = np.linalg.norm(vphi, axis=1)
        unit = vphi / np.where(norms > 0, norms, 1.0)[:, None]
        big_b = b[:, None, None] * unit[:, :, None] * unit[:, None, :]
        vartheta = np.einsum("ij,xaj,xakl->ikl", sigma_inv, phi, stats.cond(ell, big_b))
        _, e_star, acts = best
        rows = np.arange(phi.shape[0])
        wb = stats.wcond(e_star, ell, big_b)[rows, acts]  # (n_h, d, d)
        wm = A * stats.mi[e_star][rows, acts]
        m = wb.sum(axis=0) - np.einsum("x,ikl,xi->kl", wm, vartheta, phi[rows, acts])
        w, _, _ = new_direction(m, precs[ell])
        ws[ell] = w
    return FitResult(
        theta, theta_r, theta_bo, ws, max_delta, violations, eps_prime, oracle.calls - calls_before, episodes
    )


# ---------------------------------------------------------------- DesignDir


@dataclass
class DesignResult:
    u: np.ndarray
    v: np.ndarray
    policy: Policy
    kappa: float
    index: int
    source_layer: int
    sign: int
    episodes: int
    max_width: float  # max over roll-ins of E[max_a ||phi(x_h, a)||_{(beta I + U_h)^-1}]


def _layer_dists(
    mdp: LayeredMdp, h: int, psi: Sequence[Sequence[PsiEntry]], pi_hat: Policy, p: Params, rng: np.random.Generator | None
) -> tuple[list[tuple[int, int, np.ndarray]], int]:
    """Distribution of x_h under pi o_{l+1} pi_hat for every (l, entry), in scan order."""
    out = []
    episodes = 0
    H = mdp.horizon
    if p.mode == "exact":
        tables = policy_tables(mdp, pi_hat, range(1, h + 1))
        for ell in range(h):
            entries = psi[ell]
            if not entries:
                continue
            dist = np.array([e.p_next for e in entries])
            for j in range(ell + 1, h):
                dist = np.einsum("ex,xa,xay->ey", dist, tables[j - 1], mdp.transitions[j - 1])
            out += [(ell, i, dist[i]) for i in range(len(entries))]
        return out, 0
    nh = mdp.layer_sizes[h - 1]
    for ell in range(h):
        for i, e in enumerate(psi[ell]):
            rollin = compose(e.policy, ell + 1, pi_hat, H)
            batch = sample_batch(mdp, rollin, p.n_traj, rng, depth=h)
            episodes += p.n_traj
            out.append((ell, i, np.bincount(batch.states[:, h - 1], minlength=nh) / p.n_traj))
    return out, episodes


def design_dir(
    mdp: LayeredMdp,
    h: int,
    psi: Sequence[Sequence[PsiEntry]],
    pi_hat: Policy,
    u_mat: np.ndarray,
    p: Params,
    rng: np.random.Generator | None = None,
) -> DesignResult:
    """Pick the coordinate direction and roll-in with the largest truncated expected feature.

    Scan order is (i, l, entry); a later candidate replaces the incumbent on
    ties, and within a candidate "+" wins a tie against "-".
    """
    d = mdp.feature_dim
    dists, episodes = _layer_dists(mdp, h, psi, pi_hat, p, rng)
    phi = mdp.features[h - 1]
    vmat = inv_sqrt(p.beta * np.eye(d) + u_mat)  # column i is v_{h,i}
    feats = np.zeros((2, d, phi.shape[0], d))  # [sign, i, x, :]
    for i in range(d):
        v = vmat[:, i]
        for si, s in enumerate((-1, 1)):
            acts = LinearArgmax(s * v).actions(mdp, h)
            f = phi[np.arange(phi.shape[0]), acts]
            proj = f @ v
            keep = proj <= 0 if s < 0 else proj >= 0
            feats[si, i] = f * keep[:, None]
    dist = np.array([dd for _, _, dd in dists])  # (E, n_h)
    u_all = np.einsum("ex,sixk->siek", dist, feats)  # (2, d, E, d)
    inner = np.abs(np.einsum("siek,ki->sie", u_all, vmat))
    plus = inner[1] >= inner[0]
    vals = np.where(plus, inner[1], inner[0])  # (d, E), scan order is row-major
    flat = vals.ravel()
    last = int(np.flatnonzero(flat == flat.max())[-1])
    i, e = divmod(last, len(dists))
    sign = 1 if plus[i, e] else -1
    u = u_all[1 if sign > 0 else 0, i, e]
    ell, idx, _ = dists[e]
    v = sign * vmat[:, i]
    head = psi[ell][idx].policy
    tail = compose(pi_hat, h, LinearArgmax(v), mdp.horizon)
    policy = compose(head, ell + 1, tail, mdp.horizon)
    widths = row_mahalanobis(phi, np.linalg.inv(p.beta * np.eye(d) + u_mat)).max(axis=1)
    max_width = float(np.max(dist @ widths))
    return DesignResult(u, v, policy, float(flat[last]), i, ell, sign, episodes, max_width)


# ---------------------------------------------------------------- Evaluate


def evaluate(mdp: LayeredMdp, policy: Policy, n: int, rng: np.random.Generator) -> float:
    """Mean total reward over n sampled episodes."""
    batch = sample_batch(mdp, policy, n, rng)
    return float(batch.rewards.sum(axis=1).mean())


def evaluation_radius(horizon: int, n: int, delta: float) -> float:
    """H sqrt(2 ln(1/delta) / n)."""
    return horizon * math.sqrt(2 * math.log(1 / delta) / n)


# ---------------------------------------------------------------- main loop


@dataclass
class IterationRecord:
    t: int
    J: float
    J_exact: float
    csc_calls: int
    episodes: int
    thetas: list[list[float]]
    u: dict[int, list[float]]
    v: dict[int, list[float]]
    u_norm: dict[int, float]
    kappa: dict[int, float]
    max_width: dict[int, float]
    bonus_mass: dict[int, float]
    max_delta: dict[str, float]
    thresholds: dict[int, float]
    ws: list[dict[str, Any]]
    psi_policies: dict[int, dict[str, Any]]
    stable: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "J": self.J,
            "J_exact": self.J_exact,
            "csc_calls": self.csc_calls,
            "episodes": self.episodes,
            "thetas": self.thetas,
            "u": {str(k): v for k, v in self.u.items()},
            "v": {str(k): v for k, v in self.v.items()},
            "u_norm": {str(k): v for k, v in self.u_norm.items()},
            "kappa": {str(k): v for k, v in self.kappa.items()},
            "max_width": {str(k): v for k, v in self.max_width.items()},
            "bonus_mass": {str(k): v for k, v in self.bonus_mass.items()},
            "max_delta": dict(self.max_delta),
            "thresholds": {str(k): v for k, v in self.thresholds.items()},
            "ws": self.ws,
            "psi_policies": {str(k): v for k, v in self.psi_policies.items()},
            "stable": self.stable,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> IterationRecord:
        ik = lambda m: {int(k): v for k, v in m.items()}  # noqa: E731
        return cls(
            t=data["t"],
            J=data["J"],
            J_exact=data["J_exact"],
            csc_calls=data["csc_calls"],
            episodes=data["episodes"],
            thetas=data["thetas"],
            u=ik(data["u"]),
            v=ik(data["v"]),
            u_norm=ik(data["u_norm"]),
            kappa=ik(data["kappa"]),
            max_width=ik(data["max_width"]),
            bonus_mass=ik(data["bonus_mass"]),
            max_delta=dict(data["max_delta"]),
            thresholds=ik(data["thresholds"]),
            ws=data["ws"],
            psi_policies=ik(data["psi_policies"]),
            stable=data["stable"],
        )


@dataclass
class RunMetrics:
    params: dict[str, Any]
    mdp_name: str
    records: list[IterationRecord] = field(default_factory=list)
    best_t: int = 0
    J_best: float = 0.0
    J_hat: float = float("nan")
    J_star: float | None = None
    episodes: int = 0
    csc_calls: int = 0
    extends: dict[int, int] = field(default_factory=dict)
    preconditioners: dict[int, dict[str, Any]] = field(default_factory=dict)
    policy: dict[str, Any] = field(default_factory=dict)

    @property
    def suboptimality(self) -> float | None:
        return None if self.J_star is None else self.J_star - self.J_hat

    def summary(self) -> dict[str, Any]:
        return {
            "mdp": self.mdp_name,
            "params": self.params,
            "best_t": self.best_t,
            "J_best": self.J_best,
            "J_hat": self.J_hat,
            "J_star": self.J_star,
            "suboptimality": self.suboptimality,
            "episodes": self.episodes,
            "csc_calls": self.csc_calls,
            "extends": {str(k): v for k, v in self.extends.items()},
            "preconditioners": {str(k): v for k, v in self.preconditioners.items()},
            "policy": self.policy,
        }

    @classmethod
    def from_parts(cls, summary: dict[str, Any], records: list[dict[str, Any]]) -> RunMetrics:
        return cls(
            params=summary["params"],
            mdp_name=summary["mdp"],
            records=[IterationRecord.from_dict(r) for r in records],
            best_t=summary["best_t"],
            J_best=summary["J_best"],
            J_hat=summary["J_hat"],
            J_star=summary["J_star"],
            episodes=summary["episodes"],
            csc_calls=summary["csc_calls"],
            extends={int(k): v for k, v in summary["extends"].items()},
            preconditioners={int(k): v for k, v in summary["preconditioners"].items()},
            policy=summary["policy"],
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RunMetrics):
            return NotImplemented
        return self.summary() == other.summary() and [r.to_dict() for r in self.records] == [
            r.to_dict() for r in other.records
        ]


@dataclass
class AlgState:
    """Per-layer state of the main loop; layer 0 only holds Psi_0."""

    psi: list[list[PsiEntry]]
    u: dict[int, np.ndarray]
    w: dict[int, Preconditioner]
    theta: dict[int, np.ndarray]
    u_history: dict[int, list[tuple[np.ndarray, np.ndarray]]]

    def pi_hat(self, horizon: int) -> Policy:
        return layerwise([LinearArgmax(self.theta[h]) for h in range(1, horizon + 1)])


def init_state(mdp: LayeredMdp, p: Params) -> AlgState:
    H, d = mdp.horizon, mdp.feature_dim
    psi = []
    for h in range(H + 1):
        entry = PsiEntry(h, Uniform(), np.zeros(d))
        if p.mode == "exact":
            _next_layer_dists(mdp, entry)
        psi.append([entry])
    return AlgState(
        psi=psi,
        u={h: np.zeros((d, d)) for h in range(1, H + 1)},
        w={h: initial(H, d, p.nu, h) for h in range(1, H + 1)},
        theta={h: np.zeros(d) for h in range(1, H + 1)},
        u_history={h: [] for h in range(1, H + 1)},
    )


def run(
    mdp: LayeredMdp,
    p: Params,
    oracle: CscOracle | None = None,
    rng: np.random.Generator | None = None,
    with_oracle_value: bool = True,
    state: AlgState | None = None,
) -> tuple[Policy, RunMetrics, AlgState]:
    """Run T iterations and return the best-evaluated policy, metrics and final state.

    Raises:
        PreconditionBudgetExceeded: if some layer is extended more often than
            4 d ln(1 + 16 nu^-4 H^4) allows.
    """
    H, d = mdp.horizon, mdp.feature_dim
    oracle = oracle if oracle is not None else CscOracle(mdp, "cells", p.gates)
    rng = rng if rng is not None else np.random.default_rng(0)
    st = state if state is not None else init_state(mdp, p)
    metrics = RunMetrics(p.to_dict(), mdp.name, extends={h: 0 for h in range(1, H + 1)})
    best_j, best_t, best_policy = 0.0, 1, None
    for t in range(1, p.T + 1):
        calls0, episodes = oracle.calls, 0
        max_delta: dict[str, float] = {}
        thresholds: dict[int, float] = {}
        ws_log: list[dict[str, Any]] = []
        for h in range(H, 0, -1):
            pi_hat = st.pi_hat(H)
            res = fit_opt_value(mdp, h, st.psi[h - 1], pi_hat, st.u, st.w, p, oracle, rng)
            episodes += res.episodes
            thresholds[h] = res.threshold
            for ell, val in res.max_delta.items():
                max_delta[f"{h},{ell}"] = val
            for ell, w in res.ws.items():
                before = st.w[ell].k
                st.w[ell] = extend(st.w[ell], w)
                if st.w[ell].k > before:
                    metrics.extends[ell] += 1
                    ws_log.append({"h": h, "ell": ell, "w": w.tolist()})
                if st.w[ell].k > st.w[ell].budget:
                    raise PreconditionBudgetExceeded(
                        f"layer {ell}: {st.w[ell].k} extensions exceed budget {st.w[ell].budget:.1f}"
                    )
            st.theta[h] = res.theta
        pi_hat = st.pi_hat(H)
        u_log, v_log, norms, kappas, widths, bonus_mass, psi_log = {}, {}, {}, {}, {}, {}, {}
        # every DesignDir call of iteration t sees the sets of iteration t
        fresh: list[tuple[int, PsiEntry]] = []
        for h in range(1, H + 1):
            dres = design_dir(mdp, h, st.psi, pi_hat, st.u[h], p, rng)
            episodes += dres.episodes
            inv = np.linalg.inv(p.beta * np.eye(d) + st.u[h])
            norms[h] = float(np.sqrt(max(dres.u @ inv @ dres.u, 0.0)))
            st.u_history[h].append((dres.u.copy(), st.u[h].copy()))
            st.u[h] = st.u[h] + np.outer(dres.u, dres.u)
            entry = PsiEntry(h, dres.policy, dres.v)
            if p.mode == "exact":
                _next_layer_dists(mdp, entry)
            fresh.append((h, entry))
            u_log[h], v_log[h], kappas[h], widths[h] = dres.u.tolist(), dres.v.tolist(), dres.kappa, dres.max_width
            psi_log[h] = entry.to_dict()
            spec = BonusSpec(st.u[h], st.w[h].matrix, p.beta, p.mu, p.eps, H)
            bonus_mass[h] = float(bonus_layer(mdp.features[h - 1], spec)[0].sum())
        for h, entry in fresh:
            st.psi[h].append(entry)
        j_exact = policy_value(mdp, pi_hat)
        if p.mode == "exact":
            j_t = j_exact
        else:
            j_t = evaluate(mdp, pi_hat, p.n_traj, rng)
            episodes += p.n_traj
        if best_policy is None or best_j < j_t:
            best_j, best_t, best_policy = j_t, t, pi_hat
        calls = oracle.calls - calls0
        metrics.csc_calls += calls
        metrics.episodes += episodes
        metrics.records.append(
            IterationRecord(
                t=t,
                J=j_t,
                J_exact=j_exact,
                csc_calls=calls,
                episodes=episodes,
                thetas=[st.theta[h].tolist() for h in range(1, H + 1)],
                u=u_log,
                v=v_log,
                u_norm=norms,
                kappa=kappas,
                max_width=widths,
                bonus_mass=bonus_mass,
                max_delta=max_delta,
                thresholds=thresholds,
                ws=ws_log,
                psi_policies=psi_log,
                stable=not ws_log,
            )
        )
    metrics.best_t, metrics.J_best = best_t, best_j
    metrics.J_hat = policy_value(mdp, best_policy)
    if with_oracle_value:
        from opsdp.mdp import optimal_policy

        metrics.J_star = optimal_policy(mdp)[1]
    metrics.preconditioners = {h: st.w[h].to_dict() for h in range(1, H + 1)}
    metrics.policy = best_policy.to_dict()
    return best_policy, metrics, st


def elliptical_sums(state: AlgState, beta: float) -> dict[int, float]:
    """sum_t ||u^(t)_h||_{(beta I + U^(t)_h)^-1} with U^(t) excluding u^(t)."""
    out = {}
    for h, hist in state.u_history.items():
        total = 0.0
        for u, umat in hist:
            inv = np.linalg.inv(beta * np.eye(u.size) + umat)
            total += math.sqrt(max(float(u @ inv @ u), 0.0))
        out[h] = total
    return out


def elliptical_bound(T: int, d: int, beta: float) -> float:
    return math.sqrt(T * d * math.log(1 + T / beta))
