"""Valid nu-preconditionings, their checker, and the fit-or-precondition step.

A preconditioner for layer h is the list of witness vectors w_1..w_k and the
matrix W = (H^-2 I + sum_i w_i w_i^T)^{-1/2}. W is always rebuilt from the
list, never updated in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from opsdp.linalg import eig_subspace_projection, inv_sqrt, sqrt_psd, symmetrize, top_abs_quadratic
from opsdp.mdp import LayeredMdp, conditional_expectation, exact_occupancy, policy_tables
from opsdp.policies import Policy, compose, varphi_layer


def log_term(horizon: int, nu: float) -> float:
    """ln(1 + 16 H^4 nu^-4), evaluated without overflow for tiny nu."""
    return float(np.logaddexp(0.0, math.log(16.0) + 4 * math.log(horizon) - 4 * math.log(nu)))


def d_nu(d: int, horizon: int, nu: float) -> float:
    """5 d ln(1 + 16 H^4 nu^-4)."""
    return 5.0 * d * log_term(horizon, nu)


def length_budget(d: int, horizon: int, nu: float) -> float:
    """Maximum number of nonzero extensions: 4 d ln(1 + 16 nu^-4 H^4)."""
    return 4.0 * d * log_term(horizon, nu)


@dataclass(frozen=True, eq=False)
class Preconditioner:
    horizon: int
    dim: int
    nu: float
    ws: tuple[np.ndarray, ...] = ()
    h: int = 0
    matrix: np.ndarray = field(init=False, repr=False)
    inverse: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "ws", tuple(np.asarray(w, dtype=float).ravel() for w in self.ws))
        gram = self.gram(len(self.ws))
        object.__setattr__(self, "matrix", inv_sqrt(gram))
        object.__setattr__(self, "inverse", sqrt_psd(gram))

    def gram(self, k: int) -> np.ndarray:
        """H^-2 I + sum_{j<k} w_j w_j^T."""
        g = np.eye(self.dim) / self.horizon**2
        for w in self.ws[:k]:
            g += np.outer(w, w)
        return symmetrize(g)

    @property
    def k(self) -> int:
        return len(self.ws)

    @property
    def d_nu(self) -> float:
        return d_nu(self.dim, self.horizon, self.nu)

    @property
    def budget(self) -> float:
        return length_budget(self.dim, self.horizon, self.nu)

    def to_dict(self) -> dict:
        return {"h": self.h, "nu": self.nu, "ws": [w.tolist() for w in self.ws]}


def initial(horizon: int, d: int, nu: float, h: int = 0) -> Preconditioner:
    """The k = 0 preconditioner, W = H I."""
    return Preconditioner(horizon, d, nu, (), h)


def extend(p: Preconditioner, w: np.ndarray) -> Preconditioner:
    """Append w (a zero vector is a no-op) and rebuild W from the vector list."""
    w = np.asarray(w, dtype=float).ravel()
    if w.size != p.dim or not np.all(np.isfinite(w)):
        raise ValueError(f"extension vector must be a finite vector of length {p.dim}")
    if not np.any(w):
        return p
    return Preconditioner(p.horizon, p.dim, p.nu, (*p.ws, w), p.h)


@dataclass(frozen=True)
class PreconditionReport:
    """Margins of every validity condition; a condition holds when its margin is >= -tol."""

    theta_margins: np.ndarray  # 1 - sup_theta |theta^T w_i|
    growth_margins: np.ndarray  # ||G_{<i}^{-1/2} w_i||^2 - 1/2
    norm_margins: np.ndarray  # 1/nu - ||w_i||
    length_margin: float  # budget - k
    ellipsoid_margin: float  # d_nu - sup_theta ||W^{-1} theta||^2
    tol: float = 1e-8

    @property
    def valid(self) -> bool:
        margins = [
            *self.theta_margins,
            *self.growth_margins,
            *self.norm_margins,
            self.length_margin,
            self.ellipsoid_margin,
        ]
        return all(m >= -self.tol for m in margins)

    def failures(self) -> list[str]:
        out = []
        for name, arr in (
            ("theta", self.theta_margins),
            ("growth", self.growth_margins),
            ("norm", self.norm_margins),
        ):
            out += [f"{name}[{i}]={m:.3e}" for i, m in enumerate(arr) if m < -self.tol]
        if self.length_margin < -self.tol:
            out.append(f"length={self.length_margin:.3e}")
        if self.ellipsoid_margin < -self.tol:
            out.append(f"ellipsoid={self.ellipsoid_margin:.3e}")
        return out


def validate(p: Preconditioner, thetas: np.ndarray, tol: float = 1e-8) -> PreconditionReport:
    """Check the witness conditions plus the length and ellipsoid consequences."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    theta_m, growth_m, norm_m = [], [], []
    for i, w in enumerate(p.ws):
        theta_m.append(1.0 - float(np.max(np.abs(thetas @ w))) if thetas.size else 1.0)
        g = inv_sqrt(p.gram(i)) @ w
        growth_m.append(float(g @ g) - 0.5)
        norm_m.append(1.0 / p.nu - float(np.linalg.norm(w)))
    sup = float(np.max(np.sum((thetas @ p.inverse) ** 2, axis=1))) if thetas.size else 0.0
    return PreconditionReport(
        np.array(theta_m),
        np.array(growth_m),
        np.array(norm_m),
        p.budget - p.k,
        p.d_nu - sup,
        tol,
    )


def new_direction(m: np.ndarray, p: Preconditioner) -> tuple[np.ndarray, np.ndarray, float]:
    """Eigen step, projection onto S(W, nu), and the candidate w = W^{-1} z~.

    Returns (w, z, value) where z is the unprojected unit maximizer of |z^T M z|.
    """
    z, value = top_abs_quadratic(m)
    z_proj = eig_subspace_projection(p.matrix, p.nu) @ z
    return p.inverse @ z_proj, z, value


@dataclass(frozen=True)
class FitOrPrecondition:
    """Outcome of one fit-or-precondition pass.

    ``w`` is None on the fit branch. ``deltas`` holds Delta(pi) for each pi in Psi
    against the returned fit.
    """

    theta: np.ndarray
    w: np.ndarray | None
    deltas: np.ndarray
    threshold: float
    passes: int = 1
    ws: tuple[np.ndarray, ...] = ()

    @property
    def fitted(self) -> bool:
        return self.w is None


def fit_threshold(d: int, horizon: int, nu: float, lam: float, mu: float, bound: float) -> float:
    """8 c sqrt(lam) d d~ H / (sqrt(zeta) mu) + 8 c d nu L / (mu lam)."""
    lt = log_term(horizon, nu)
    c = 20.0 * d * lt
    dt = 5.0 * d * math.log(lt) if lt > 1.0 else 0.0
    zeta = 1.0 / (8.0 * d)
    return 8 * c * math.sqrt(lam) * d * dt * horizon / (math.sqrt(zeta) * mu) + 8 * c * d * nu * bound / (
        mu * lam
    )


def linear_fit_or_precondition(
    mdp: LayeredMdp,
    h: int,
    ell: int,
    f: np.ndarray,
    psi: Sequence[Policy],
    pi_hat: Policy,
    p: Preconditioner,
    mu: float,
    nu: float,
    lam: float,
    bound: float | None = None,
    threshold: float | None = None,
    loop: bool = False,
    max_passes: int = 64,
) -> FitOrPrecondition:
    """Either fit f(x_ell) 1{||varphi(x_ell; W_ell)|| >= mu} linearly at layer h, or find a new witness.

    Exact-expectation version: every expectation is computed by forward and
    backward DP. ``f`` holds the function values on the states of layer ell,
    ``pi_hat`` supplies the actions on layers h+1..H. With ``loop=True`` the
    pass is repeated, extending the preconditioner each time, until the fit
    branch is reached.
    """
    if not h < ell:
        raise ValueError("need h < ell")
    f = np.asarray(f, dtype=float)
    bound = float(np.max(np.abs(f))) if bound is None else bound
    d = mdp.feature_dim
    eps = fit_threshold(d, mdp.horizon, nu, lam, mu, bound) if threshold is None else threshold

    rollins = [compose(pi, h + 1, pi_hat, mdp.horizon) for pi in psi]
    occs = [exact_occupancy(mdp, r, depth=h)[h - 1] for r in rollins]
    conds = [policy_tables(mdp, r) for r in rollins]
    phi = mdp.features[h - 1]
    sigma = lam * np.eye(d)
    for occ in occs:
        sigma += np.einsum("xa,xai,xaj->ij", occ, phi, phi)
    sigma_inv = np.linalg.inv(sigma)

    ws: list[np.ndarray] = []
    passes = 0
    while True:
        passes += 1
        vphi = varphi_layer(mdp.features[ell - 1], p.matrix)
        norms = np.linalg.norm(vphi, axis=1)
        gate = norms >= mu
        g = f * gate
        cond_g = [conditional_expectation(mdp, r, h, ell, g, tables=t) for r, t in zip(rollins, conds)]
        rhs = sum(np.einsum("xa,xai,xa->i", occ, phi, cg) for occ, cg in zip(occs, cond_g))
        theta = sigma_inv @ rhs
        pred = phi @ theta
        deltas = np.array([float(np.sum(occ * (cg - pred))) for occ, cg in zip(occs, cond_g)])
        if np.max(np.abs(deltas)) <= eps:
            return FitOrPrecondition(theta, None, deltas, eps, passes, tuple(ws))

        safe = np.where(gate, norms, 1.0)
        unit = vphi / safe[:, None]
        big_f = (g[:, None, None] * unit[:, :, None] * unit[:, None, :])  # (n_ell, d, d)
        cond_f = [
            conditional_expectation(mdp, r, h, ell, big_f, tables=t) for r, t in zip(rollins, conds)
        ]
        vartheta = np.einsum(
            "ij,jkl->ikl",
            sigma_inv,
            sum(np.einsum("xa,xai,xakl->ikl", occ, phi, cf) for occ, cf in zip(occs, cond_f)),
        )
        j = int(np.argmax(np.abs(deltas)))
        occ, cf = occs[j], cond_f[j]
        mean_phi = np.einsum("xa,xai->i", occ, phi)
        m = np.einsum("xa,xakl->kl", occ, cf) - np.einsum("ikl,i->kl", vartheta, mean_phi)
        w, _, _ = new_direction(m, p)
        if not loop or not np.any(w) or passes >= max_passes:
            return FitOrPrecondition(theta, w, deltas, eps, passes, tuple(ws + [w]))
        ws.append(w)
        p = extend(p, w)
