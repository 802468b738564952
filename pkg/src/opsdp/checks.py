"""Structural and exact-identity checks run by ``verify_suite``.

Every check returns a CheckResult with a worst-case margin: ``value`` is the
measured quantity and ``bound`` the limit it must not exceed, so a check
passes when value <= bound.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from opsdp.algorithm import AlgState, RunMetrics, desk_params, elliptical_bound, elliptical_sums, run
from opsdp.mdp import (
    LayeredMdp,
    PrefixBatch,
    exact_functional_expectation,
    exact_occupancy,
    fit_linear,
    policy_value,
    q_values_dp,
)
from opsdp.policies import Tabular, dtilde, varphi_norms
from opsdp.preconditioning import Preconditioner, initial, validate
from opsdp.realizability import (
    REALIZABLE_TOL,
    RangeProfile,
    ThetaSet,
    check_admissible,
    enumerate_theta,
    range_profile,
)

IDENTITY_TOL = 1e-9
SANDWICH_TOL = 1e-8
PROXY_TOL = 1e-8
TOWER_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    status: str  # pass | fail | skip
    value: float | None = None
    bound: float | None = None
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "pass"


@dataclass
class VerifyReport:
    mdp: str
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.status != "fail" for c in self.checks)

    def by_name(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {"mdp": self.mdp, "ok": self.ok, "checks": [asdict(c) for c in self.checks]}


def _result(name: str, value: float, bound: float, detail: str = "") -> CheckResult:
    ok = bool(value <= bound) and math.isfinite(value)
    return CheckResult(name, "pass" if ok else "fail", float(value), float(bound), detail)


def is_one_hot(mdp: LayeredMdp) -> bool:
    f = np.concatenate([p.reshape(-1, mdp.feature_dim) for p in mdp.features])
    return bool(np.all((f == 0) | (f == 1)) and np.all(f.sum(axis=1) == 1) and np.all(f.sum(axis=0) <= 1))


def random_policy(mdp: LayeredMdp, rng: np.random.Generator) -> Tabular:
    return Tabular(tuple(rng.integers(0, mdp.n_actions, size=n) for n in mdp.layer_sizes))


# ---------------------------------------------------------------- mdp-core


def check_tower(mdp: LayeredMdp, rng: np.random.Generator, draws: int = 20) -> CheckResult:
    worst = 0.0
    for _ in range(draws):
        qt = q_values_dp(mdp, random_policy(mdp, rng), fit=False)
        for h in range(mdp.horizon):
            rhs = mdp.rewards[h].copy()
            if h + 1 < mdp.horizon:
                rhs = rhs + mdp.transitions[h] @ qt.v[h + 1]
            worst = max(worst, float(np.max(np.abs(qt.q[h] - rhs))))
    return _result("tower_property", worst, TOWER_TOL)


def check_performance_difference(mdp: LayeredMdp, rng: np.random.Generator, draws: int = 100) -> CheckResult:
    """J(pi*) - J(pi) against the summed advantage of pi* over pi's Q along pi*'s occupancy."""
    worst = 0.0
    for _ in range(draws):
        star, pi = random_policy(mdp, rng), random_policy(mdp, rng)
        qt = q_values_dp(mdp, pi, fit=False)
        occ = exact_occupancy(mdp, star)
        rhs = 0.0
        for h in range(1, mdp.horizon + 1):
            dist = occ[h - 1].sum(axis=1)
            rows = np.arange(dist.size)
            adv = qt.q[h - 1][rows, star.actions(mdp, h)] - qt.q[h - 1][rows, pi.actions(mdp, h)]
            rhs += float(dist @ adv)
        lhs = policy_value(mdp, star) - policy_value(mdp, pi)
        worst = max(worst, abs(lhs - rhs))
    return _result("performance_difference", worst, IDENTITY_TOL)


def _skip_step_gap(mdp: LayeredMdp, rng: np.random.Generator) -> float:
    H = mdp.horizon
    ks = [rng.random(n) < 0.5 for n in mdp.layer_sizes]
    pi_prime, pi_hat = random_policy(mdp, rng), random_policy(mdp, rng)
    mixed = Tabular(
        tuple(np.where(ks[h - 1], pi_hat.actions(mdp, h), pi_prime.actions(mdp, h)) for h in range(1, H + 1))
    )
    r_tilde = [rng.normal(size=r.shape) for r in mdp.rewards]

    def total(b: PrefixBatch) -> np.ndarray:
        return sum(r_tilde[h - 1][b.state(h), b.action(h)] for h in range(b.first_layer, b.last_layer + 1))

    v = [
        np.array(
            [
                exact_functional_expectation(mdp, mixed, total, start=(h, x, int(mixed.actions(mdp, h)[x])))
                for x in range(mdp.layer_sizes[h - 1])
            ]
        )
        for h in range(1, H + 1)
    ]
    worst = 0.0
    for h in range(1, H + 1):
        for x in range(mdp.layer_sizes[h - 1]):

            def rhs(b: PrefixBatch, h: int = h) -> np.ndarray:
                out = np.zeros(b.probs.size)
                inside = np.ones(b.probs.size, dtype=bool)  # prod_{k=h}^{l-1} 1{x_k in K_k}
                for ell in range(h, H + 1):
                    s = b.state(ell)
                    in_k = ks[ell - 1][s]
                    out += (inside & ~in_k) * v[ell - 1][s]
                    inside = inside & in_k
                    out += inside * r_tilde[ell - 1][s, b.action(ell)]
                return out

            start = (h, x, int(mixed.actions(mdp, h)[x]))
            val = exact_functional_expectation(mdp, pi_hat, rhs, start=start)
            worst = max(worst, abs(val - v[h - 1][x]))
    return worst


def check_skip_step(mdp: LayeredMdp, rng: np.random.Generator, draws: int = 100) -> CheckResult:
    worst = max(_skip_step_gap(mdp, rng) for _ in range(draws))
    return _result("skip_step_decomposition", worst, IDENTITY_TOL)


# ---------------------------------------------------------------- realizability


def check_realizability(theta_sets: Sequence[ThetaSet]) -> CheckResult:
    worst = max(ts.residual for ts in theta_sets)
    return _result("realizability", worst, REALIZABLE_TOL, f"per-layer residuals {[ts.residual for ts in theta_sets]}")


def check_design(mdp: LayeredMdp, profiles: Sequence[RangeProfile]) -> list[CheckResult]:
    d = mdp.feature_dim
    norm = max(p.design.sup_norm for p in profiles)
    support = max(len(p.design.support) for p in profiles)
    return [
        _result("design_bound", norm, 2 * d + 1e-9),
        _result("design_support", support, dtilde(d)),
    ]


def check_sandwich(mdp: LayeredMdp, profiles: Sequence[RangeProfile]) -> CheckResult:
    d = mdp.feature_dim
    worst = -math.inf
    for p in profiles:
        worst = max(worst, float(np.max(p.rg_design - p.rg)), p.sandwich_gap(d))
    return _result("range_sandwich", worst, SANDWICH_TOL)


def _gammas(rg_design: np.ndarray, rng: np.random.Generator, k: int = 3) -> list[float]:
    pos = rg_design[rg_design > 0]
    if pos.size == 0:
        return [0.5]
    return sorted({float(g) for g in rng.choice(pos, size=min(k, pos.size), replace=False)})


def check_admissibility(mdp: LayeredMdp, profiles: Sequence[RangeProfile], rng: np.random.Generator) -> CheckResult:
    bad = 0
    total = 0
    for p in profiles:
        for gamma in _gammas(p.rg_design, rng):
            for _ in range(5):
                L = float(rng.uniform(0.1, 2.0))
                f = rng.uniform(-L, L, size=p.rg.size)
                big_f = (p.rg_design >= gamma) * f
                total += 1
                bad += not check_admissible(big_f, gamma / L, p)
    return _result("gated_admissibility", bad, 0, f"{total} gated functions")


def _fit_per_pair(mdp: LayeredMdp, h: int, values: np.ndarray, tol: float) -> tuple[float, float]:
    theta, res = fit_linear(mdp.features[h - 1], values)
    return res, float(np.linalg.norm(theta))


def check_admissible_linearity(
    mdp: LayeredMdp, profiles: Sequence[RangeProfile], rng: np.random.Generator, tol: float, draws: int = 5
) -> list[CheckResult]:
    """Conditional expectations of admissible functions are linear, with bounded parameters."""
    H, d = mdp.horizon, mdp.feature_dim
    worst_res, worst_ratio = 0.0, 0.0
    for p in profiles:
        h = p.h
        if h == 1:
            continue
        for gamma in _gammas(p.rg_design, rng):
            for _ in range(draws):
                L = float(rng.uniform(0.1, 2.0))
                f = (p.rg_design >= gamma) * rng.uniform(-L, L, size=p.rg.size)
                alpha = gamma / L
                pi = random_policy(mdp, rng)
                for ell in range(1, h):
                    vals = _conditional_by_enumeration(mdp, pi, ell, lambda b, h=h: f[b.state(h)], h)
                    res, norm = _fit_per_pair(mdp, ell, vals, tol)
                    worst_res = max(worst_res, res)
                    worst_ratio = max(worst_ratio, norm / (4 * dtilde(d) * H / alpha))
    return [
        _result("admissible_linear_residual", worst_res, tol),
        _result("admissible_linear_norm", worst_ratio, 1.0, "norm / (4 d~ H / alpha)"),
    ]


def _conditional_by_enumeration(
    mdp: LayeredMdp, pi: Tabular, ell: int, f: Callable[[PrefixBatch], np.ndarray], depth: int
) -> np.ndarray:
    out = np.zeros((mdp.layer_sizes[ell - 1], mdp.n_actions))
    for x in range(out.shape[0]):
        for a in range(out.shape[1]):
            out[x, a] = exact_functional_expectation(mdp, pi, f, depth=depth, start=(ell, x, a))
    return out


def check_skip_product_linearity(
    mdp: LayeredMdp, profiles: Sequence[RangeProfile], rng: np.random.Generator, tol: float, draws: int = 5
) -> list[CheckResult]:
    """E[1{Rg^D(x_l) >= g} prod_k 1{Rg^D(x_k) < g} f(x_l) | x_h, a_h] is linear in phi(x_h, a_h)."""
    H, d = mdp.horizon, mdp.feature_dim
    rgd = [p.rg_design for p in profiles]
    worst_res, worst_ratio = 0.0, 0.0
    for ell in range(2, H + 1):
        for gamma in _gammas(rgd[ell - 1], rng):
            for _ in range(draws):
                L = float(rng.uniform(0.1, 2.0))
                f = rng.uniform(-L, L, size=mdp.layer_sizes[ell - 1])
                pi = random_policy(mdp, rng)
                for h in range(1, ell):

                    def g(b: PrefixBatch, h: int = h, ell: int = ell) -> np.ndarray:
                        keep = rgd[ell - 1][b.state(ell)] >= gamma
                        for k in range(h + 1, ell):
                            keep = keep & (rgd[k - 1][b.state(k)] < gamma)
                        return keep * f[b.state(ell)]

                    vals = _conditional_by_enumeration(mdp, pi, h, g, ell)
                    res, norm = _fit_per_pair(mdp, h, vals, tol)
                    worst_res = max(worst_res, res)
                    worst_ratio = max(worst_ratio, norm / (4 * dtilde(d) * H**2 * L / gamma))
    return [
        _result("skip_product_linear_residual", worst_res, tol),
        _result("skip_product_linear_norm", worst_ratio, 1.0, "norm / (4 d~ H^2 L / gamma)"),
    ]


# ---------------------------------------------------------------- preconditioning


def check_preconditioners(
    mdp: LayeredMdp,
    precs: Sequence[Preconditioner],
    theta_sets: Sequence[ThetaSet],
    profiles: Sequence[RangeProfile],
) -> list[CheckResult]:
    """Witness validity, length budget, ellipsoid bound and the range proxy inequality."""
    validity, length, ellipsoid, proxy = -math.inf, -math.inf, -math.inf, -math.inf
    failures = []
    for p in precs:
        rep = validate(p, theta_sets[p.h - 1].thetas)
        if not rep.valid:
            failures.append(f"layer {p.h}: {rep.failures()}")
        margins = [*rep.theta_margins, *rep.growth_margins, *rep.norm_margins]
        validity = max(validity, -min(margins) if margins else -1.0)
        length = max(length, p.k - p.budget)
        ellipsoid = max(ellipsoid, -rep.ellipsoid_margin)
        rgd = profiles[p.h - 1].rg_design
        gap = rgd - math.sqrt(p.d_nu) * varphi_norms(mdp, p.h, p.matrix)
        proxy = max(proxy, float(np.max(gap)))
    return [
        _result("preconditioner_validity", validity, 1e-8, "; ".join(failures)),
        _result("preconditioner_budget", length, 0.0),
        _result("preconditioner_ellipsoid", ellipsoid, 1e-8),
        _result("range_proxy", proxy, PROXY_TOL),
    ]


# ---------------------------------------------------------------- run audits


def check_run(mdp: LayeredMdp, metrics: RunMetrics, state: AlgState) -> list[CheckResult]:
    p = metrics.params
    H, d, T = mdp.horizon, mdp.feature_dim, p["T"]
    sums = elliptical_sums(state, p["beta"])
    bound = elliptical_bound(T, d, p["beta"])
    growth = max(abs(len(state.psi[h]) - (T + 1)) for h in range(1, H + 1))
    rank_one = 0.0
    for h in range(1, H + 1):
        u_sum = sum(np.outer(u, u) for u, _ in state.u_history[h])
        rank_one = max(rank_one, float(np.max(np.abs(state.u[h] - u_sum))))
    dom = max(r.max_width[h] - 2 * math.sqrt(d) * r.u_norm[h] for r in metrics.records for h in r.u_norm)
    return [
        _result("elliptical_potential", max(sums.values()), bound),
        _result("psi_growth", growth, 0),
        _result("design_matrix_rank_one", rank_one, 1e-10),
        _result("design_direction_domination", dom, 1e-12),
        _result("csc_calls", metrics.csc_calls, H**2 * T**2),
    ]


# ---------------------------------------------------------------- suite


def verify_suite(
    mdp: LayeredMdp,
    seed: int = 0,
    draws: int = 100,
    run_T: int = 30,
    preconditioners: Sequence[Preconditioner] | None = None,
    runs: Sequence[tuple[RunMetrics, AlgState]] | None = None,
) -> VerifyReport:
    """Run every structural check against one MDP.

    Preconditioners and run audits come from ``runs`` when given, otherwise
    from a short exact-mode run with the desk profile (T = ``run_T``). If the
    MDP is not linearly realizable the remaining checks are skipped.
    """
    rng = np.random.default_rng(seed)
    report = VerifyReport(mdp.name)
    add = report.checks.extend
    report.checks.append(check_tower(mdp, rng))
    theta_sets = [enumerate_theta(mdp, h) for h in range(1, mdp.horizon + 1)]
    real = check_realizability(theta_sets)
    report.checks.append(real)
    later = [
        "performance_difference",
        "skip_step_decomposition",
        "design_bound",
        "design_support",
        "range_sandwich",
        "gated_admissibility",
        "admissible_linear_residual",
        "admissible_linear_norm",
        "skip_product_linear_residual",
        "skip_product_linear_norm",
        "preconditioner_validity",
        "preconditioner_budget",
        "preconditioner_ellipsoid",
        "range_proxy",
        "elliptical_potential",
        "psi_growth",
        "design_matrix_rank_one",
        "design_direction_domination",
        "csc_calls",
    ]
    if not real.passed:
        add(CheckResult(n, "skip", detail="MDP is not linearly Q-realizable") for n in later)
        return report
    tol = 1e-9 if is_one_hot(mdp) else 1e-6
    report.checks.append(check_performance_difference(mdp, rng, draws))
    report.checks.append(check_skip_step(mdp, rng, draws))
    profiles = [range_profile(mdp, h, ts) for h, ts in enumerate(theta_sets, start=1)]
    add(check_design(mdp, profiles))
    report.checks.append(check_sandwich(mdp, profiles))
    report.checks.append(check_admissibility(mdp, profiles, rng))
    add(check_admissible_linearity(mdp, profiles, rng, tol))
    add(check_skip_product_linearity(mdp, profiles, rng, tol))
    if runs is None:
        _, metrics, state = run(mdp, desk_params("exact", T=run_T), rng=np.random.default_rng(seed))
        runs = [(metrics, state)]
    precs = list(preconditioners or [])
    precs += [initial(mdp.horizon, mdp.feature_dim, runs[0][0].params["nu"], h) for h in range(1, mdp.horizon + 1)]
    for _, state in runs:
        precs += list(state.w.values())
    add(check_preconditioners(mdp, precs, theta_sets, profiles))
    audits = [check_run(mdp, m, s) for m, s in runs]
    for i, name in enumerate(c.name for c in audits[0]):
        worst = max(audits, key=lambda a: (a[i].status == "fail", a[i].value - a[i].bound))
        report.checks.append(worst[i])
    return report
