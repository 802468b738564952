"""Policy values: uniform, linear argmax, range-gated benchmark, time composition, tables.

Policies are plain immutable values holding parameters, never closures, so
they can be logged and reloaded. Every policy exposes ``probs(mdp, h)`` which
returns the (n_h, A) action-probability table at layer ``h`` (1-based); the DP
oracles and the vectorized sampler only ever talk to policies through it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, ClassVar

import numpy as np

if TYPE_CHECKING:
    from opsdp.mdp import LayeredMdp

# Relative slack used when deciding ties. Scores that agree to ~1e-12 are
# treated as equal so that boundary points (e.g. LP cell representatives)
# resolve ties the same way exact arithmetic would.
TIE_TOL = 1e-12


def first_argmax(scores: np.ndarray) -> np.ndarray:
    """Index of the first maximal entry along the last axis (smallest-index tie-break)."""
    scores = np.asarray(scores, dtype=float)
    top = scores.max(axis=-1, keepdims=True)
    return np.argmax(scores >= top - TIE_TOL * (1.0 + np.abs(top)), axis=-1)


def dtilde(d: int) -> int:
    """Support cap for approximate designs, guarded so that ln ln d is defined for small d."""
    return max(16, math.ceil(4 * d * math.log(math.log(max(d, 3)))) + 16)


def _one_hot(actions: np.ndarray, n_actions: int) -> np.ndarray:
    actions = np.asarray(actions)
    if actions.size and (actions.min() < 0 or actions.max() >= n_actions):
        raise ValueError(f"policy returned an action outside [0, {n_actions})")
    table = np.zeros((actions.size, n_actions))
    table[np.arange(actions.size), actions] = 1.0
    return table


class Policy:
    """Base class. Subclasses implement ``probs`` and the (de)serialization hooks."""

    kind: ClassVar[str] = ""
    deterministic: ClassVar[bool] = True

    def probs(self, mdp: LayeredMdp, h: int) -> np.ndarray:
        actions = self.actions(mdp, h)
        return _one_hot(actions, mdp.n_actions)

    def actions(self, mdp: LayeredMdp, h: int) -> np.ndarray:
        """Deterministic action per state of layer h."""
        raise NotImplementedError

    def act(self, mdp: LayeredMdp, h: int, x: int) -> int | np.ndarray:
        """Action at state x of layer h, or the action distribution for stochastic policies."""
        if self.is_deterministic(h):
            return int(self.actions(mdp, h)[x])
        return self.probs(mdp, h)[x]

    def is_deterministic(self, h: int) -> bool:
        return self.deterministic

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Uniform(Policy):
    kind: ClassVar[str] = "uniform"
    deterministic: ClassVar[bool] = False

    def probs(self, mdp: LayeredMdp, h: int) -> np.ndarray:
        n = mdp.layer_sizes[h - 1]
        return np.full((n, mdp.n_actions), 1.0 / mdp.n_actions)

    def actions(self, mdp: LayeredMdp, h: int) -> np.ndarray:
        if mdp.n_actions == 1:
            return np.zeros(mdp.layer_sizes[h - 1], dtype=int)
        raise ValueError("the uniform policy is stochastic")

    def is_deterministic(self, h: int) -> bool:
        return False

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind}

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Uniform)

    def __hash__(self) -> int:
        return hash(self.kind)


@dataclass(frozen=True, eq=False)
class LinearArgmax(Policy):
    """pi(x) = argmax_a phi(x, a)^T theta, smallest index on ties."""

    theta: np.ndarray
    kind: ClassVar[str] = "linear"

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).ravel())

    def actions(self, mdp: LayeredMdp, h: int) -> np.ndarray:
        return first_argmax(mdp.features[h - 1] @ self.theta)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "theta": self.theta.tolist()}

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LinearArgmax) and np.array_equal(self.theta, other.theta)

    def __hash__(self) -> int:
        return hash((self.kind, self.theta.tobytes()))


@dataclass(frozen=True, eq=False)
class GatedBenchmark(Policy):
    """Acts as ``first`` where some gate vector sees an action gap >= gamma, else as ``second``."""

    thetas: np.ndarray
    gamma: float
    first: LinearArgmax
    second: LinearArgmax
    kind: ClassVar[str] = "gated"

    def __post_init__(self) -> None:
        thetas = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "gamma", float(self.gamma))
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    def gate(self, mdp: LayeredMdp, h: int) -> np.ndarray:
        """Boolean per state: max_{a,a',i} (phi(x,a) - phi(x,a'))^T theta_i >= gamma."""
        phi = mdp.features[h - 1]
        if self.thetas.shape[0] == 0:
            return np.zeros(phi.shape[0], dtype=bool)
        s = phi @ self.thetas.T  # (n, A, g)
        spread = (s.max(axis=1) - s.min(axis=1)).max(axis=1)
        return spread >= self.gamma - TIE_TOL * (1.0 + self.gamma)

    def actions(self, mdp: LayeredMdp, h: int) -> np.ndarray:
        return np.where(
            self.gate(mdp, h), self.first.actions(mdp, h), self.second.actions(mdp, h)
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "thetas": self.thetas.tolist(),
            "gamma": self.gamma,
            "first": self.first.to_dict(),
            "second": self.second.to_dict(),
        }

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, GatedBenchmark)
            and np.array_equal(self.thetas, other.thetas)
            and self.gamma == other.gamma
            and self.first == other.first
            and self.second == other.second
        )

    def __hash__(self) -> int:
        return hash((self.kind, self.thetas.tobytes(), self.gamma))


@dataclass(frozen=True, eq=False)
class Composed(Policy):
    """prefix on layers < t, suffix on layers >= t."""

    prefix: Policy
    t: int
    suffix: Policy
    kind: ClassVar[str] = "composed"

    def __post_init__(self) -> None:
        if self.t < 1:
            raise ValueError(f"switch layer must be >= 1, got {self.t}")

    def _pick(self, mdp: LayeredMdp | None, h: int) -> Policy:
        if mdp is not None and self.t > mdp.horizon + 1:
            raise ValueError(f"switch layer {self.t} outside [1, {mdp.horizon + 1}]")
        return self.prefix if h < self.t else self.suffix

    def probs(self, mdp: LayeredMdp, h: int) -> np.ndarray:
        return self._pick(mdp, h).probs(mdp, h)

    def actions(self, mdp: LayeredMdp, h: int) -> np.ndarray:
        return self._pick(mdp, h).actions(mdp, h)

    def is_deterministic(self, h: int) -> bool:
        return self._pick(None, h).is_deterministic(h)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "t": self.t,
            "prefix": self.prefix.to_dict(),
            "suffix": self.suffix.to_dict(),
        }

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Composed)
            and self.t == other.t
            and self.prefix == other.prefix
            and self.suffix == other.suffix
        )

    def __hash__(self) -> int:
        return hash((self.kind, self.t))


@dataclass(frozen=True, eq=False)
class Tabular(Policy):
    """Explicit action per state; ``table[h-1][x]`` is the action at state x of layer h."""

    table: tuple[np.ndarray, ...] = field(default_factory=tuple)
    kind: ClassVar[str] = "tabular"

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "table", tuple(np.asarray(t, dtype=int).ravel() for t in self.table)
        )

    def actions(self, mdp: LayeredMdp, h: int) -> np.ndarray:
        if h - 1 >= len(self.table):
            raise ValueError(f"tabular policy has no entry for layer {h}")
        acts = self.table[h - 1]
        if acts.size != mdp.layer_sizes[h - 1]:
            raise ValueError(f"tabular policy covers {acts.size} states at layer {h}")
        return acts

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "table": [t.tolist() for t in self.table]}

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Tabular)
            and len(self.table) == len(other.table)
            and all(np.array_equal(a, b) for a, b in zip(self.table, other.table))
        )

    def __hash__(self) -> int:
        return hash((self.kind, tuple(t.tobytes() for t in self.table)))


def compose(prefix: Policy, t: int, suffix: Policy, horizon: int | None = None) -> Policy:
    """Return prefix o_t suffix; ``t`` must lie in [1, horizon + 1]."""
    if t < 1 or (horizon is not None and t > horizon + 1):
        raise ValueError(f"switch layer {t} outside [1, {horizon + 1 if horizon else 'H+1'}]")
    return Composed(prefix, int(t), suffix)


def policy_from_dict(data: dict[str, Any]) -> Policy:
    kind = data.get("kind")
    if kind == "uniform":
        return Uniform()
    if kind == "linear":
        return LinearArgmax(np.asarray(data["theta"], dtype=float))
    if kind == "gated":
        return GatedBenchmark(
            np.asarray(data["thetas"], dtype=float),
            float(data["gamma"]),
            policy_from_dict(data["first"]),
            policy_from_dict(data["second"]),
        )
    if kind == "composed":
        return Composed(
            policy_from_dict(data["prefix"]), int(data["t"]), policy_from_dict(data["suffix"])
        )
    if kind == "tabular":
        return Tabular(tuple(np.asarray(t, dtype=int) for t in data["table"]))
    raise ValueError(f"unknown policy kind {kind!r}")


def pair_differences(phi: np.ndarray) -> np.ndarray:
    """All ordered feature differences: out[x, a, a'] = phi(x, a) - phi(x, a')."""
    return phi[:, :, None, :] - phi[:, None, :, :]


def varphi_layer(phi: np.ndarray, w: np.ndarray) -> np.ndarray:
    """varphi(x; W) for every state of a layer.

    For each state returns W(phi(x,a) - phi(x,a')) for the ordered pair with the
    largest norm, the lexicographically first pair on ties.
    """
    n, n_actions, d = phi.shape
    wd = pair_differences(phi) @ np.asarray(w, dtype=float).T  # (n, A, A, d)
    flat = wd.reshape(n, n_actions * n_actions, d)
    norms = np.einsum("npd,npd->np", flat, flat)
    best = np.argmax(norms, axis=1)
    return flat[np.arange(n), best]


def varphi(mdp: LayeredMdp, h: int, x: int, w: np.ndarray) -> np.ndarray:
    return varphi_layer(mdp.features[h - 1][x : x + 1], w)[0]


def varphi_norms(mdp: LayeredMdp, h: int, w: np.ndarray) -> np.ndarray:
    return np.linalg.norm(varphi_layer(mdp.features[h - 1], w), axis=1)
