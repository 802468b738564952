"""Named desk-scale MDPs, generated deterministically from fixed seeds.

T1  two states per layer, two actions, H = 2, one-hot features (d = 8).
C3  three-step deterministic chain; action 1 pays 0.3 now and leaves the chain.
L1  low-rank linear MDP (d = 3, H = 3) with simplex features.
X1  tiny MDP whose last-layer rewards are not linear in the features.
P1  Q-realizable but not a linear MDP: one last-layer state has action
    features that differ only in a reward-irrelevant direction, so the bonus
    there is not linearly predictable and the preconditioner has to grow.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from opsdp.mdp import LayeredMdp
from opsdp.mdpfile import load_mdp, save_mdp

SEEDS = {"T1": 20240101, "L1": 20240303, "P1": 20240505}


def _one_hot_features(layer_sizes: list[int], n_actions: int) -> list[np.ndarray]:
    d = sum(layer_sizes) * n_actions
    out, offset = [], 0
    for n in layer_sizes:
        f = np.zeros((n, n_actions, d))
        for x in range(n):
            for a in range(n_actions):
                f[x, a, offset + x * n_actions + a] = 1.0
        offset += n * n_actions
        out.append(f)
    return out


def make_t1(seed: int = SEEDS["T1"]) -> LayeredMdp:
    rng = np.random.default_rng(seed)
    sizes, A = [2, 2], 2
    trans = [rng.dirichlet(np.ones(2), size=(2, A))]
    rewards = [rng.uniform(0, 1, size=(2, A)) for _ in sizes]
    return LayeredMdp(trans, rewards, _one_hot_features(sizes, A), rng.dirichlet(np.ones(2)), "T1")


def make_c3() -> LayeredMdp:
    # layer 1: c1; layer 2: c2, d2; layer 3: c3, d3 (d-states are the dead end)
    sizes, A = [1, 2, 2], 2
    t1 = np.zeros((1, A, 2))
    t1[0, 0, 0] = t1[0, 1, 1] = 1.0
    t2 = np.zeros((2, A, 2))
    t2[0, 0, 0] = t2[0, 1, 1] = 1.0
    t2[1, :, 1] = 1.0
    rewards = [
        np.array([[0.0, 0.3]]),
        np.array([[0.0, 0.3], [0.0, 0.0]]),
        np.array([[1.0, 0.3], [0.0, 0.0]]),
    ]
    return LayeredMdp([t1, t2], rewards, _one_hot_features(sizes, A), np.array([1.0]), "C3")


def make_l1(seed: int = SEEDS["L1"]) -> LayeredMdp:
    rng = np.random.default_rng(seed)
    H, A, d, n = 3, 2, 3, 4
    omega = rng.uniform(0, 0.5, size=d)
    features, rewards, trans = [], [], []
    for h in range(H):
        f = rng.dirichlet(np.ones(d), size=(n, A))
        f[0, 0], f[1, 1], f[2, 0] = np.eye(d)  # keep the vertices so the span is full
        features.append(f)
        rewards.append(f @ omega)
        if h < H - 1:
            mu = rng.dirichlet(np.ones(n), size=d)  # (d, n_next)
            trans.append(f @ mu)
    return LayeredMdp(trans, rewards, features, rng.dirichlet(np.ones(n)), "L1")


def make_x1() -> LayeredMdp:
    trans = [np.array([[[0.5, 0.5], [0.5, 0.5]]])]
    rewards = [np.zeros((1, 2)), np.array([[0.0, 1.0], [1.0, 0.0]])]
    features = [np.full((1, 2, 1), 0.5), np.full((2, 2, 1), 0.5)]
    return LayeredMdp(trans, rewards, features, np.array([1.0]), "X1")


def make_p1(seed: int = SEEDS["P1"]) -> LayeredMdp:
    rng = np.random.default_rng(seed)
    A = 2
    # layer 2: s0 has zero reward and features +-0.6 e3; s1, s2 have identical action features
    f2 = np.zeros((3, A, 3))
    f2[0, 0, 2], f2[0, 1, 2] = 0.6, -0.6
    f2[1, :, 0] = 0.8
    f2[2, :, 1] = 0.8
    omega = np.array([1.0, 0.5, 0.0])
    r2 = f2 @ omega
    v2 = r2.max(axis=1)  # every action ties, so V_2 does not depend on the policy
    f1 = 0.9 * rng.dirichlet(np.ones(3), size=(3, A))
    trans = rng.dirichlet(np.ones(3), size=(3, A))
    r1 = f1 @ np.ones(3) - trans @ v2
    return LayeredMdp([trans], [r1, r2], [f1, f2], np.ones(3) / 3, "P1")


GENERATORS: dict[str, Callable[[], LayeredMdp]] = {
    "T1": make_t1,
    "C3": make_c3,
    "L1": make_l1,
    "X1": make_x1,
    "P1": make_p1,
}


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("opsdp") / "data" / f"{name.lower()}.yaml"))


def fixture(name: str, from_file: bool = True) -> LayeredMdp:
    """Load a shipped fixture (or regenerate it with ``from_file=False``)."""
    if name not in GENERATORS:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(GENERATORS)}")
    if from_file and fixture_path(name).exists():
        return load_mdp(fixture_path(name))
    return GENERATORS[name]()


def fixtures() -> dict[str, LayeredMdp]:
    return {name: fixture(name) for name in GENERATORS}


def write_fixtures(directory: Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for name, gen in GENERATORS.items():
        path = directory / f"{name.lower()}.yaml"
        save_mdp(gen(), path)
        out.append(path)
    return out
