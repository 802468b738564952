import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opsdp.csc import (
    BenchmarkCells,
    CscInstance,
    CscOracle,
    csc_argmin,
    csc_objective,
    delta_to_csc,
    exhaustive_minimum,
    growth_bound,
    joint_cells,
    joint_policy,
    log_growth_bound,
)
from opsdp.mdp import LayeredMdp
from opsdp.policies import GatedBenchmark, LinearArgmax, Tabular


def feature_mdp(phi):
    """One-layer MDP carrying the given (n, A, d) features."""
    n, A, _ = phi.shape
    return LayeredMdp((), (np.zeros((n, A)),), (phi,), np.full(n, 1.0 / n), "F")


def random_features(rng, n, A, d):
    phi = rng.normal(size=(n, A, d))
    return phi / np.maximum(1.0, np.linalg.norm(phi, axis=-1, keepdims=True))


def random_gated(rng, d, g):
    return GatedBenchmark(
        rng.normal(size=(g, d)) * rng.uniform(0.1, 3.0),
        float(rng.exponential(0.5)) + 1e-6,
        LinearArgmax(rng.normal(size=d)),
        LinearArgmax(rng.normal(size=d)),
    )


def test_instance_validation():
    with pytest.raises(ValueError):
        CscInstance(1, [1.0, 2.0], [0], [0])
    with pytest.raises(ValueError):
        CscInstance(1, [np.inf], [0], [0])
    inst = CscInstance(1, [1.0, 2.0, -1.0], [0, 0, 1], [1, 1, 0])
    np.testing.assert_array_equal(inst.cost_matrix(2, 2), [[0.0, 3.0], [-1.0, 0.0]])


def test_zero_costs_give_zero_objective():
    mdp = feature_mdp(random_features(np.random.default_rng(0), 3, 2, 2))
    res = csc_argmin(CscInstance(1, np.zeros(4), [0, 1, 2, 0], [0, 1, 1, 1]), mdp)
    assert res.objective == 0.0
    with pytest.raises(ValueError):
        csc_argmin(CscInstance(1, [], [], []), mdp)


def test_one_dimensional_sign_choice():
    phi = np.array([[[0.0], [1.0]], [[0.0], [0.5]]])
    mdp = feature_mdp(phi)
    inst = CscInstance(1, [-1.0, -1.0], [0, 1], [1, 1])
    res = csc_argmin(inst, mdp)
    brute = min(csc_objective(inst, mdp, LinearArgmax(np.array([s]))) for s in (-1.0, 1.0))
    assert res.objective == brute == -2.0
    np.testing.assert_array_equal(res.policy.actions(mdp, 1), [1, 1])


@pytest.mark.parametrize("seed", range(6))
def test_random_instance_beats_sampled_policies(seed):
    rng = np.random.default_rng(seed)
    phi = random_features(rng, 8, 2, 2)
    mdp = feature_mdp(phi)
    n = 8
    inst = CscInstance(1, rng.normal(size=n), rng.integers(0, 8, size=n), rng.integers(0, 2, size=n))
    res = csc_argmin(inst, mdp)
    assert res.objective == exhaustive_minimum(inst, mdp)
    assert res.objective == csc_objective(inst, mdp, res.policy)
    for _ in range(2_000):
        assert res.objective <= csc_objective(inst, mdp, random_gated(rng, 2, 2))


def test_block_decomposition_matches_joint_arrangement():
    # tiny instance: the full (g d + 1 + 2d)-variable arrangement is still cheap
    rng = np.random.default_rng(4)
    y = random_features(rng, 2, 2, 1)
    cells = BenchmarkCells.build(y, 1, 2.0)
    joint, k = joint_cells(y, 1)
    assert k == 1 + 1 + 2
    mdp = feature_mdp(y)
    labs_joint = {joint_policy(c.rep, 1, 1, 2.0).actions(mdp, 1).tobytes() for c in joint.cells}
    labs_block = {cells.policy(*t).actions(mdp, 1).tobytes() for t in cells.candidates()}
    assert labs_joint == labs_block


def test_tabulated_and_untabulated_search_agree():
    rng = np.random.default_rng(7)
    y = random_features(rng, 5, 3, 2)
    cells = BenchmarkCells.build(y, 2, 2.0)
    assert cells.labelings is not None
    for _ in range(20):
        c = rng.normal(size=(5, 3))
        fast = min(v for v, *_ in cells.best(c))
        saved = cells.labelings
        cells.labelings = None
        slow = min(v for v, *_ in cells.best(c))
        cells.labelings = saved
        assert fast == pytest.approx(slow, abs=1e-12)


def test_labelings_are_exactly_what_policies_do():
    rng = np.random.default_rng(8)
    y = random_features(rng, 4, 2, 2)
    mdp = feature_mdp(y)
    cells = BenchmarkCells.build(y, 2, 2.0)
    for key, lab in zip(cells.labeling_keys, cells.labelings):
        np.testing.assert_array_equal(cells.policy(*key).actions(mdp, 1), lab)
    assert cells.n_labelings() == len(cells.labeling_keys)
    assert cells.n_labelings() <= growth_bound(4, 2, 2)


def test_one_hot_features_reach_every_labeling():
    n, A = 3, 2
    phi = np.zeros((n, A, n * A))
    for x in range(n):
        for a in range(A):
            phi[x, a, x * A + a] = 1.0
    cells = BenchmarkCells.build(phi, 1, 3.0)
    assert cells.n_labelings() == A**n


def test_tabular_backend_is_per_state_optimum(t1):
    c = np.array([[0.3, -0.2], [-1.0, 0.5]])
    res = CscOracle(t1, "tabular").solve_matrix(2, c)
    np.testing.assert_array_equal(res.policy.actions(t1, 2), [1, 0])
    assert res.objective == pytest.approx(-1.2)
    # one-hot features: the benchmark class reaches the same optimum
    assert CscOracle(t1, "cells").solve_matrix(2, c).objective == pytest.approx(-1.2)


def test_bruteforce_backend(t1):
    cands = [Tabular((np.zeros(2, int), np.array(a))) for a in ([0, 0], [1, 1], [0, 1])]
    oracle = CscOracle(t1, "bruteforce", candidates=cands)
    res = oracle.solve_matrix(2, np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert res.policy == cands[0] and res.objective == 1.0
    assert oracle.calls == 1
    with pytest.raises(ValueError):
        CscOracle(t1, "bruteforce").solve_matrix(2, np.ones((2, 2)))
    with pytest.raises(ValueError):
        CscOracle(t1, "nope")


def test_objective_is_exactly_rounded():
    phi = np.zeros((1, 2, 1))
    mdp = feature_mdp(phi)
    inst = CscInstance(1, [1e16, 1.0, -1e16], [0, 0, 0], [0, 0, 0])
    assert csc_objective(inst, mdp, LinearArgmax(np.zeros(1))) == 1.0


def test_delta_to_csc_hand_computed():
    phi_h = np.array([[1.0, 0.0], [0.0, 1.0]])
    theta = np.array([0.5, 0.25])
    inst = delta_to_csc(2, np.array([0, 1]), np.array([1, 0]), phi_h, np.array([1.0, 0.0]), np.array([0.75, 2.0]), theta, 1, 3)
    # trajectory 1: 3 * 1 * (0.75 - 0.5) / 2, trajectory 2: gated off
    np.testing.assert_allclose(inst.costs, [-0.375, 0.0])
    inst = delta_to_csc(2, np.array([0, 1]), np.array([1, 0]), phi_h, np.ones(2), np.array([0.75, 2.0]), theta, -1, 3)
    np.testing.assert_allclose(inst.costs, [0.375, 3 * (2.0 - 0.25) / 2])


def test_growth_bound_examples():
    assert growth_bound(3, 3, 1) == pytest.approx(81.0**16)
    assert growth_bound(10, 2, 2) < growth_bound(11, 2, 2)
    assert growth_bound(10**6, 40, 5) == math.inf
    assert log_growth_bound(3, 3, 1) == pytest.approx(16 * math.log(81))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_cells_argmin_equals_exhaustive_minimum(seed):
    rng = np.random.default_rng(seed)
    n_states, A = int(rng.integers(1, 6)), int(rng.integers(1, 4))
    mdp = feature_mdp(random_features(rng, n_states, A, 2))
    n = int(rng.integers(1, 11))
    inst = CscInstance(1, rng.normal(size=n), rng.integers(0, n_states, size=n), rng.integers(0, A, size=n))
    res = csc_argmin(inst, mdp)
    assert res.objective == exhaustive_minimum(inst, mdp)
