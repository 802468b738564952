import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opsdp.mdp import LayeredMdp, q_values_dp
from opsdp.policies import (
    Composed,
    GatedBenchmark,
    LinearArgmax,
    Tabular,
    Uniform,
    compose,
    dtilde,
    first_argmax,
    policy_from_dict,
    varphi,
    varphi_layer,
    varphi_norms,
)
from opsdp.realizability import design_range_values, range_profile

from conftest import random_mdp


def test_zero_theta_picks_action_zero(t1):
    for h in (1, 2):
        assert np.all(LinearArgmax(np.zeros(8)).actions(t1, h) == 0)


def test_one_hot_argmax_reads_q_table(t1):
    pi = Tabular((np.array([1, 0]), np.array([0, 1])))
    qt = q_values_dp(t1, pi)
    for h in (1, 2):
        pol = LinearArgmax(qt.theta[h - 1])
        np.testing.assert_array_equal(pol.actions(t1, h), qt.q[h - 1].argmax(axis=1))


def test_gate_never_fires_for_large_gamma(t1):
    rng = np.random.default_rng(0)
    thetas = rng.normal(size=(3, 8))
    gamma = 2 * t1.horizon * np.linalg.norm(thetas, axis=1).max() + 1.0
    first, second = LinearArgmax(rng.normal(size=8)), LinearArgmax(rng.normal(size=8))
    pol = GatedBenchmark(thetas, gamma, first, second)
    for h in (1, 2):
        np.testing.assert_array_equal(pol.actions(t1, h), second.actions(t1, h))


def test_gamma_must_be_positive():
    with pytest.raises(ValueError):
        GatedBenchmark(np.ones((1, 2)), 0.0, LinearArgmax(np.zeros(2)), LinearArgmax(np.zeros(2)))


def test_compose_endpoints(t1):
    a, b = Tabular((np.array([0, 0]), np.array([0, 0]))), Tabular((np.array([1, 1]), np.array([1, 1])))
    for h in (1, 2):
        np.testing.assert_array_equal(compose(a, 1, b, 2).actions(t1, h), b.actions(t1, h))
        np.testing.assert_array_equal(compose(a, 3, b, 2).actions(t1, h), a.actions(t1, h))
    with pytest.raises(ValueError):
        compose(a, 4, b, 2)
    with pytest.raises(ValueError):
        compose(a, 0, b)


def test_nested_composition_pointwise():
    rng = np.random.default_rng(5)
    mdp = random_mdp(rng, sizes=(2, 2, 2, 2))
    pols = [Tabular(tuple(rng.integers(0, 2, size=2) for _ in range(4))) for _ in range(3)]
    nested = compose(compose(pols[0], 2, pols[1]), 3, pols[2])
    for h, owner in zip(range(1, 5), (0, 1, 2, 2)):
        np.testing.assert_array_equal(nested.actions(mdp, h), pols[owner].actions(mdp, h))


def test_uniform_probs(t1):
    np.testing.assert_allclose(Uniform().probs(t1, 1), np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        Uniform().actions(t1, 1)
    assert not compose(Uniform(), 2, LinearArgmax(np.zeros(8))).is_deterministic(1)
    assert compose(Uniform(), 2, LinearArgmax(np.zeros(8))).is_deterministic(2)


def test_policy_round_trip():
    rng = np.random.default_rng(1)
    gated = GatedBenchmark(rng.normal(size=(2, 3)), 0.3, LinearArgmax(rng.normal(size=3)), LinearArgmax(rng.normal(size=3)))
    pols = [
        Uniform(),
        LinearArgmax(rng.normal(size=3)),
        gated,
        Composed(Uniform(), 2, gated),
        Tabular((np.array([0, 1]), np.array([1]))),
    ]
    for pol in pols:
        back = policy_from_dict(pol.to_dict())
        assert back == pol and hash(back) == hash(pol)
    with pytest.raises(ValueError):
        policy_from_dict({"kind": "nope"})


def test_first_argmax_ties_go_to_smallest_index():
    np.testing.assert_array_equal(first_argmax(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])), [0, 1])
    np.testing.assert_array_equal(first_argmax(np.array([[1.0, 1.0 + 1e-14]])), [0])


def test_varphi_examples():
    single = np.random.default_rng(0).normal(size=(3, 1, 4))
    np.testing.assert_array_equal(varphi_layer(single, np.eye(4)), np.zeros((3, 4)))
    two = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    out = varphi_layer(two, np.eye(2))[0]
    # pairs scanned (0,0),(0,1),(1,0),(1,1): the first maximizer is (0,1)
    np.testing.assert_allclose(out, [1.0, -1.0])
    assert np.linalg.norm(out) == pytest.approx(np.sqrt(2))


def test_varphi_matches_exhaustive_pair_scan():
    rng = np.random.default_rng(3)
    phi = rng.normal(size=(4, 3, 2))
    w = rng.normal(size=(2, 2))
    out = varphi_layer(phi, w)
    for x in range(4):
        best, arg = -1.0, None
        for a in range(3):
            for b in range(3):
                val = w @ (phi[x, a] - phi[x, b])
                if val @ val > best:
                    best, arg = val @ val, val
        np.testing.assert_allclose(out[x], arg)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_varphi_norm_invariant_under_action_relabeling_and_bounded(seed):
    rng = np.random.default_rng(seed)
    phi = rng.normal(size=(3, 3, 2))
    phi /= np.maximum(1.0, np.linalg.norm(phi, axis=-1, keepdims=True))
    w = rng.normal(size=(2, 2))
    perm = rng.permutation(3)
    n1 = np.linalg.norm(varphi_layer(phi, w), axis=1)
    n2 = np.linalg.norm(varphi_layer(phi[:, perm], w), axis=1)
    np.testing.assert_allclose(n1, n2, rtol=1e-12)
    assert np.all(n1 <= 2 * np.linalg.norm(w, 2) + 1e-12)


def test_varphi_single_state_helpers(t1):
    w = np.eye(8) * 0.5
    np.testing.assert_allclose(varphi(t1, 2, 1, w), varphi_layer(t1.features[1], w)[1])
    np.testing.assert_allclose(varphi_norms(t1, 2, w), np.linalg.norm(varphi_layer(t1.features[1], w), axis=1))


@pytest.mark.parametrize("name", ["t1", "c3", "l1"])
def test_gated_benchmark_reproduces_design_range_gate(name, request):
    mdp = request.getfixturevalue(name)
    rng = np.random.default_rng(0)
    for h in range(1, mdp.horizon + 1):
        prof = range_profile(mdp, h)
        witnesses = prof.theta_set.thetas[prof.design.support]
        rgd = design_range_values(mdp, prof.theta_set, prof.design)
        gamma = float(np.quantile(rgd, 0.5)) if np.any(rgd > 0) else 0.5
        gamma = max(gamma, 1e-6)
        first, second = LinearArgmax(rng.normal(size=mdp.feature_dim)), LinearArgmax(rng.normal(size=mdp.feature_dim))
        pol = GatedBenchmark(witnesses, gamma, first, second)
        expect = np.where(rgd >= gamma, first.actions(mdp, h), second.actions(mdp, h))
        np.testing.assert_array_equal(pol.actions(mdp, h), expect)


def test_dtilde_is_at_least_d():
    for d in range(1, 65):
        assert dtilde(d) >= d
