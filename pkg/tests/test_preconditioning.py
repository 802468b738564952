import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opsdp.fixtures import fixture
from opsdp.policies import LinearArgmax, Tabular, Uniform, varphi_norms
from opsdp.preconditioning import (
    d_nu,
    extend,
    fit_threshold,
    initial,
    length_budget,
    linear_fit_or_precondition,
    validate,
)
from opsdp.realizability import enumerate_theta, range_profile


def test_initial_matrix():
    p = initial(2, 3, 1e-3)
    np.testing.assert_allclose(p.matrix, 2 * np.eye(3))
    np.testing.assert_allclose(np.linalg.inv(p.matrix @ p.matrix), np.eye(3) / 4)
    assert p.k == 0 and validate(p, np.ones((2, 3))).valid


def test_extend_examples():
    p = initial(1, 3, 0.1)
    assert extend(p, np.zeros(3)) is p
    q = extend(p, np.eye(3)[0])
    assert q.k == 1
    np.testing.assert_allclose(q.matrix, np.diag([1 / np.sqrt(2), 1.0, 1.0]), atol=1e-12)
    with pytest.raises(ValueError):
        extend(p, np.ones(2))
    with pytest.raises(ValueError):
        extend(p, np.array([np.nan, 0.0, 0.0]))


def test_extend_rebuilds_from_vector_list():
    rng = np.random.default_rng(0)
    p = initial(3, 4, 0.01)
    for _ in range(5):
        w = rng.normal(size=4)
        q = extend(p, w)
        before = np.linalg.inv(p.matrix @ p.matrix)
        after = np.linalg.inv(q.matrix @ q.matrix)
        np.testing.assert_allclose(after - before, np.outer(w, w), atol=1e-8)
        rebuilt = initial(3, 4, 0.01)
        for v in q.ws:
            rebuilt = extend(rebuilt, v)
        np.testing.assert_array_equal(rebuilt.matrix, q.matrix)
        p = q


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_extend_shrinks_every_eigenvalue(seed):
    rng = np.random.default_rng(seed)
    p = initial(2, 3, 0.01)
    for _ in range(3):
        q = extend(p, rng.normal(size=3) * rng.uniform(0, 3))
        assert np.all(np.linalg.eigvalsh(q.matrix) <= np.linalg.eigvalsh(p.matrix) + 1e-12)
        # Loewner order, not only the sorted spectra
        assert np.linalg.eigvalsh(p.matrix - q.matrix).min() >= -1e-12
        p = q


def test_validate_reports_norm_violation():
    p = extend(initial(2, 2, 0.5), np.array([3.0, 0.0]))
    rep = validate(p, np.zeros((1, 2)))
    assert not rep.valid
    assert rep.norm_margins[0] == pytest.approx(2.0 - 3.0)
    assert any(f.startswith("norm[0]") for f in rep.failures())


def test_validate_reports_theta_violation():
    p = extend(initial(2, 2, 0.01), np.array([1.0, 0.0]))
    rep = validate(p, np.array([[2.0, 0.0]]))
    assert rep.theta_margins[0] == pytest.approx(-1.0) and not rep.valid


def test_budget_formulas():
    assert length_budget(3, 2, 1e-3) == pytest.approx(12 * np.log(1 + 16 * 2**4 * 1e12))
    assert d_nu(3, 2, 1e-3) == pytest.approx(15 * np.log(1 + 16 * 2**4 * 1e12))
    # tiny nu must not overflow
    assert np.isfinite(d_nu(3, 2, 1e-120))


def test_zero_function_takes_fit_branch(t1):
    p = initial(2, 8, 1e-3, 2)
    res = linear_fit_or_precondition(t1, 1, 2, np.zeros(2), [Uniform()], LinearArgmax(np.zeros(8)), p, 1e-2, 1e-3, 1e-6)
    assert res.fitted and not np.any(res.theta) and not np.any(res.deltas)


def test_one_hot_admissible_function_fits(t1):
    prof = range_profile(t1, 2)
    f = (prof.rg_design >= 1e-3) * np.array([0.7, -0.4])
    psi = [Uniform(), Tabular((np.array([0, 1]), np.zeros(2, int))), Tabular((np.array([1, 1]), np.zeros(2, int)))]
    p = initial(2, 8, 1e-3, 2)
    res = linear_fit_or_precondition(t1, 1, 2, f, psi, LinearArgmax(np.zeros(8)), p, 1e-2, 1e-3, 1e-6, threshold=1e-6)
    assert res.fitted
    assert np.max(np.abs(res.deltas)) <= 1e-6


P1_PSI = [Uniform()] + [Tabular((np.array(t), np.zeros(3, int))) for t in [(0, 0, 0), (1, 1, 1), (0, 1, 0), (1, 0, 1)]]


def test_precondition_branch_returns_valid_witness():
    mdp = fixture("P1")
    thetas = enumerate_theta(mdp, 2).thetas
    p = initial(2, 3, 1e-3, 2)
    res = linear_fit_or_precondition(
        mdp, 1, 2, np.array([1.0, 0.0, 0.0]), P1_PSI, LinearArgmax(np.zeros(3)), p, 1e-2, 1e-3, 1e-6, threshold=1e-4
    )
    assert not res.fitted and np.any(res.w)
    assert np.max(np.abs(res.deltas)) > 1e-4
    q = extend(p, res.w)
    assert validate(q, thetas).valid
    assert np.linalg.norm(p.matrix @ res.w) >= 0.5 - 1e-8


def test_loop_mode_extends_until_fit():
    mdp = fixture("P1")
    thetas = enumerate_theta(mdp, 2).thetas
    p = initial(2, 3, 1e-3, 2)
    res = linear_fit_or_precondition(
        mdp, 1, 2, np.array([1.0, 0.0, 0.0]), P1_PSI, LinearArgmax(np.zeros(3)), p, 1e-2, 1e-3, 1e-6,
        threshold=1e-4, loop=True,
    )
    assert res.fitted and res.passes == len(res.ws) + 1
    for w in res.ws:
        p = extend(p, w)
    assert validate(p, thetas).valid and p.k <= p.budget
    # the range proxy inequality holds for the grown preconditioner
    prof = range_profile(mdp, 2)
    assert np.all(prof.rg_design <= np.sqrt(p.d_nu) * varphi_norms(mdp, 2, p.matrix) + 1e-8)


def test_fit_threshold_is_positive_and_needs_h_before_ell(t1):
    assert fit_threshold(3, 2, 1e-3, 1e-6, 1e-2, 1.0) > 0
    with pytest.raises(ValueError):
        linear_fit_or_precondition(t1, 2, 2, np.zeros(2), [Uniform()], Uniform(), initial(2, 8, 1e-3), 1e-2, 1e-3, 1e-6)
