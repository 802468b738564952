import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opsdp.csc import CellCapExceeded, bfs_sign_regions, goldberg_bound, sign_tuple
from opsdp.lp import lp_feasible


def test_lp_examples():
    res = lp_feasible(np.array([[1.0, 0.0]]), np.array([False]))
    assert res.feasible and res.theta[0] > 0
    assert not lp_feasible(np.array([[1.0], [-1.0]]), np.array([True, True])).feasible
    assert lp_feasible(np.array([[1.0], [-1.0]]), np.array([False, False])).feasible
    assert not lp_feasible(np.zeros((1, 2)), np.array([True])).feasible
    with pytest.raises(ValueError):
        lp_feasible(np.eye(2), np.array([True]))


def grid_feasible(v, strict, k, steps=41):
    axis = np.linspace(-1, 1, steps)
    pts = np.array(list(itertools.product(axis, repeat=k)))
    vals = pts @ v.T
    ok = np.where(strict, vals > 1e-9, vals >= -1e-12)
    return bool(np.any(np.all(ok, axis=1)))


@pytest.mark.parametrize("seed", range(40))
def test_lp_agrees_with_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    m = int(rng.integers(1, 5))
    # integer normals keep feasible cones wide enough for a grid to see
    v = rng.integers(-2, 3, size=(m, k)).astype(float)
    strict = rng.random(m) < 0.6
    res = lp_feasible(v, strict)
    assert res.feasible == grid_feasible(v, strict, k)
    if res.feasible:
        vals = v @ res.theta
        assert np.all(vals[~strict] >= -1e-12) and np.all(vals[strict] > 0)


def test_one_vector_two_cells():
    cells = bfs_sign_regions(np.array([[1.0]]))
    assert cells.patterns == {(1,), (-1,)}


def test_quadrants():
    cells = bfs_sign_regions(np.eye(2))
    assert len(cells) == 4
    assert cells.patterns == {(1, 1), (1, -1), (-1, 1), (-1, -1)}


def test_zero_vector_only_has_nonnegative_side():
    assert bfs_sign_regions(np.zeros((1, 2))).patterns == {(1,)}


def test_base_constraints_restrict_the_space():
    cells = bfs_sign_regions(np.eye(2), base=[(np.array([1.0, 0.0]), True)])
    assert cells.patterns == {(1, 1), (1, -1)}


def test_cell_cap():
    with pytest.raises(CellCapExceeded):
        bfs_sign_regions(np.random.default_rng(0).normal(size=(6, 3)), cap=5)


def check_cells(v, samples, rng):
    n, k = v.shape
    cells = bfs_sign_regions(v)
    pats = cells.patterns
    assert len(pats) == len(cells), "each sign pattern appears once"
    for i, c in enumerate(cells.cells):
        vals = v @ c.rep
        assert np.all(vals[c.signs > 0] >= -1e-12 * max(1.0, np.linalg.norm(c.rep)))
        assert np.all(vals[c.signs < 0] < 0)
        np.testing.assert_array_equal(cells.normals(i), v * c.signs[:, None])
    thetas = rng.normal(size=(samples, k))
    seen = {tuple(row) for row in np.where(thetas @ v.T >= 0, 1, -1)}
    missing = seen - pats
    assert not missing
    assert len(cells) <= goldberg_bound(n, k)
    return cells


@pytest.mark.parametrize("seed", range(5))
def test_random_family_soundness_and_coverage(seed):
    rng = np.random.default_rng(seed)
    check_cells(rng.normal(size=(6, 3)), 100_000, rng)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 7))
def test_cells_property(seed, k, n):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, k))
    if rng.random() < 0.3 and n > 1:
        v[-1] = -2.0 * v[0]  # antiparallel pair
    check_cells(v, 5_000, rng)


def test_sign_tuple_convention():
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(sign_tuple(v, np.array([0.0, -1.0])), [1, -1])


def test_goldberg_bound_value():
    assert goldberg_bound(4, 2) == pytest.approx((16 * math.e) ** 2)
