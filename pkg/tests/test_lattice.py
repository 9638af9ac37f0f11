import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smalldiv.lattice import (LatticeError, MultiIndex, Site, SiteBox, SiteSet, box_sites,
                              shift_time, sup_distance)


def S(l, j, a):
    return Site.make(l, j, a)


def test_sup_distance_examples():
    k = S((1,), (0,), 0)
    assert sup_distance(k, k) == 0
    assert sup_distance(S((1,), (0,), 0), S((0,), (0,), 1)) == 1
    assert sup_distance(S((3,), (-2,), 0), S((0,), (2,), 0)) == 4


def test_sup_distance_dimension_mismatch():
    with pytest.raises(LatticeError):
        sup_distance(S((1,), (0,), 0), S((1, 2), (0,), 0))


def test_box_sizes():
    assert len(box_sites((0,), (0,), 1)) == 18
    box = box_sites((0,), (5,), 2)
    assert len(box) == 50
    assert set(box.space[:, 0]) == set(range(3, 8))
    assert len(box_sites((0, 0), (0,), 2)) == 2 * 5 ** 3


def test_box_rejects_zero_radius():
    with pytest.raises(LatticeError):
        box_sites((0,), (0,), 0)


def test_box_sites_within_radius():
    box = box_sites((2,), (-1,), 3)
    c = S((2,), (-1,), 0)
    assert all(sup_distance(k, c) <= 3 for k in box)


def test_shift_time():
    k = S((1,), (2,), 0)
    assert shift_time(k, (0,)) == k
    assert shift_time(k, (-1,)) == S((0,), (2,), 0)
    assert shift_time(shift_time(k, (5,)), (-5,)) == k


def test_canonical_order_is_lexicographic():
    box = box_sites((0,), (0, 0), 1)
    tuples = [k.as_tuple() for k in box]
    assert tuples == sorted(tuples)


@pytest.mark.parametrize("nu,d,N", [(1, 1, 1), (1, 1, 3), (2, 1, 2), (1, 2, 1)])
def test_box_index_roundtrip(nu, d, N):
    box = box_sites((1,) * nu, (-2,) * d, N)
    idx = box.lookup(box.array)
    assert np.array_equal(idx, np.arange(len(box)))
    for k in range(0, len(box), 7):
        assert box.index(box.site(k)) == k
    # the generic site-set lookup agrees with the closed-form box lookup
    generic = SiteSet(box.array, nu, d)
    assert np.array_equal(generic.lookup(box.array), idx)


site_st = st.tuples(st.integers(-20, 20), st.integers(-20, 20), st.integers(0, 1))


@given(site_st, site_st, site_st)
def test_sup_distance_metric(x, y, z):
    a, b, c = (S((p[0],), (p[1],), p[2]) for p in (x, y, z))
    assert sup_distance(a, b) == sup_distance(b, a)
    assert sup_distance(a, c) <= sup_distance(a, b) + sup_distance(b, c)
    assert (sup_distance(a, b) == 0) == (a == b)


@given(st.lists(st.integers(-50, 50), min_size=1, max_size=4))
def test_jnorm_bounds(j):
    m = MultiIndex((0,), tuple(j))
    sup = max(abs(x) for x in j)
    assert sup * sup <= m.jnorm2() <= len(j) * sup * sup
    assert m.norm() == sup


def test_siteset_operations():
    box = box_sites((0,), (0,), 1)
    half = box.subset(box.bit == 0)
    assert len(half) == 9
    assert half.issubset(box)
    assert len(box.difference(half)) == 9
    assert half.union(box) == box
    assert box.diameter() == 2
    with pytest.raises(LatticeError):
        half.lookup(box.array)
