import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lfpp.errors import CapacityError, DomainError, StructuralError, UnreachableError
from lfpp.fpp import (LatticePath, WeightedLattice, bfs_oracle, exhaustive_oracle, fpp_distance, path_weight,
                      validate_path)


def random_lattice(seed, w, h, gamma):
    rng = np.random.default_rng(seed)
    return WeightedLattice.from_values(rng.standard_normal((h, w)), gamma)


def test_same_vertex_is_zero():
    lat = random_lattice(0, 5, 5, 1.0)
    r = fpp_distance(lat, (2, 3), (2, 3))
    assert r.distance == 0 and r.path.vertices == ((2, 3),)


def test_adjacent_at_gamma_zero():
    lat = random_lattice(1, 4, 4, 0.0)
    r = fpp_distance(lat, (1, 1), (2, 1))
    assert r.distance == 2 and r.path.vertices == ((1, 1), (2, 1))


def test_path_weight_examples():
    lat = WeightedLattice.from_values(np.array([[0.0, math.log(2), 0.0]]), 1.0)
    assert path_weight(lat, LatticePath(((0, 0), (1, 0), (2, 0)))) == 4
    assert path_weight(lat, LatticePath(((1, 0),))) == pytest.approx(2.0)
    flat = WeightedLattice.from_values(np.zeros((3, 6)), 0.0)
    assert path_weight(flat, LatticePath(tuple((i, 1) for i in range(6)))) == 6


@pytest.mark.parametrize("verts", [((0, 0), (1, 1)), ((0, 0), (1, 0), (0, 0)), ((0, 0), (9, 0)), ()])
def test_invalid_paths(verts):
    lat = random_lattice(2, 3, 3, 1.0)
    with pytest.raises(StructuralError):
        validate_path(lat, LatticePath(verts))


def test_bfs_examples():
    lat = random_lattice(3, 6, 6, 0.0)
    assert bfs_oracle(lat, (2, 2), (2, 2)) == 0
    assert bfs_oracle(lat, (2, 2), (2, 3)) == 1
    for k in (2, 4, 6):
        assert bfs_oracle(lat, (0, 0), (k - 1, k - 1)) == 2 * (k - 1)


def test_exhaustive_examples():
    lat = random_lattice(4, 3, 3, 0.0)
    assert exhaustive_oracle(lat, (0, 0), (2, 2)) == 5
    assert exhaustive_oracle(lat, (1, 1), (1, 1)) == 0
    r = random_lattice(5, 3, 3, 1.0)
    assert fpp_distance(r, (0, 0), (2, 2)).distance == exhaustive_oracle(r, (0, 0), (2, 2))
    with pytest.raises(CapacityError):
        exhaustive_oracle(random_lattice(6, 5, 4, 1.0), (0, 0), (1, 1))


def test_oracle_equivalence_100_instances():
    rng = np.random.default_rng(11)
    for t in range(100):
        side = 3 if t % 2 == 0 else 4
        gamma = (0.0, 0.5, 1.0)[t % 3]
        lat = random_lattice(1000 + t, side, side, gamma)
        v = tuple(int(c) for c in rng.integers(0, side, 2))
        w = tuple(int(c) for c in rng.integers(0, side, 2))
        if v == w:
            w = ((v[0] + 1) % side, v[1])
        r = fpp_distance(lat, v, w)
        assert r.distance == exhaustive_oracle(lat, v, w)
        assert r.distance == path_weight(lat, r.path)
        assert r.path.vertices[0] == v and r.path.vertices[-1] == w


def test_gamma_zero_reduction_100_instances():
    rng = np.random.default_rng(12)
    for t in range(100):
        lat = random_lattice(2000 + t, 64, 64, 0.0)
        v = tuple(int(c) for c in rng.integers(0, 64, 2))
        w = tuple(int(c) for c in rng.integers(0, 64, 2))
        if v == w:
            continue
        r = fpp_distance(lat, v, w)
        assert r.distance == bfs_oracle(lat, v, w) + 1
        assert len(r.path) == r.distance


def test_region_restriction_and_unreachable():
    lat = random_lattice(7, 5, 5, 0.0)
    wall = lambda i, j: i != 2  # noqa: E731
    with pytest.raises(UnreachableError):
        fpp_distance(lat, (0, 0), (4, 0), region=wall)
    gap = lambda i, j: (i != 2) | (j == 4)  # noqa: E731
    r = fpp_distance(lat, (0, 0), (4, 0), region=gap)
    assert r.distance == 13 and all(v[0] != 2 or v[1] == 4 for v in r.path.vertices)
    with pytest.raises(DomainError):
        fpp_distance(lat, (2, 0), (4, 0), region=wall)


def test_deterministic_tie_break():
    lat = random_lattice(8, 6, 6, 0.0)
    a = fpp_distance(lat, (0, 0), (5, 5))
    b = fpp_distance(lat, (0, 0), (5, 5))
    assert a.path == b.path


def test_nonpositive_weights_rejected():
    from lfpp.fields import GridSpec
    with pytest.raises(StructuralError):
        WeightedLattice(GridSpec(2, 1, 1.0), 1.0, np.array([[1.0, 0.0]]))
    with pytest.raises(DomainError):
        WeightedLattice.from_values(np.zeros((2, 2)), -0.1)


lattice_case = st.tuples(st.integers(2, 7), st.integers(2, 7), st.integers(0, 10 ** 6),
                         st.sampled_from([0.0, 0.5, 1.0, 2.0]))


@given(lattice_case, st.data())
def test_symmetry(case, data):
    w, h, seed, gamma = case
    lat = random_lattice(seed, w, h, gamma)
    v = (data.draw(st.integers(0, w - 1)), data.draw(st.integers(0, h - 1)))
    u = (data.draw(st.integers(0, w - 1)), data.draw(st.integers(0, h - 1)))
    assert fpp_distance(lat, v, u).distance == fpp_distance(lat, u, v).distance


@given(lattice_case, st.data())
def test_upper_bound_by_explicit_path(case, data):
    w, h, seed, gamma = case
    lat = random_lattice(seed, w, h, gamma)
    v = (data.draw(st.integers(0, w - 1)), data.draw(st.integers(0, h - 1)))
    u = (data.draw(st.integers(0, w - 1)), data.draw(st.integers(0, h - 1)))
    if u == v:
        return
    # an L-shaped path: move along x first, then y
    xs = range(v[0], u[0] + (1 if u[0] >= v[0] else -1), 1 if u[0] >= v[0] else -1)
    path = [(x, v[1]) for x in xs]
    step = 1 if u[1] >= v[1] else -1
    path += [(u[0], y) for y in range(v[1] + step, u[1] + step, step)]
    assert fpp_distance(lat, v, u).distance <= path_weight(lat, LatticePath(tuple(path)))


@given(lattice_case, st.integers(0, 10 ** 6))
def test_region_monotonicity(case, mseed):
    w, h, seed, gamma = case
    lat = random_lattice(seed, w, h, gamma)
    rng = np.random.default_rng(mseed)
    small = rng.random((h, w)) < 0.7
    big = small | (rng.random((h, w)) < 0.5)
    small[0, 0] = small[h - 1, w - 1] = True
    big |= small
    try:
        d_small = fpp_distance(lat, (0, 0), (w - 1, h - 1), region=small).distance
    except UnreachableError:
        return
    d_big = fpp_distance(lat, (0, 0), (w - 1, h - 1), region=big).distance
    d_all = fpp_distance(lat, (0, 0), (w - 1, h - 1)).distance
    assert d_all <= d_big <= d_small


@given(st.integers(2, 4), st.integers(2, 4), st.integers(0, 10 ** 6), st.sampled_from([0.0, 0.5, 1.0]))
def test_exhaustive_agreement_property(w, h, seed, gamma):
    lat = random_lattice(seed, w, h, gamma)
    assert fpp_distance(lat, (0, 0), (w - 1, h - 1)).distance == exhaustive_oracle(lat, (0, 0), (w - 1, h - 1))
