import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lfpp import seeding
from lfpp.errors import DomainError, ResolutionError, UnreachableError
from lfpp.fields import FieldGenerator, FieldSample
from lfpp.lqg import (Ball, ball_mass, ball_masses, build_measure, cell_grid, chain_to_csv, cover_segment,
                      cover_to_json, dyadic_candidates, graph_distance, lgd_chain, lqg_field)


def flat_field(n, value=0.0):
    g = cell_grid(n)
    return FieldSample(g, np.full(g.shape, float(value)), (2.0 ** -n, 1.0), FieldGenerator.EtaBand, 0)


def brute_mass(g, center, radius):
    X, Y = np.meshgrid(g.grid.xs(), g.grid.ys())
    inside = (X - center[0]) ** 2 + (Y - center[1]) ** 2 <= radius * radius
    return math.fsum(g.masses[inside].tolist())


def lebesgue_ball_masses(n, kmax):
    """gamma = 0 mass of a radius 2^-k-1 ball centred on a point of the 2^-k-1 grid, k = 1..kmax."""
    g = build_measure(flat_field(n), 0.0, n)
    return [brute_mass(g, (0.5, 0.5), 2.0 ** (-k - 1)) for k in range(1, kmax + 1)]


def delta_for_level(mu, k, frac=0.5):
    """delta with mu_k <= delta^2 < mu_{k-1}, placed at a log-fraction between them."""
    lo = mu[k - 1]
    hi = mu[k - 2] if k >= 2 else 3 * mu[0]
    return math.sqrt(lo ** (1 - frac) * hi ** frac)


# -- measure -----------------------------------------------------------------

def test_gamma_zero_is_lebesgue():
    g = build_measure(lqg_field(5, 3), 0.0, 5)
    assert np.all(g.masses == 4.0 ** -5)
    assert g.total == 1.0


def test_zero_field_gamma_one_cell_mass():
    g = build_measure(flat_field(3), 1.0, 3)
    assert np.allclose(g.masses, 2 ** -1.5 * 4.0 ** -3, rtol=1e-15, atol=0)


def test_total_mass_stable_across_n():
    means = []
    for n in (4, 5, 6):
        tot = [build_measure(lqg_field(n, seeding.replica_seed(50 + n, r)), 0.5, n).total for r in range(200)]
        means.append(np.mean(tot))
    print("mean total mass, n = 4, 5, 6:", means)
    assert max(means) / min(means) < 1.5


def test_quadtree_consistency():
    g = build_measure(lqg_field(7, 4), 1.2, 7)
    assert g.quadtree_defect() < 1e-12
    assert abs(g.total - math.fsum(g.masses.ravel().tolist())) < 1e-12 * g.total


def test_build_measure_rejects_mismatch():
    with pytest.raises(DomainError):
        build_measure(lqg_field(5, 1), 0.5, 6)
    f = lqg_field(5, 1)
    bad = FieldSample(f.grid, f.values, (2.0 ** -4, 1.0), f.generator, f.seed)
    with pytest.raises(DomainError):
        build_measure(bad, 0.5, 5)


# -- ball masses -------------------------------------------------------------

def test_gamma_zero_ball_near_area():
    n = 8
    g = build_measure(flat_field(n), 0.0, n)
    h = 2.0 ** -n
    for c, r in [((0.5, 0.5), 0.2), ((0.31, 0.62), 0.137), ((0.7, 0.3), 0.05)]:
        m = ball_mass(g, Ball(c, r))
        assert m == brute_mass(g, c, r)
        assert abs(m - math.pi * r * r) <= 2 * math.pi * r * math.sqrt(2) * h


def test_tiny_ball_is_one_cell():
    g = build_measure(lqg_field(6, 8), 0.7, 6)
    h = g.mesh
    for i, j in [(0, 0), (17, 40), (63, 63)]:
        x, y = (i + 0.5) * h, (j + 0.5) * h
        assert ball_mass(g, Ball((x, y), 0.4 * h)) == g.masses[j, i]


def test_disjoint_balls_additive():
    g = build_measure(lqg_field(7, 9), 0.8, 7)
    b1, b2 = Ball((0.3, 0.3), 0.15), Ball((0.7, 0.6), 0.2)
    X, Y = np.meshgrid(g.grid.xs(), g.grid.ys())
    union = ((X - 0.3) ** 2 + (Y - 0.3) ** 2 <= 0.15 ** 2) | ((X - 0.7) ** 2 + (Y - 0.6) ** 2 <= 0.2 ** 2)
    assert ball_mass(g, b1) + ball_mass(g, b2) == pytest.approx(math.fsum(g.masses[union].tolist()), rel=1e-13)


def test_ball_validation():
    with pytest.raises(DomainError):
        Ball((0.5, 0.5), 0.0)


@given(st.integers(0, 10 ** 6), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(1e-3, 0.8))
def test_ball_mass_matches_enumeration(seed, x, y, r):
    g = build_measure(lqg_field(5, seed), 0.9, 5)
    assert ball_mass(g, Ball((x, y), r)) == pytest.approx(brute_mass(g, (x, y), r), rel=1e-12, abs=1e-300)


@given(st.integers(0, 10 ** 6), st.floats(0.05, 0.95), st.floats(0.05, 0.95),
       st.lists(st.floats(1e-3, 0.7), min_size=2, max_size=6))
def test_ball_mass_monotone_in_radius(seed, x, y, radii):
    g = build_measure(lqg_field(5, seed), 1.0, 5)
    radii = sorted(radii)
    m = ball_masses(g, np.tile([x, y], (len(radii), 1)), np.array(radii))
    assert np.all(np.diff(m) >= 0)


# -- covers --------------------------------------------------------------------

def test_cover_closed_form_gamma_zero():
    n = 10
    mu = lebesgue_ball_masses(n, 6)
    g = build_measure(flat_field(n), 0.0, n)
    for k in range(1, 6):
        for frac in (0.25, 0.75):
            d = delta_for_level(mu, k, frac)
            c = cover_segment(g, d)
            assert c.certified and c.count == 2 ** (k - 1) and set(c.levels) == {k}


def test_cover_single_ball_for_large_delta():
    g = build_measure(lqg_field(6, 2), 0.5, 6)
    top = ball_mass(g, Ball((0.5, 0.5), 0.25))
    c = cover_segment(g, min(0.999, math.sqrt(top) * 1.01))
    assert c.count == 1 and c.levels == [1] and c.certified


def test_cover_gamma_continuity():
    n = 8
    mu = lebesgue_ball_masses(n, 5)
    for t in range(10):
        k = 1 + t % 5
        d = delta_for_level(mu, k)
        g = build_measure(lqg_field(n, seeding.replica_seed(60, t)), 1e-6, n)
        assert cover_segment(g, d).count == 2 ** (k - 1)


@given(st.integers(0, 10 ** 6), st.floats(0.0625, 0.9), st.sampled_from([0.3, 0.8, 1.5]))
def test_cover_soundness(seed, delta, gamma):
    g = build_measure(lqg_field(6, seed), gamma, 6)
    c = cover_segment(g, delta)
    assert c.certified or c.uncovered
    assert all(m <= delta * delta for m in c.masses)
    if c.certified and not c.uncovered:
        c.raise_if_uncovered()


def test_cover_uncovered_reported():
    g = build_measure(flat_field(4, 30.0), 1.0, 4)
    c = cover_segment(g, 0.5)
    assert c.uncovered and not c.certified
    with pytest.raises(UnreachableError):
        c.raise_if_uncovered()


def test_cover_delta_guard():
    g = build_measure(flat_field(6), 0.0, 6)
    with pytest.raises(ResolutionError):
        cover_segment(g, 2.0 ** -5)
    with pytest.raises(DomainError):
        cover_segment(g, 1.0)


def test_cover_json(tmp_path):
    g = build_measure(flat_field(6), 0.0, 6)
    c = cover_segment(g, 0.3)
    cover_to_json(c, tmp_path / "c.json")
    rec = json.load(open(tmp_path / "c.json"))
    assert rec["count"] == c.count and len(rec["balls"]) == c.count
    assert rec["balls"][0]["mass"] == c.masses[0]


# -- graph distance ------------------------------------------------------------

def test_lgd_same_point():
    g = build_measure(lqg_field(6, 1), 0.5, 6)
    assert graph_distance(g, 0.3, (0.4, 0.4), (0.4, 0.4)) == 0


@pytest.mark.parametrize("k,v,w", [(2, (0.25, 0.5), (0.75, 0.5)), (3, (0.25, 0.5), (0.75, 0.5)),
                                   (3, (0.125, 0.5), (0.875, 0.5)), (4, (0.3125, 0.5), (0.5625, 0.5))])
def test_lgd_gamma_zero_closed_form(k, v, w):
    n = 8
    mu = lebesgue_ball_masses(n, 6)
    g = build_measure(flat_field(n), 0.0, n)
    d = delta_for_level(mu, k)
    res = lgd_chain(g, d, v, w)
    s = 2.0 ** -k
    assert res.count == round(abs(w[0] - v[0]) / s) + 1
    assert res.upper_bound
    assert all(b.radius == s / 2 for b in res.chain)


def test_lgd_monotone_in_delta():
    deltas = [0.6, 0.4, 0.3, 0.2, 0.15, 0.1, 0.0625]
    for t in range(20):
        g = build_measure(lqg_field(6, seeding.replica_seed(70, t)), 0.5, 6)
        counts = []
        for d in deltas:
            try:
                counts.append(graph_distance(g, d, (0.25, 0.5), (0.75, 0.5)))
            except UnreachableError:
                counts.append(math.inf)
        assert all(a <= b for a, b in zip(counts, counts[1:])), counts


def test_lgd_chain_is_connected_and_admissible():
    g = build_measure(lqg_field(7, 5), 0.6, 7)
    d = 0.2
    res = lgd_chain(g, d, (0.2, 0.3), (0.8, 0.7))
    assert res.chain[0].contains(0.2, 0.3) and res.chain[-1].contains(0.8, 0.7)
    for a, b in zip(res.chain, res.chain[1:]):
        dist = math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
        assert dist <= a.radius + b.radius + 1e-12
    assert all(m <= d * d for m in res.masses)
    assert len(res.chain) == res.count


def test_lgd_unreachable_behind_heavy_wall():
    n = 5
    vals = np.zeros((2 ** n, 2 ** n))
    vals[:, 14:18] = 40.0
    f = FieldSample(cell_grid(n), vals, (2.0 ** -n, 1.0), FieldGenerator.EtaBand, 0)
    g = build_measure(f, 1.0, n)
    with pytest.raises(UnreachableError):
        lgd_chain(g, 0.2, (0.2, 0.5), (0.8, 0.5), kmax=n - 1)


def test_dyadic_candidates_filter():
    g = build_measure(lqg_field(6, 3), 1.0, 6)
    cand = dyadic_candidates(g, 0.2)
    assert cand.levels == list(range(1, 7))
    for c, r, m in zip(cand.centers, cand.radii, cand.masses):
        assert np.all(m <= 0.04)
        for (x, y), mm in zip(c[:5], m[:5]):
            assert mm == pytest.approx(brute_mass(g, (x, y), r), rel=1e-12, abs=1e-300)


def test_chain_csv(tmp_path):
    g = build_measure(flat_field(6), 0.0, 6)
    res = lgd_chain(g, 0.3, (0.25, 0.5), (0.75, 0.5))
    chain_to_csv(res, tmp_path / "c.csv")
    lines = open(tmp_path / "c.csv").read().splitlines()
    assert lines[0] == "step,x,y,radius,mass" and len(lines) == res.count + 1
