import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lfpp import seeding
from lfpp.errors import DomainError, ResolutionError, StructuralError
from lfpp.fields import (EtaField, FieldGenerator, FieldSample, GridSpec, WindowedField, decompose_bands,
                         dumps_field, loads_field, quadrature_bias, read_field, sample_eta, slab_partition,
                         write_field)


def point_grid(x=0.5, y=0.5, mesh=1 / 256):
    return GridSpec(1, 1, mesh, (x, y))


def test_grid_world_index_roundtrip():
    g = GridSpec(7, 5, 0.125, (0.3, -0.2))
    I, J = np.meshgrid(np.arange(7), np.arange(5))
    x, y = g.world(I, J)
    fi, fj = g.index_of(x, y)
    assert np.allclose(fi, I, atol=1e-12) and np.allclose(fj, J, atol=1e-12)
    assert g.shape == (5, 7)


@pytest.mark.parametrize("bad", [dict(width=0, height=1, mesh=1.0), dict(width=1, height=1, mesh=0.0),
                                 dict(width=1, height=1, mesh=-1.0)])
def test_grid_rejects_invalid(bad):
    with pytest.raises(DomainError):
        GridSpec(**bad)


def test_equal_band_gives_zero_field():
    f = sample_eta(GridSpec(9, 9, 0.1), 0.5, 0.5, 3)
    assert np.all(f.values == 0.0)


def test_domain_and_resolution_errors():
    with pytest.raises(DomainError):
        sample_eta(GridSpec(3, 3, 0.01), 0.5, 0.25, 1)
    with pytest.raises(ResolutionError):
        sample_eta(GridSpec(3, 3, 0.2), 0.25, 1.0, 1)


def test_field_sample_rejects_nonfinite():
    with pytest.raises(StructuralError):
        FieldSample(GridSpec(2, 1, 1.0), np.array([[0.0, np.nan]]), (0.5, 1.0), FieldGenerator.EtaBand, 0)


def test_determinism_bit_identical():
    g = GridSpec(33, 17, 1 / 64, (0.1, 0.2))
    a = sample_eta(g, 1 / 32, 1.0, 99)
    b = sample_eta(g, 1 / 32, 1.0, 99)
    c = sample_eta(g, 1 / 32, 1.0, 100)
    assert a.values.tobytes() == b.values.tobytes()
    assert not np.array_equal(a.values, c.values)


def test_overlapping_windows_agree():
    f = EtaField(1 / 16, 1.0, 5)
    big = f.evaluate(GridSpec(40, 40, 1 / 32))
    sub = f.evaluate(GridSpec(10, 10, 1 / 32, (10 / 32, 20 / 32)))
    assert np.allclose(big[20:30, 10:20], sub, rtol=0, atol=1e-12)


def test_points_match_grid_evaluation():
    f = EtaField(1 / 8, 1.0, 8)
    g = GridSpec(6, 4, 1 / 16, (0.25, 0.5))
    X, Y = np.meshgrid(g.xs(), g.ys())
    assert np.allclose(f.evaluate(g), f.evaluate_points(X.ravel(), Y.ravel()).reshape(g.shape), atol=1e-12)


def test_windowed_field_matches_direct():
    f = EtaField(1 / 8, 1.0, 4)
    w = WindowedField(f, 1 / 16, tile=(8, 8))
    rng = np.random.default_rng(0)
    x, y = rng.uniform(0, 2, 50), rng.uniform(0, 2, 50)
    direct = FieldSample(GridSpec(33, 33, 1 / 16), f.evaluate(GridSpec(33, 33, 1 / 16)), f.band,
                         FieldGenerator.EtaBand, 4)
    assert np.allclose(w.interpolate(x, y), direct.interpolate(x, y), atol=1e-12)


def test_slab_partition_covers_band():
    for d, dp in [(1 / 8, 1.0), (0.3, 0.7), (2 ** -5, 0.5)]:
        slabs = slab_partition(d, dp)
        assert slabs[0].hi == pytest.approx(dp * dp) and slabs[-1].lo == pytest.approx(d * d)
        for a, b in zip(slabs, slabs[1:]):
            assert a.lo == b.hi


@pytest.mark.parametrize("k", [2, 3, 4, 5])
def test_quadrature_bias_small(k):
    assert abs(quadrature_bias(2.0 ** -k, 1.0)) < 0.02


def test_variance_identity_half():
    """Var eta_{1/2}(v) ~ log 2 (20000 replicas, 3 SE)."""
    R = 20000
    vals = np.array([sample_eta(point_grid(), 0.5, 1.0, seeding.replica_seed(11, r)).values[0, 0]
                     for r in range(R)])
    var = vals.var(ddof=1)
    se = var * math.sqrt(2 / (R - 1))
    assert abs(var - math.log(2)) < 3 * se + abs(quadrature_bias(0.5, 1.0))


def test_variance_eighth():
    R = 20000
    vals = np.array([sample_eta(point_grid(), 0.125, 1.0, seeding.replica_seed(12, r)).values[0, 0]
                     for r in range(R)])
    var = vals.var(ddof=1)
    se = var * math.sqrt(2 / (R - 1))
    target = 3 * math.log(2) + quadrature_bias(0.125, 1.0)
    assert abs(var - target) < 3 * se


def test_band_decomposition_single_band():
    d = decompose_bands(GridSpec(5, 5, 1 / 8), 1, 3)
    assert d.n == 1 and np.array_equal(d.total.values, d.bands[0].values)
    assert d.bands[0].band == (0.5, 1.0)


def test_band_decomposition_sum_exact():
    d = decompose_bands(GridSpec(9, 9, 1 / 16), 3, 4)
    acc = d.bands[0].values.copy()
    for b in d.bands[1:]:
        acc = acc + b.values
    assert np.array_equal(acc, d.total.values)
    assert d.total.band == (0.125, 1.0)
    assert [b.band for b in d.bands] == [(0.5, 1.0), (0.25, 0.5), (0.125, 0.25)]


def test_total_equals_band_sum_as_functions():
    g = GridSpec(9, 9, 1 / 32)
    d = decompose_bands(g, 4, 6)
    tot = EtaField(1 / 16, 1.0, 6).evaluate(g)
    assert np.allclose(d.total.values, tot, atol=1e-12)


def test_bands_uncorrelated():
    R = 5000
    g = GridSpec(1, 1, 1 / 32, (0.5, 0.5))
    b2, b4 = np.empty(R), np.empty(R)
    for r in range(R):
        d = decompose_bands(g, 4, seeding.replica_seed(13, r))
        b2[r] = d.band(2).values[0, 0]
        b4[r] = d.band(4).values[0, 0]
    rho = np.corrcoef(b2, b4)[0, 1]
    assert abs(rho) < 3 / math.sqrt(R)


def test_scaling_property():
    """eta_{delta/2}^{1/2}(x/2) has the law of eta_delta^1(x): variance and 5 covariances within 3 SE."""
    R = 4000
    delta = 0.25
    offs = np.array([0.0, 0.05, 0.1, 0.2, 0.3, 0.5])
    base = np.array([0.5, 0.5])
    A = np.empty((R, offs.size))
    B = np.empty((R, offs.size))
    for r in range(R):
        fa = EtaField(delta, 1.0, seeding.replica_seed(14, r))
        fb = EtaField(delta / 2, 0.5, seeding.replica_seed(15, r))
        A[r] = fa.evaluate_points(base[0] + offs, np.full(offs.size, base[1]))
        B[r] = fb.evaluate_points((base[0] + offs) / 2, np.full(offs.size, base[1] / 2))
    for k in range(offs.size):
        pa, pb = A[:, 0] * A[:, k], B[:, 0] * B[:, k]
        se = math.sqrt(pa.var(ddof=1) / R + pb.var(ddof=1) / R)
        assert abs(pa.mean() - pb.mean()) < 3 * se


def test_field_dump_layout():
    f = sample_eta(GridSpec(3, 2, 0.125, (0.5, 0.25)), 0.25, 1.0, 2 ** 63 + 5)
    buf = dumps_field(f)
    assert buf[:4] == b"LFPP"
    assert int.from_bytes(buf[4:8], "little") == 1
    assert buf[8] == int(FieldGenerator.EtaBand)
    assert len(buf) == 4 + 4 + 1 + 4 + 4 + 8 * 5 + 8 + 8 * 6
    assert np.frombuffer(buf[-48:], "<f8").tobytes() == f.values.astype("<f8").tobytes()
    g = loads_field(buf)
    assert g.values.tobytes() == f.values.tobytes() and g.seed == f.seed and g.band == f.band
    assert g.grid == f.grid


def test_field_file_roundtrip(tmp_path):
    f = sample_eta(GridSpec(11, 7, 1 / 16), 1 / 8, 1.0, 21)
    p = tmp_path / "f.lfpp"
    write_field(p, f)
    assert read_field(p).values.tobytes() == f.values.tobytes()


def test_truncated_dump_rejected():
    f = sample_eta(GridSpec(3, 3, 0.125), 0.25, 1.0, 1)
    with pytest.raises(StructuralError):
        loads_field(dumps_field(f)[:-3])


@given(st.integers(1, 20), st.integers(1, 20), st.floats(1e-3, 10), st.floats(-5, 5), st.floats(-5, 5))
def test_grid_bijection_property(w, h, mesh, ox, oy):
    g = GridSpec(w, h, mesh, (ox, oy))
    i = np.arange(w)
    j = np.arange(h)
    fi, _ = g.index_of(*g.world(i, np.zeros(w, dtype=int)))
    _, fj = g.index_of(*g.world(np.zeros(h, dtype=int), j))
    assert np.array_equal(np.rint(fi).astype(int), i) and np.array_equal(np.rint(fj).astype(int), j)


@given(st.integers(0, 2 ** 64 - 1), st.sampled_from([0.5, 0.25, 0.125]))
def test_dump_roundtrip_property(seed, delta):
    f = sample_eta(GridSpec(4, 3, delta / 2, (0.1, 0.2)), delta, 1.0, seed)
    g = loads_field(dumps_field(f))
    assert g.values.tobytes() == f.values.tobytes() and g.seed == seed


@given(st.floats(0.05, 1.0), st.floats(0.0, 1.0))
def test_variance_matches_slab_sum(d, frac):
    dp = d + (1 - d) * frac
    f = EtaField(d, dp, 0)
    assert f.variance() == pytest.approx(math.log(dp / d) + quadrature_bias(d, dp), abs=1e-12)


@pytest.mark.parametrize("k", [2, 4, 5])
def test_variance_law(k):
    """Var eta_delta(v) = log(1/delta) + q(delta) within 3 SE (10000 replicas)."""
    delta = 2.0 ** -k
    R = 10000
    vals = np.array([sample_eta(point_grid(), delta, 1.0, seeding.replica_seed(20 + k, r)).values[0, 0]
                     for r in range(R)])
    var = vals.var(ddof=1)
    q = quadrature_bias(delta, 1.0)
    assert abs(q) < 0.02
    assert abs(var - (math.log(1 / delta) + q)) < 3 * var * math.sqrt(2 / (R - 1))


def test_smoothness_bound():
    delta = 2.0 ** -3
    rng = np.random.default_rng(3)
    P = 200
    v = rng.uniform(0.25, 0.75, size=(P, 2))
    ang = rng.uniform(0, 2 * np.pi, P)
    rad = delta * np.sqrt(rng.uniform(0.01, 1.0, P))
    w = v + rad[:, None] * np.c_[np.cos(ang), np.sin(ang)]
    R = 3000
    diffs = np.empty((R, P))
    for r in range(R):
        f = EtaField(delta, 1.0, seeding.replica_seed(30, r))
        ab = f.evaluate_points(np.r_[v[:, 0], w[:, 0]], np.r_[v[:, 1], w[:, 1]])
        diffs[r] = ab[:P] - ab[P:]
    var = diffs.var(axis=0, ddof=1)
    ratio = var / (rad ** 2 / delta ** 2)
    print("max Var(diff) delta^2/|v-w|^2:", ratio.max())
    assert np.all(var <= 1.25 * rad ** 2 / delta ** 2)
