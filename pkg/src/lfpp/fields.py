"""Grids, field samples and the white-noise heat-kernel band field eta.

The band field is

    eta_d^{d'}(v) = sqrt(pi) * int_{R^2 x [d^2, d'^2]} p(s/2; v, w) W(dw, ds),

with p the planar heat kernel.  The time interval is split into geometric
slabs; on each slab the kernel is frozen at the geometric midpoint s* and
convolved with an independent white noise living on a slab-specific square
lattice anchored at the world origin.  Noise is generated lazily in 32x32
tiles from counter-addressed Philox streams, so a slab's noise is one fixed
infinite array: any window of the plane can be evaluated independently and
overlapping windows agree exactly.  Evaluation on a grid is separable,
F = Gy @ Z @ Gx.T, with the Gaussian factor truncated at 1e-12 of its peak.
"""
from __future__ import annotations

import enum
import functools
import math
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
import scipy.sparse as sp

from . import seeding
from .errors import DomainError, ResolutionError, StructuralError

TILE = 32
TRUNC_LOG = math.log(1e12)
DEFAULT_SLABS_PER_OCTAVE = 2


@dataclass(frozen=True)
class GridSpec:
    """Regular grid; node (i, j) sits at origin + (i*mesh, j*mesh)."""

    width: int
    height: int
    mesh: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise DomainError("grid needs width >= 1 and height >= 1")
        if not (self.mesh > 0 and math.isfinite(self.mesh)):
            raise DomainError("grid mesh must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "mesh", float(self.mesh))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def size(self) -> int:
        return self.width * self.height

    def xs(self) -> np.ndarray:
        return self.origin[0] + self.mesh * np.arange(self.width)

    def ys(self) -> np.ndarray:
        return self.origin[1] + self.mesh * np.arange(self.height)

    def world(self, i, j):
        return (self.origin[0] + self.mesh * np.asarray(i), self.origin[1] + self.mesh * np.asarray(j))

    def index_of(self, x, y):
        """Fractional grid coordinates of world points."""
        return ((np.asarray(x) - self.origin[0]) / self.mesh, (np.asarray(y) - self.origin[1]) / self.mesh)

    def extent(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return (x0, x0 + (self.width - 1) * self.mesh, y0, y0 + (self.height - 1) * self.mesh)

    @classmethod
    def covering(cls, xmin, xmax, ymin, ymax, mesh, anchor=(0.0, 0.0)) -> "GridSpec":
        """Smallest grid aligned to ``anchor + mesh*Z^2`` containing the box."""
        i0 = math.floor((xmin - anchor[0]) / mesh + 1e-9)
        i1 = math.ceil((xmax - anchor[0]) / mesh - 1e-9)
        j0 = math.floor((ymin - anchor[1]) / mesh + 1e-9)
        j1 = math.ceil((ymax - anchor[1]) / mesh - 1e-9)
        return cls(i1 - i0 + 1, j1 - j0 + 1, mesh, (anchor[0] + i0 * mesh, anchor[1] + j0 * mesh))


class FieldGenerator(enum.IntEnum):
    EtaBand = 0
    DgffExact = 1
    DgffBand = 2


@dataclass(frozen=True, eq=False)
class FieldSample:
    """Field values on a grid; ``values[j, i]`` is the value at node (i, j)."""

    grid: GridSpec
    values: np.ndarray
    band: tuple[float, float]
    generator: FieldGenerator
    seed: int

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.shape != self.grid.shape:
            vals = vals.reshape(self.grid.shape)
        if not np.all(np.isfinite(vals)):
            raise StructuralError("field values must be finite")
        d, dp = self.band
        if not (0 < d <= dp <= 1):
            raise DomainError(f"band must satisfy 0 < delta <= delta' <= 1, got {self.band}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "generator", FieldGenerator(self.generator))
        object.__setattr__(self, "seed", seeding.check_seed(self.seed))

    def interpolate(self, x, y, tol: float = 1e-9) -> np.ndarray:
        """Bilinear interpolation at world points (must lie inside the grid hull)."""
        fx, fy = self.grid.index_of(x, y)
        fx = np.atleast_1d(np.asarray(fx, dtype=float))
        fy = np.atleast_1d(np.asarray(fy, dtype=float))
        w, h = self.grid.width, self.grid.height
        if fx.size and (fx.min() < -tol or fx.max() > w - 1 + tol or fy.min() < -tol or fy.max() > h - 1 + tol):
            raise DomainError("interpolation point outside the field domain")
        fx = np.clip(fx, 0.0, w - 1)
        fy = np.clip(fy, 0.0, h - 1)
        i0 = np.minimum(np.floor(fx).astype(np.int64), max(w - 2, 0))
        j0 = np.minimum(np.floor(fy).astype(np.int64), max(h - 2, 0))
        tx = fx - i0
        ty = fy - j0
        v = self.values
        i1 = np.minimum(i0 + 1, w - 1)
        j1 = np.minimum(j0 + 1, h - 1)
        return ((1 - ty) * ((1 - tx) * v[j0, i0] + tx * v[j0, i1])
                + ty * ((1 - tx) * v[j1, i0] + tx * v[j1, i1]))

    def evaluate(self, grid: GridSpec) -> np.ndarray:
        xs, ys = grid.xs(), grid.ys()
        X, Y = np.meshgrid(xs, ys)
        return self.interpolate(X.ravel(), Y.ravel()).reshape(grid.shape)

    def subsample(self, step: int, offset: tuple[int, int] = (0, 0)) -> "FieldSample":
        """Every ``step``-th node starting at ``offset`` (exact values, no interpolation)."""
        oi, oj = offset
        vals = self.values[oj::step, oi::step]
        g = GridSpec(vals.shape[1], vals.shape[0], self.grid.mesh * step,
                     (self.grid.origin[0] + oi * self.grid.mesh, self.grid.origin[1] + oj * self.grid.mesh))
        return FieldSample(g, vals.copy(), self.band, self.generator, self.seed)


# ---------------------------------------------------------------------------
# slab partition of the time band

@dataclass(frozen=True)
class Slab:
    lo: float
    hi: float
    index: int          # position on the global grid s = 2^(-index/per_octave)
    per_octave: int
    partial: bool

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def s_star(self) -> float:
        return math.sqrt(self.lo * self.hi)

    @property
    def spacing(self) -> float:
        # lattice spacing sqrt(s*)/2: the Riemann sum of the squared kernel is
        # then exact to ~5e-9 relative (Poisson summation)
        return math.sqrt(self.s_star) / 2.0

    @property
    def radius(self) -> float:
        return math.sqrt(self.s_star * TRUNC_LOG)

    @property
    def amplitude(self) -> float:
        h = self.spacing
        return h * math.sqrt(self.width / math.pi) / self.s_star

    @property
    def variance(self) -> float:
        """Point variance contributed by this slab (continuum limit of the lattice sum)."""
        return self.width / (2.0 * self.s_star)

    def key(self) -> tuple[int, ...]:
        if not self.partial:
            return (self.per_octave, self.index)
        bits = np.array([self.lo, self.hi]).view(np.uint64)
        return (self.per_octave, self.index, int(bits[0]), int(bits[1]))


def slab_partition(delta: float, delta_prime: float, per_octave: int = DEFAULT_SLABS_PER_OCTAVE) -> list[Slab]:
    """Split [delta^2, delta'^2] at the global points 2^(-j/per_octave); coarse first."""
    if not (0 < delta <= delta_prime <= 1):
        raise DomainError("need 0 < delta <= delta' <= 1")
    per_octave = int(per_octave)
    if per_octave < 1:
        raise DomainError("slabs_per_octave must be >= 1")
    lo, hi = delta * delta, delta_prime * delta_prime
    if lo == hi:
        return []

    def level(s):
        t = -per_octave * math.log2(s)
        r = round(t)
        return r if abs(t - r) < 1e-9 else None

    # global boundaries strictly inside (lo, hi)
    jmin = math.floor(-per_octave * math.log2(hi)) + 1
    jmax = math.ceil(-per_octave * math.log2(lo)) - 1
    cuts = [hi]
    for j in range(jmin, jmax + 1):
        s = 2.0 ** (-j / per_octave)
        if lo * (1 + 1e-12) < s < hi * (1 - 1e-12):
            cuts.append(s)
    cuts.append(lo)
    slabs = []
    for a, b in zip(cuts[1:], cuts[:-1]):
        jb = level(b)
        ja = level(a)
        if jb is not None and ja is not None and ja == jb + 1:
            b_exact, a_exact = 2.0 ** (-jb / per_octave), 2.0 ** (-ja / per_octave)
            slabs.append(Slab(a_exact, b_exact, jb, per_octave, False))
        else:
            idx = math.floor(-per_octave * math.log2(b) + 1e-9)
            slabs.append(Slab(a, b, idx, per_octave, True))
    return slabs


def quadrature_bias(delta: float, delta_prime: float, per_octave: int = DEFAULT_SLABS_PER_OCTAVE) -> float:
    """Closed-form point-variance bias of the slab midpoint rule relative to log(delta'/delta)."""
    if delta == delta_prime:
        return 0.0
    total = math.fsum(s.variance for s in slab_partition(delta, delta_prime, per_octave))
    return total - math.log(delta_prime / delta)


# ---------------------------------------------------------------------------
# lazily generated tiled white noise

_TILE_CACHE: "OrderedDict[tuple, np.ndarray]" = OrderedDict()
_TILE_CACHE_MAX = 6000
_PHILOX = threading.local()


def _tile(key: tuple[int, int], tx: int, ty: int) -> np.ndarray:
    ck = (key, tx, ty)
    arr = _TILE_CACHE.get(ck)
    if arr is not None:
        _TILE_CACHE.move_to_end(ck)
        return arr
    # reuse one Philox per thread and jump its counter; same stream as a fresh Philox(key, counter)
    gen = getattr(_PHILOX, "gen", None)
    if gen is None:
        gen = _PHILOX.gen = np.random.Generator(np.random.Philox(key=np.zeros(2, dtype=np.uint64)))
    gen.bit_generator.state = {
        "bit_generator": "Philox",
        "state": {"counter": np.array([0, 0, tx & seeding.MASK64, ty & seeding.MASK64], dtype=np.uint64),
                  "key": np.array(key, dtype=np.uint64)},
        "buffer": np.zeros(4, dtype=np.uint64), "buffer_pos": 4, "has_uint32": 0, "uinteger": 0}
    arr = gen.standard_normal((TILE, TILE))
    arr.setflags(write=False)
    _TILE_CACHE[ck] = arr
    if len(_TILE_CACHE) > _TILE_CACHE_MAX:
        _TILE_CACHE.popitem(last=False)
    return arr


def clear_noise_cache() -> None:
    _TILE_CACHE.clear()


def noise_block(key: tuple[int, int], i0: int, i1: int, j0: int, j1: int) -> np.ndarray:
    """Noise Z[j, i] for lattice indices i in [i0, i1), j in [j0, j1)."""
    out = np.empty((j1 - j0, i1 - i0))
    for ty in range(j0 // TILE, (j1 - 1) // TILE + 1):
        ya, yb = max(j0, ty * TILE), min(j1, (ty + 1) * TILE)
        for tx in range(i0 // TILE, (i1 - 1) // TILE + 1):
            xa, xb = max(i0, tx * TILE), min(i1, (tx + 1) * TILE)
            t = _tile(key, tx, ty)
            out[ya - j0:yb - j0, xa - i0:xb - i0] = t[ya - ty * TILE:yb - ty * TILE, xa - tx * TILE:xb - tx * TILE]
    return out


@numba.njit(cache=True)
def _dense_factor(coords, h, s_star, radius, i0, L):
    n = coords.size
    G = np.zeros((n, L))
    for a in range(n):
        c = coords[a]
        lo = max(int(math.ceil((c - radius) / h)), i0)
        hi = min(int(math.floor((c + radius) / h)), i0 + L - 1)
        for i in range(lo, hi + 1):
            d = c - i * h
            if abs(d) <= radius:
                G[a, i - i0] = math.exp(-(d * d) / s_star)
    return G


@functools.lru_cache(maxsize=128)
def _short_factor(x0: float, step: float, n: int, h: float, s_star: float, radius: float):
    G, i0, i1 = _axis_factor_uncached(x0 + step * np.arange(n), h, s_star, radius)
    G.setflags(write=False)
    return G, i0, i1


def _axis_factor(coords: np.ndarray, h: float, s_star: float, radius: float):
    """Banded Gaussian factor g(x_a - i h) for lattice indices i near each coordinate."""
    n = coords.size
    if 1 < n <= 512:
        step = float(coords[1] - coords[0])
        x0 = float(coords[0])
        if np.array_equal(coords, x0 + step * np.arange(n)):
            return _short_factor(x0, step, n, h, s_star, radius)
    return _axis_factor_uncached(coords, h, s_star, radius)


def _axis_factor_uncached(coords: np.ndarray, h: float, s_star: float, radius: float):
    i0 = math.floor((coords.min() - radius) / h)
    i1 = math.floor((coords.max() + radius) / h) + 1
    n = coords.size
    L = i1 - i0
    if n * L <= 3_000_000:
        return _dense_factor(np.ascontiguousarray(coords, dtype=np.float64), h, s_star, radius, i0, L), i0, i1
    start = np.ceil((coords - radius) / h).astype(np.int64)
    K = int(math.floor(2 * radius / h)) + 2
    cols = start[:, None] + np.arange(K)[None, :]
    diff = coords[:, None] - cols * h
    vals = np.exp(-(diff * diff) / s_star)
    vals[np.abs(diff) > radius] = 0.0
    cols = cols - i0
    keep = (cols >= 0) & (cols < L)
    rows = np.broadcast_to(np.arange(n)[:, None], cols.shape)
    G = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, L))
    return G, i0, i1


class EtaField:
    """The band field eta_delta^{delta'} as a function on the whole plane.

    Two instances built from the same seed share slab noise wherever their
    slabs coincide, so ``EtaField(2**-n, 1, s)`` equals the sum of the dyadic
    bands ``EtaField(2**-k, 2**-(k-1), s)`` up to rounding.
    """

    def __init__(self, delta: float, delta_prime: float, seed: int,
                 slabs_per_octave: int = DEFAULT_SLABS_PER_OCTAVE):
        if delta > delta_prime:
            raise DomainError(f"delta={delta} exceeds delta'={delta_prime}")
        if not (0 < delta <= delta_prime <= 1):
            raise DomainError("need 0 < delta <= delta' <= 1")
        self.delta = float(delta)
        self.delta_prime = float(delta_prime)
        self.seed = seeding.check_seed(seed)
        self.slabs_per_octave = int(slabs_per_octave)
        self.slabs = slab_partition(self.delta, self.delta_prime, self.slabs_per_octave)
        self._keys = [tuple(int(k) for k in seeding.philox_key(self.seed, seeding.ETA, *s.key())) for s in self.slabs]

    @property
    def band(self) -> tuple[float, float]:
        return (self.delta, self.delta_prime)

    def variance(self) -> float:
        return math.fsum(s.variance for s in self.slabs)

    def _slab_grid(self, slab: Slab, key, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        h, R = slab.spacing, slab.radius
        Gx, i0, i1 = _axis_factor(xs, h, slab.s_star, R)
        Gy, j0, j1 = _axis_factor(ys, h, slab.s_star, R)
        Z = noise_block(key, i0, i1, j0, j1)
        if sp.issparse(Gx):
            F = Gy @ (Gx @ Z.T).T
        elif sp.issparse(Gy):
            F = (Gy @ Z) @ Gx.T
        else:
            ny, Ly = Gy.shape
            nx, Lx = Gx.shape
            # cheaper association first
            if Ly * Lx * nx + ny * Ly * nx <= ny * Ly * Lx + ny * Lx * nx:
                F = Gy @ (Z @ Gx.T)
            else:
                F = (Gy @ Z) @ Gx.T
        return slab.amplitude * np.asarray(F)

    def evaluate(self, grid: GridSpec) -> np.ndarray:
        """Exact (truncated-kernel) values at the grid nodes, shape (height, width)."""
        out = np.zeros(grid.shape)
        xs, ys = grid.xs(), grid.ys()
        for slab, key in zip(self.slabs, self._keys):
            out += self._slab_grid(slab, key, xs, ys)
        return out

    def evaluate_points(self, x, y, chunk: int = 2048) -> np.ndarray:
        """Exact values at scattered points."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        out = np.zeros(x.shape)
        for a in range(0, x.size, chunk):
            xa, ya = x[a:a + chunk], y[a:a + chunk]
            acc = np.zeros(xa.shape)
            for slab, key in zip(self.slabs, self._keys):
                h, R, s2 = slab.spacing, slab.radius, slab.s_star
                K = int(math.floor(2 * R / h)) + 2
                sx = np.ceil((xa - R) / h).astype(np.int64)
                sy = np.ceil((ya - R) / h).astype(np.int64)
                dx = xa[:, None] - (sx[:, None] + np.arange(K)) * h
                dy = ya[:, None] - (sy[:, None] + np.arange(K)) * h
                gx = np.where(np.abs(dx) <= R, np.exp(-dx * dx / s2), 0.0)
                gy = np.where(np.abs(dy) <= R, np.exp(-dy * dy / s2), 0.0)
                i0, j0 = int(sx.min()), int(sy.min())
                Z = noise_block(key, i0, int(sx.max()) + K, j0, int(sy.max()) + K)
                rows = (sy - j0)[:, None, None] + np.arange(K)[None, :, None]
                cols = (sx - i0)[:, None, None] + np.arange(K)[None, None, :]
                acc += slab.amplitude * np.einsum("pk,pkl,pl->p", gy, Z[rows, cols], gx)
            out[a:a + chunk] = acc
        return out

    def sample(self, grid: GridSpec) -> FieldSample:
        return FieldSample(grid, self.evaluate(grid), self.band, FieldGenerator.EtaBand, self.seed)


def _check_resolution(grid: GridSpec, delta: float) -> None:
    if grid.mesh > delta / 2 * (1 + 1e-12):
        raise ResolutionError(f"grid mesh {grid.mesh} exceeds delta/2 = {delta / 2}")


def sample_eta(grid: GridSpec, delta: float, delta_prime: float, seed: int,
               slabs_per_octave: int = DEFAULT_SLABS_PER_OCTAVE) -> FieldSample:
    """One sample of eta_delta^{delta'} on ``grid``; deterministic in (grid, band, seed)."""
    if delta > delta_prime:
        raise DomainError(f"delta={delta} exceeds delta'={delta_prime}")
    field = EtaField(delta, delta_prime, seed, slabs_per_octave)
    _check_resolution(grid, delta)
    return field.sample(grid)


@dataclass(frozen=True, eq=False)
class BandDecomposition:
    bands: list[FieldSample]
    total: FieldSample

    @property
    def n(self) -> int:
        return len(self.bands)

    def band(self, k: int) -> FieldSample:
        return self.bands[k - 1]


def band_field(k: int, seed: int, slabs_per_octave: int = DEFAULT_SLABS_PER_OCTAVE) -> EtaField:
    return EtaField(2.0 ** -k, 2.0 ** -(k - 1), seed, slabs_per_octave)


def sum_bands(bands: Sequence[FieldSample]) -> FieldSample:
    total = np.array(bands[0].values, copy=True)
    for b in bands[1:]:
        total += b.values
    first, last = bands[0], bands[-1]
    return FieldSample(first.grid, total, (last.band[0], first.band[1]), first.generator, first.seed)


def decompose_bands(grid: GridSpec, n: int, seed: int,
                    slabs_per_octave: int = DEFAULT_SLABS_PER_OCTAVE) -> BandDecomposition:
    """Bands k = 1..n of eta on ``grid``; the total is their sum in ascending k."""
    if n < 1:
        raise DomainError("n must be >= 1")
    _check_resolution(grid, 2.0 ** -n)
    bands = [band_field(k, seed, slabs_per_octave).sample(grid) for k in range(1, n + 1)]
    return BandDecomposition(bands, sum_bands(bands))


# ---------------------------------------------------------------------------
# binary dump

_HEADER = struct.Struct("<4sIBIIdddddQ")
MAGIC = b"LFPP"
VERSION = 1


def dumps_field(f: FieldSample) -> bytes:
    g = f.grid
    head = _HEADER.pack(MAGIC, VERSION, int(f.generator), g.width, g.height, g.mesh,
                        g.origin[0], g.origin[1], f.band[0], f.band[1], f.seed)
    return head + np.ascontiguousarray(f.values, dtype="<f8").tobytes()


def loads_field(buf: bytes) -> FieldSample:
    if len(buf) < _HEADER.size:
        raise StructuralError("truncated field dump")
    magic, ver, gen, w, h, mesh, ox, oy, d, dp, seed = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC or ver != VERSION:
        raise StructuralError("not an LFPP v1 field dump")
    if len(buf) != _HEADER.size + 8 * w * h:
        raise StructuralError("field dump size mismatch")
    vals = np.frombuffer(buf, dtype="<f8", count=w * h, offset=_HEADER.size)
    return FieldSample(GridSpec(w, h, mesh, (ox, oy)), vals.astype(np.float64).reshape(h, w),
                       (d, dp), FieldGenerator(gen), seed)


def write_field(path, f: FieldSample) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_field(f))


def read_field(path) -> FieldSample:
    with open(path, "rb") as fh:
        return loads_field(fh.read())


class WindowedField:
    """An ``EtaField`` on the lattice ``mesh * Z^2``, evaluated lazily in cached windows.

    Windows are aligned to the world origin, so node values do not depend on
    which window produced them.  ``interpolate`` is bilinear between nodes.
    """

    def __init__(self, field: EtaField, mesh: float, tile: tuple[int, int] = (256, 32), cache: int = 1536):
        self.field = field
        self.mesh = float(mesh)
        self.tile = (int(tile[0]), int(tile[1]))
        self._cache: "OrderedDict[tuple[int, int], np.ndarray]" = OrderedDict()
        self._cache_max = int(cache)
        _check_resolution(GridSpec(1, 1, self.mesh), field.delta)

    @property
    def band(self) -> tuple[float, float]:
        return self.field.band

    def window(self, tx: int, ty: int) -> np.ndarray:
        arr = self._cache.get((tx, ty))
        if arr is not None:
            self._cache.move_to_end((tx, ty))
            return arr
        tw, th = self.tile
        g = GridSpec(tw + 1, th + 1, self.mesh, (tx * tw * self.mesh, ty * th * self.mesh))
        arr = self.field.evaluate(g)
        arr.setflags(write=False)
        self._cache[(tx, ty)] = arr
        if len(self._cache) > self._cache_max:
            self._cache.popitem(last=False)
        return arr

    def interpolate(self, x, y) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        shape = x.shape
        fx, fy = (x / self.mesh).ravel(), (y / self.mesh).ravel()
        tw, th = self.tile
        i0 = np.floor(fx).astype(np.int64)
        j0 = np.floor(fy).astype(np.int64)
        tx, ty = i0 // tw, j0 // th
        li, lj = i0 - tx * tw, j0 - ty * th
        ax, ay = fx - i0, fy - j0
        # nodes on a window edge belong to two windows; reuse one already needed
        on_x = (ax == 0) & (li == 0)
        on_y = (ay == 0) & (lj == 0)
        edge = on_x | on_y
        if edge.any():
            inner = ~edge
            known = set(zip(tx[inner].tolist(), ty[inner].tolist())) | set(self._cache.keys())
            for k in np.flatnonzero(edge):
                best = None
                for dx in ((0, -1) if on_x[k] else (0,)):
                    for dy in ((0, -1) if on_y[k] else (0,)):
                        if (int(tx[k] + dx), int(ty[k] + dy)) in known:
                            best = (dx, dy)
                            break
                    if best:
                        break
                if best is None:
                    known.add((int(tx[k]), int(ty[k])))
                    continue
                dx, dy = best
                if dx:
                    tx[k] -= 1
                    li[k] = tw - 1
                    ax[k] = 1.0
                if dy:
                    ty[k] -= 1
                    lj[k] = th - 1
                    ay[k] = 1.0
        out = np.empty(fx.shape)
        keys = np.stack([tx, ty], 1)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        order = np.argsort(inv, kind="stable")
        bounds = np.searchsorted(inv[order], np.arange(len(uniq) + 1))
        for u, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
            sel = order[a:b]
            w = self.window(int(uniq[u, 0]), int(uniq[u, 1]))
            pi, pj, px, py = li[sel], lj[sel], ax[sel], ay[sel]
            out[sel] = ((1 - py) * ((1 - px) * w[pj, pi] + px * w[pj, pi + 1])
                        + py * ((1 - px) * w[pj + 1, pi] + px * w[pj + 1, pi + 1]))
        return out.reshape(shape)
