"""Vertex-weighted first-passage distances on square lattices.

The distance between v != w is the minimum over lattice paths of the sum of
vertex weights, both endpoints included.  Search is Dijkstra with a binary
heap keyed by (distance, vertex index), so equal-distance ties resolve in
row-major vertex order and geodesics are deterministic.  The reported distance
is the correctly rounded sum (``math.fsum``) of the returned path's weights,
which makes it symmetric and comparable with zero tolerance to the oracles.
"""
from __future__ import annotations

import heapq
import math
from collections.abc import Callable
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph

from .errors import CapacityError, DomainError, StructuralError, UnreachableError
from .fields import FieldSample, GridSpec

Vertex = tuple[int, int]


@dataclass(frozen=True, eq=False)
class WeightedLattice:
    """Grid vertices with weights w(v) = exp(alpha * gamma * eta(v)); ``weights[j, i]``."""

    grid: GridSpec
    gamma: float
    weights: np.ndarray
    exponent_scale: float = 1.0

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64).reshape(self.grid.shape)
        if not (np.all(np.isfinite(w)) and np.all(w > 0)):
            raise StructuralError("lattice weights must be finite and positive")
        if self.gamma < 0 or self.exponent_scale <= 0:
            raise DomainError("need gamma >= 0 and exponent_scale > 0")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_field(cls, field: FieldSample, gamma: float, exponent_scale: float = 1.0) -> "WeightedLattice":
        return cls(field.grid, float(gamma), np.exp(exponent_scale * gamma * field.values), float(exponent_scale))

    @classmethod
    def from_values(cls, values: np.ndarray, gamma: float, exponent_scale: float = 1.0) -> "WeightedLattice":
        values = np.asarray(values, dtype=float)
        g = GridSpec(values.shape[1], values.shape[0], 1.0)
        return cls(g, float(gamma), np.exp(exponent_scale * gamma * values), float(exponent_scale))

    @property
    def width(self) -> int:
        return self.grid.width

    @property
    def height(self) -> int:
        return self.grid.height

    def index(self, v: Vertex) -> int:
        i, j = int(v[0]), int(v[1])
        if not (0 <= i < self.width and 0 <= j < self.height):
            raise DomainError(f"vertex {v} outside the lattice")
        return j * self.width + i

    def vertex(self, idx: int) -> Vertex:
        return (int(idx % self.width), int(idx // self.width))


@dataclass(frozen=True)
class LatticePath:
    vertices: tuple[Vertex, ...]

    def __len__(self):
        return len(self.vertices)

    def as_array(self) -> np.ndarray:
        return np.array(self.vertices, dtype=np.int64).reshape(-1, 2)


@dataclass(frozen=True)
class GeodesicResult:
    distance: float
    path: LatticePath
    expanded: int


def validate_path(lat: WeightedLattice, p: LatticePath) -> None:
    verts = p.vertices
    if not verts:
        raise StructuralError("empty path")
    seen = set()
    for k, v in enumerate(verts):
        i, j = int(v[0]), int(v[1])
        if not (0 <= i < lat.width and 0 <= j < lat.height):
            raise StructuralError(f"vertex {v} outside the lattice")
        if (i, j) in seen:
            raise StructuralError(f"vertex {v} repeats")
        seen.add((i, j))
        if k and abs(i - verts[k - 1][0]) + abs(j - verts[k - 1][1]) != 1:
            raise StructuralError(f"{verts[k - 1]} -> {v} is not a lattice edge")


def path_weight(lat: WeightedLattice, p: LatticePath) -> float:
    """Sum of vertex weights along the path (correctly rounded)."""
    validate_path(lat, p)
    arr = p.as_array()
    return math.fsum(lat.weights[arr[:, 1], arr[:, 0]].tolist())


def region_mask(lat: WeightedLattice, region) -> np.ndarray:
    """Boolean (height, width) mask from a mask array or a vertex predicate f(i, j)."""
    if region is None:
        return np.ones(lat.grid.shape, dtype=bool)
    if isinstance(region, Callable):
        J, I = np.mgrid[0:lat.height, 0:lat.width]
        try:
            m = np.asarray(region(I, J), dtype=bool)
            if m.shape != lat.grid.shape:
                raise TypeError
        except Exception:
            m = np.array([[bool(region(i, j)) for i in range(lat.width)] for j in range(lat.height)])
        return m
    m = np.asarray(region, dtype=bool)
    if m.shape != lat.grid.shape:
        raise DomainError("region mask shape does not match the lattice")
    return m


def grid_graph(width: int, height: int, mask: np.ndarray | None = None):
    """CSR adjacency of the 4-neighbour grid restricted to ``mask`` (row-major vertex ids)."""
    n = width * height
    idx = np.arange(n).reshape(height, width)
    a = [idx[:, :-1].ravel(), idx[:-1, :].ravel()]
    b = [idx[:, 1:].ravel(), idx[1:, :].ravel()]
    src = np.concatenate(a + b)
    dst = np.concatenate(b + a)
    if mask is not None:
        m = np.asarray(mask, dtype=bool).ravel()
        keep = m[src] & m[dst]
        src, dst = src[keep], dst[keep]
    A = sp.csr_matrix((np.ones(src.size, dtype=np.int8), (src, dst)), shape=(n, n))
    A.sort_indices()
    return A.indptr.astype(np.int64), A.indices.astype(np.int64)


@numba.njit(cache=True)
def _dijkstra(indptr, indices, weights, src, dst):
    n = weights.size
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, dtype=np.int64)
    done = np.zeros(n, dtype=np.bool_)
    dist[src] = weights[src]
    heap = [(weights[src], src)]
    expanded = 0
    while len(heap) > 0:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        expanded += 1
        if u == dst:
            break
        for e in range(indptr[u], indptr[u + 1]):
            x = indices[e]
            if done[x]:
                continue
            nd = d + weights[x]
            if nd < dist[x]:
                dist[x] = nd
                pred[x] = u
                heapq.heappush(heap, (nd, x))
    return dist, pred, expanded


def shortest_path_csr(indptr, indices, weights, src: int, dst: int):
    """Vertex-weighted Dijkstra on a CSR graph; returns (vertex ids, expanded) or raises."""
    w = np.ascontiguousarray(weights, dtype=np.float64)
    dist, pred, expanded = _dijkstra(indptr, indices, w, np.int64(src), np.int64(dst))
    if not np.isfinite(dist[dst]):
        raise UnreachableError("endpoints are disconnected within the region")
    out = [dst]
    while out[-1] != src:
        out.append(int(pred[out[-1]]))
    out.reverse()
    return np.array(out, dtype=np.int64), int(expanded)


def fpp_distance(lat: WeightedLattice, v: Vertex, w: Vertex, region=None) -> GeodesicResult:
    """First-passage distance and tie-broken geodesic between v and w."""
    mask = region_mask(lat, region)
    s, t = lat.index(v), lat.index(w)
    if not (mask.ravel()[s] and mask.ravel()[t]):
        raise DomainError("endpoints must lie in the region")
    if s == t:
        return GeodesicResult(0.0, LatticePath((lat.vertex(s),)), 0)
    indptr, indices = grid_graph(lat.width, lat.height, None if region is None else mask)
    flat = lat.weights.ravel()
    ids, expanded = shortest_path_csr(indptr, indices, flat, s, t)
    path = LatticePath(tuple(lat.vertex(k) for k in ids))
    return GeodesicResult(math.fsum(flat[ids].tolist()), path, expanded)


def bfs_oracle(lat: WeightedLattice, v: Vertex, w: Vertex, region=None) -> int:
    """Hop count of a shortest lattice path inside the region."""
    mask = region_mask(lat, region)
    s, t = lat.index(v), lat.index(w)
    if not (mask.ravel()[s] and mask.ravel()[t]):
        raise DomainError("endpoints must lie in the region")
    if s == t:
        return 0
    indptr, indices = grid_graph(lat.width, lat.height, mask)
    n = lat.width * lat.height
    A = sp.csr_matrix((np.ones(indices.size), indices, indptr), shape=(n, n))
    d = csgraph.shortest_path(A, unweighted=True, indices=s, directed=False)
    if not np.isfinite(d[t]):
        raise UnreachableError("endpoints are disconnected within the region")
    return int(d[t])


def exhaustive_oracle(lat: WeightedLattice, v: Vertex, w: Vertex) -> float:
    """Minimum path weight over all simple paths (lattices up to 4x4)."""
    if lat.width * lat.height > 16 or lat.width > 4 or lat.height > 4:
        raise CapacityError("exhaustive oracle limited to 4x4 lattices")
    s, t = lat.index(v), lat.index(w)
    if s == t:
        return 0.0
    W, H = lat.width, lat.height
    wts = lat.weights.ravel().tolist()
    best = math.inf
    stack = [(s, [s])]
    while stack:
        u, path = stack.pop()
        if u == t:
            best = min(best, math.fsum(wts[k] for k in path))
            continue
        i, j = u % W, u // W
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = i + di, j + dj
            if 0 <= a < W and 0 <= b < H:
                x = b * W + a
                if x not in path:
                    stack.append((x, path + [x]))
    if not math.isfinite(best):
        raise UnreachableError("no path between endpoints")
    return best
