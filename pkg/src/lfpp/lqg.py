"""Discretized Liouville quantum gravity measure on the unit square.

Cells of side h = 2^-n carry mass exp(gamma*h_n(z)) * 2^(-n*gamma^2/2) * h^2,
z the cell center.  A cell belongs to a ball iff its center does; ball masses
are computed by pruning a quadtree of subtree sums (nodes whose cell centers
all lie in the ball are added wholesale, nodes with none are skipped).

Two consumers sit on top of the mass queries:

* ``cover_segment``: the dyadic multiscale cover of a segment, where a ball of
  generation k is kept when it is light and its parent is heavy;
* ``lgd_chain`` / ``graph_distance``: a Liouville graph distance restricted to
  dyadic balls (center on the 2^-k grid, radius 2^-k-1), which is an upper
  bound for the distance over all rational balls.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import CapacityError, DomainError, ResolutionError, StructuralError, UnreachableError
from .fields import DEFAULT_SLABS_PER_OCTAVE, EtaField, FieldSample, GridSpec

DEFAULT_SEGMENT = ((0.25, 0.5), (0.75, 0.5))
MAX_CANDIDATES = 1_500_000
_EDGE = 1e-12


def cell_grid(n: int) -> GridSpec:
    """Cell centers of the 2^n x 2^n partition of [0, 1]^2."""
    h = 2.0 ** -n
    return GridSpec(2 ** n, 2 ** n, h, (h / 2, h / 2))


def lqg_field(n: int, seed: int, delta_prime: float = 1.0,
              slabs_per_octave: int = DEFAULT_SLABS_PER_OCTAVE) -> FieldSample:
    """eta_{2^-n}^{delta'} evaluated at the cell centers of level n."""
    if int(n) < 1:
        raise DomainError("n must be >= 1")
    f = EtaField(2.0 ** -n, delta_prime, seed, slabs_per_octave)
    return f.sample(cell_grid(int(n)))


@dataclass(frozen=True, eq=False)
class LqgGrid:
    """Cell masses plus the pyramid of 2x2 block sums; ``pyramid[n]`` is the cell level."""

    grid: GridSpec
    gamma: float
    n: int
    masses: np.ndarray
    pyramid: tuple[np.ndarray, ...]
    _dyadic: dict = field(default_factory=dict, repr=False)

    @property
    def mesh(self) -> float:
        return self.grid.mesh

    @property
    def total(self) -> float:
        return float(self.pyramid[0][0, 0])

    def quadtree_defect(self) -> float:
        """Largest relative gap between a node and the sum of its four children."""
        worst = 0.0
        for lev in range(self.n):
            a = self.pyramid[lev + 1]
            s = a[0::2, 0::2] + a[0::2, 1::2] + a[1::2, 0::2] + a[1::2, 1::2]
            p = self.pyramid[lev]
            with np.errstate(invalid="ignore", divide="ignore"):
                rel = np.where(p > 0, np.abs(p - s) / p, np.abs(s))
            worst = max(worst, float(rel.max()))
        return worst


def _pyramid(masses: np.ndarray) -> tuple[np.ndarray, ...]:
    levels = [masses]
    a = masses
    while a.shape[0] > 1:
        a = a[0::2, 0::2] + a[0::2, 1::2] + a[1::2, 0::2] + a[1::2, 1::2]
        a.setflags(write=False)
        levels.append(a)
    return tuple(reversed(levels))


def build_measure(field: FieldSample, gamma: float, n: int) -> LqgGrid:
    """Cell masses of M_{gamma,n} from a field sampled at the level-n cell centers."""
    n = int(n)
    if n < 1:
        raise DomainError("n must be >= 1")
    if not (gamma >= 0 and math.isfinite(gamma)):
        raise DomainError("gamma must be finite and >= 0")
    h = 2.0 ** -n
    if abs(field.band[0] - h) > 1e-12 * h:
        raise DomainError(f"field band starts at {field.band[0]}, expected 2^-{n} = {h}")
    g = field.grid
    want = cell_grid(n)
    if (g.width, g.height) != (want.width, want.height) or abs(g.mesh - h) > 1e-12 * h \
            or max(abs(g.origin[0] - h / 2), abs(g.origin[1] - h / 2)) > 1e-12 * h:
        raise DomainError(f"field must sit on the 2^{n} x 2^{n} cell centers with mesh 2^-{n}")
    scale = 2.0 ** (-n * gamma * gamma / 2) * h * h
    m = np.exp(gamma * field.values) * scale
    if not np.all(np.isfinite(m)):
        raise DomainError("cell masses overflow")
    m.setflags(write=False)
    return LqgGrid(want, float(gamma), n, m, _pyramid(m))


@dataclass(frozen=True)
class Ball:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        r = float(self.radius)
        if not (r > 0 and math.isfinite(r)):
            raise DomainError("ball radius must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "radius", r)

    def contains(self, x: float, y: float) -> bool:
        dx, dy = x - self.center[0], y - self.center[1]
        return dx * dx + dy * dy <= self.radius * self.radius

    def inside_unit_square(self) -> bool:
        (x, y), r = self.center, self.radius
        return x - r >= 0 and y - r >= 0 and x + r <= 1 and y + r <= 1


def ball_masses(g: LqgGrid, centers, radius) -> np.ndarray:
    """Masses of many balls at once (cell-center rule, quadtree pruning)."""
    c = np.asarray(centers, dtype=float).reshape(-1, 2)
    m = len(c)
    r = np.broadcast_to(np.asarray(radius, dtype=float), (m,)).astype(float)
    if m and not np.all(r > 0):
        raise DomainError("ball radius must be positive")
    r2 = r * r
    inner, outer = r2 * (1 - _EDGE), r2 * (1 + _EDGE)
    h, (ox, oy) = g.mesh, g.grid.origin
    out = np.zeros(m)
    ids = np.arange(m)
    I = np.zeros(m, dtype=np.int64)
    J = np.zeros(m, dtype=np.int64)
    for lev in range(g.n + 1):
        if ids.size == 0:
            break
        side = 1 << (g.n - lev)
        cx, cy = c[ids, 0], c[ids, 1]
        xlo = ox + (I * side) * h
        ylo = oy + (J * side) * h
        if lev == g.n:
            dx, dy = cx - xlo, cy - ylo
            inside = dx * dx + dy * dy <= r2[ids]
            partial = np.zeros_like(inside)
        else:
            xhi = xlo + (side - 1) * h
            yhi = ylo + (side - 1) * h
            nx, ny = cx - np.clip(cx, xlo, xhi), cy - np.clip(cy, ylo, yhi)
            fx = np.maximum(np.abs(cx - xlo), np.abs(cx - xhi))
            fy = np.maximum(np.abs(cy - ylo), np.abs(cy - yhi))
            inside = fx * fx + fy * fy <= inner[ids]
            partial = ~inside & (nx * nx + ny * ny <= outer[ids])
        if inside.any():
            out += np.bincount(ids[inside], weights=g.pyramid[lev][J[inside], I[inside]], minlength=m)
        ids = np.repeat(ids[partial], 4)
        I = ((2 * I[partial])[:, None] + np.array([0, 1, 0, 1])).ravel()
        J = ((2 * J[partial])[:, None] + np.array([0, 0, 1, 1])).ravel()
    return out


def ball_mass(g: LqgGrid, b: Ball) -> float:
    return float(ball_masses(g, [b.center], b.radius)[0])


def _check_delta(g: LqgGrid, delta: float) -> None:
    if not (0 < delta < 1):
        raise DomainError("delta must lie in (0, 1)")
    floor = 2.0 ** (-g.n + 2)
    if delta < floor * (1 - 1e-12):
        raise ResolutionError(f"delta={delta} below the resolution floor 2^-(n-2) = {floor}")


# ---------------------------------------------------------------------------
# dyadic cover of a segment

@dataclass(frozen=True, eq=False)
class CoverResult:
    balls: list[Ball]
    masses: list[float]
    certified: bool
    uncovered: list[Ball] = field(default_factory=list)
    delta: float = 0.0
    levels: list[int] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.balls)

    def raise_if_uncovered(self) -> None:
        if self.uncovered:
            raise UnreachableError(f"{len(self.uncovered)} finest-level balls still exceed delta^2")

    def to_dict(self) -> dict:
        return {
            "delta": self.delta, "count": self.count, "certified": self.certified,
            "uncovered": len(self.uncovered),
            "balls": [{"center": list(b.center), "radius": b.radius, "mass": m, "level": k}
                      for b, m, k in zip(self.balls, self.masses, self.levels)],
        }


def _segment_points(a, b, spacing: float) -> np.ndarray:
    length = math.hypot(b[0] - a[0], b[1] - a[1])
    k = max(1, math.ceil(length / spacing))
    t = np.arange(k + 1) / k
    return np.column_stack([a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t])


def covers_points(balls: list[Ball], pts: np.ndarray, chunk: int = 4096) -> bool:
    if not balls:
        return pts.size == 0
    C = np.array([b.center for b in balls])
    R2 = np.array([b.radius for b in balls]) ** 2 * (1 + _EDGE)
    for a in range(0, len(pts), chunk):
        p = pts[a:a + chunk]
        d2 = (p[:, None, 0] - C[None, :, 0]) ** 2 + (p[:, None, 1] - C[None, :, 1]) ** 2
        if not np.all((d2 <= R2[None, :]).any(axis=1)):
            return False
    return True


def cover_segment(g: LqgGrid, delta: float, segment=DEFAULT_SEGMENT) -> CoverResult:
    """Multiscale dyadic cover of a segment by (M, delta)-balls.

    Generation k consists of 2^(k-1) balls of radius L*2^-k (L the segment
    length) centered at the points a + (b-a)*(2j+1)*2^-k.  A ball is kept when
    its mass is <= delta^2 and its parent's mass exceeds delta^2 (the single
    generation-1 ball has a heavy parent by convention).  Recursion stops at
    k = n; heavy balls left there are reported in ``uncovered``.
    """
    _check_delta(g, delta)
    a, b = (np.asarray(p, dtype=float) for p in segment)
    L = float(np.hypot(*(b - a)))
    if not L > 0:
        raise DomainError("degenerate segment")
    top = Ball(tuple((a + b) / 2), L / 2)
    if not top.inside_unit_square():
        raise DomainError("the generation-1 ball must lie inside the unit square")
    d2 = delta * delta
    balls: list[Ball] = []
    masses: list[float] = []
    levels: list[int] = []
    uncovered: list[Ball] = []
    heavy = np.array([0], dtype=np.int64)
    for k in range(1, g.n + 1):
        t = (2 * heavy + 1) * 2.0 ** -k
        centers = a[None, :] + (b - a)[None, :] * t[:, None]
        r = L * 2.0 ** -k
        mass = ball_masses(g, centers, r)
        light = mass <= d2
        for c, mu in zip(centers[light], mass[light]):
            balls.append(Ball((c[0], c[1]), r))
            masses.append(float(mu))
            levels.append(k)
        if k == g.n:
            uncovered = [Ball((c[0], c[1]), r) for c in centers[~light]]
            break
        heavy = (2 * heavy[~light])[:, None] + np.array([0, 1])
        heavy = heavy.ravel()
        if heavy.size == 0:
            break
    certified = covers_points(balls, _segment_points(a, b, g.mesh / 4))
    if not uncovered and not certified:
        raise StructuralError("dyadic cover left a gap although no leaf is heavy")
    if any(mu > d2 for mu in masses):
        raise StructuralError("cover contains a heavy ball")
    return CoverResult(balls, masses, certified, uncovered, float(delta), levels)


def cover_to_json(cover: CoverResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(cover.to_dict(), fh, indent=2)


# ---------------------------------------------------------------------------
# Liouville graph distance over dyadic balls

@dataclass(frozen=True, eq=False)
class DyadicCandidates:
    """Admissible dyadic balls of one measure and delta, grouped by generation."""

    levels: list[int]
    centers: list[np.ndarray]
    radii: list[float]
    masses: list[np.ndarray]

    @property
    def size(self) -> int:
        return sum(len(c) for c in self.centers)


def _dyadic_level(g: LqgGrid, k: int):
    """All generation-k dyadic balls inside the square with their masses (cached per grid)."""
    hit = g._dyadic.get(k)
    if hit is None:
        s = 2.0 ** -k
        ij = np.arange(1, 2 ** k)
        X, Y = np.meshgrid(ij * s, ij * s)
        c = np.column_stack([X.ravel(), Y.ravel()])
        hit = (c, s / 2, ball_masses(g, c, s / 2))
        g._dyadic[k] = hit
    return hit


def dyadic_candidates(g: LqgGrid, delta: float, kmax: int | None = None) -> DyadicCandidates:
    """Balls with center on (2^-k Z)^2, radius 2^-k-1, inside [0,1]^2 and mass <= delta^2, k = 1..kmax."""
    _check_delta(g, delta)
    kmax = g.n if kmax is None else int(kmax)
    if not 1 <= kmax <= g.n:
        raise DomainError(f"kmax must lie in [1, {g.n}]")
    if sum((2 ** k - 1) ** 2 for k in range(1, kmax + 1)) > MAX_CANDIDATES:
        raise CapacityError(f"more than {MAX_CANDIDATES} dyadic balls up to generation {kmax}")
    levels, centers, radii, masses = [], [], [], []
    d2 = delta * delta
    for k in range(1, kmax + 1):
        c, r, m = _dyadic_level(g, k)
        keep = m <= d2
        levels.append(k)
        centers.append(c[keep])
        radii.append(r)
        masses.append(m[keep])
    return DyadicCandidates(levels, centers, radii, masses)


@dataclass(frozen=True, eq=False)
class LgdResult:
    count: int
    chain: list[Ball]
    masses: list[float]
    candidates: int
    upper_bound: bool = True

    def to_dict(self) -> dict:
        return {"count": self.count, "candidates": self.candidates, "upper_bound": self.upper_bound,
                "chain": [{"center": list(b.center), "radius": b.radius, "mass": m}
                          for b, m in zip(self.chain, self.masses)]}


def lgd_chain(g: LqgGrid, delta: float, v, w, kmax: int | None = None) -> LgdResult:
    """Shortest chain of intersecting admissible dyadic balls from a ball containing v to one containing w."""
    v = (float(v[0]), float(v[1]))
    w = (float(w[0]), float(w[1]))
    for p in (v, w):
        if not (0 <= p[0] <= 1 and 0 <= p[1] <= 1):
            raise DomainError(f"point {p} outside the unit square")
    _check_delta(g, delta)
    if v == w:
        return LgdResult(0, [], [], 0)
    cand = dyadic_candidates(g, delta, kmax)
    C = np.concatenate(cand.centers)
    R = np.concatenate([np.full(len(c), r) for c, r in zip(cand.centers, cand.radii)])
    M = np.concatenate(cand.masses)
    offs = np.cumsum([0] + [len(c) for c in cand.centers])
    trees = [cKDTree(c) if len(c) else None for c in cand.centers]

    def containing(p):
        d2 = (C[:, 0] - p[0]) ** 2 + (C[:, 1] - p[1]) ** 2
        return np.flatnonzero(d2 <= R * R)

    src, dst = containing(v), containing(w)
    if src.size == 0 or dst.size == 0:
        raise UnreachableError("no admissible ball contains an endpoint")
    is_dst = np.zeros(len(C), dtype=bool)
    is_dst[dst] = True
    pred = np.full(len(C), -2, dtype=np.int64)
    pred[src] = -1
    frontier = src
    hops = 1
    while frontier.size:
        hit = frontier[is_dst[frontier]]
        if hit.size:
            end = int(hit.min())
            chain = [end]
            while pred[chain[-1]] >= 0:
                chain.append(int(pred[chain[-1]]))
            chain.reverse()
            return LgdResult(hops, [Ball(tuple(C[i]), R[i]) for i in chain],
                             [float(M[i]) for i in chain], len(C))
        fc, fr = C[frontier], R[frontier]
        nbr_all, par_all = [], []
        for tree, off, rk in zip(trees, offs[:-1], cand.radii):
            if tree is None:
                continue
            lists = tree.query_ball_point(fc, (fr + rk) * (1 + 1e-9))
            lens = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
            if not lens.sum():
                continue
            nb = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists if x]) + off
            par = np.repeat(frontier, lens)
            d2 = ((C[nb] - C[par]) ** 2).sum(axis=1)
            ok = d2 <= (R[nb] + R[par]) ** 2
            nbr_all.append(nb[ok])
            par_all.append(par[ok])
        if not nbr_all:
            break
        nb = np.concatenate(nbr_all)
        par = np.concatenate(par_all)
        fresh = pred[nb] == -2
        nb, par = nb[fresh], par[fresh]
        # deterministic predecessor: smallest parent index per new node
        order = np.lexsort((par, nb))
        nb, par = nb[order], par[order]
        first = np.ones(nb.size, dtype=bool)
        first[1:] = nb[1:] != nb[:-1]
        nb, par = nb[first], par[first]
        pred[nb] = par
        frontier = nb
        hops += 1
    raise UnreachableError("no admissible chain connects the endpoints")


def graph_distance(g: LqgGrid, delta: float, v, w, kmax: int | None = None) -> int:
    """Dyadic-ball Liouville graph distance (an upper bound for the unrestricted one)."""
    return lgd_chain(g, delta, v, w, kmax).count


def chain_to_csv(res: LgdResult, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "x", "y", "radius", "mass"])
        for k, (b, m) in enumerate(zip(res.chain, res.masses)):
            wr.writerow([k, repr(b.center[0]), repr(b.center[1]), repr(b.radius), repr(m)])
