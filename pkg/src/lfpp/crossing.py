"""Recursive light crossings of thin rectangles.

Geometry is expressed in frames.  A frame (o, u, s) maps rectangle-local
coordinates (X, Y) to the world point o + s*(X*u + Y*u_perp), where
u_perp = (-u_y, u_x).  Every rectangle handled here is a copy of
V^Gamma = [0, Gamma] x [0, 1] in its own frame, so a frame of scale
2^-l is a copy of V_l^Gamma.

Frames are stored as rows (ox, oy, ux, uy, s).  Algorithm A_a applied to a
rect of level l uses the band l+1 of the field for its switching decision,
builds its blocks with A_{a-2m}, ties adjacent blocks with two vertical
crossings (A_{a-3m}) and one short horizontal crossing (A_{a-4m+1}), and
falls back to the straight midline when a <= 0.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph

from . import seeding
from .errors import ConfigError, DepthError, DomainError, StructuralError
from .fields import (BandDecomposition, EtaField, FieldSample, GridSpec, WindowedField,
                     band_field)
from .fpp import WeightedLattice, fpp_distance

log = logging.getLogger(__name__)

GEOM_TOL = 1e-9
GAMMA_MAX = 0.8
DZ_STEPS_PER_UNIT = 16

PROV_STRIP, PROV_SLOPED, PROV_TIE = 0, 1, 2


@dataclass(frozen=True)
class Calibration:
    """Constants of the gain/loss budget: Var gain ~ c*N*beta*gamma^2, loss per switch ~ C*(1/beta + gamma*sqrt(beta))."""

    c: float
    C: float
    C_prime: float

    def __post_init__(self):
        if not (self.c > 0 and self.C > 0 and self.C_prime >= 0):
            raise ConfigError("calibration needs c > 0, C > 0, C' >= 0")


# Frozen from pilot_calibration(0.6, replicas=2000, seed=20240607); see
# tests/test_crossing.py::test_default_calibration_is_reproducible.
DEFAULT_CALIBRATION = Calibration(c=0.1153, C=2.5, C_prime=2.5)


def dyadic_ceil(x: float) -> int:
    k = max(0, math.ceil(math.log2(x) - 1e-12))
    return 2 ** k


def n_prime(gamma: float, beta: float, calib: Calibration) -> float:
    """Switch-block size at which the expected gain is twice the loss."""
    loss = calib.C * (1.0 / beta + gamma * math.sqrt(beta))
    return 4.0 * loss * loss / ((2.0 / math.pi) * calib.c * beta * gamma * gamma)


# ---------------------------------------------------------------------------
# parameters

@dataclass(frozen=True)
class StrategyParams:
    gamma: float
    Gamma: int
    beta: int
    m_Gamma: int
    N_gamma: int
    l_gamma: int
    calib: Calibration
    N_prime: float
    N_gamma_calibrated: int
    feasible: bool

    @property
    def locations(self) -> int:
        return self.Gamma // self.beta

    @property
    def blocks_per_location(self) -> int:
        return self.beta * self.Gamma


def sloped_geometry(Gamma: int, beta: int) -> dict[str, Any]:
    """Centres and endpoints of S_{1,1} in V^Gamma coordinates."""
    G = float(Gamma)
    h = 1.0 / (G * G)
    c_left = np.array([0.5 / G, 0.75 + 0.5 * h])
    c_right = np.array([beta - 0.5 / G, 0.25 + 0.5 * h])
    d = c_right - c_left
    y_up, y_down = 0.75 + 2 * h, 0.25 - h
    c_up = c_left + d * (y_up - c_left[1]) / d[1]
    c_down = c_left + d * (y_down - c_left[1]) / d[1]
    span = float(np.hypot(*(c_up - c_down)))
    l_gamma = math.ceil(span * G - 1e-9)
    t = l_gamma / (span * G)
    c_up2 = c_down + t * (c_up - c_down)
    return dict(c_left=c_left, c_right=c_right, c_up=c_up, c_down=c_down, c_up_prime=c_up2,
                l_gamma=int(l_gamma), length=l_gamma / G)


def derive_params(gamma: float, calib: Calibration | None = None, gamma_max: float = GAMMA_MAX) -> StrategyParams:
    """Dyadic Gamma, beta and the switch-block size for ``gamma``.

    Infeasible calibrations (beta * N'_gamma > Gamma) are flagged, not
    raised; the block size then falls back to Gamma/beta (one switch block).
    """
    calib = DEFAULT_CALIBRATION if calib is None else calib
    if not (0 < gamma <= gamma_max and gamma < 1):
        raise DomainError(f"gamma must lie in (0, {gamma_max}], got {gamma}")
    Gamma = dyadic_ceil(gamma ** -2)
    beta = dyadic_ceil(gamma ** (-2.0 / 3.0))
    m = int(round(math.log2(Gamma)))
    npr = n_prime(gamma, beta, calib)
    n_cal = dyadic_ceil(max(2.0, npr)) if math.isfinite(npr) else 2 ** 62
    feasible = beta * n_cal <= Gamma
    n_eff = max(1, min(n_cal, Gamma // beta))
    l_gamma = sloped_geometry(Gamma, beta)["l_gamma"]
    return StrategyParams(float(gamma), Gamma, beta, m, n_eff, l_gamma, calib, npr, n_cal, feasible)


# ---------------------------------------------------------------------------
# frames

IDENTITY = np.array([0.0, 0.0, 1.0, 0.0, 1.0])


def make_frame(origin, u, scale) -> np.ndarray:
    return np.array([origin[0], origin[1], u[0], u[1], scale], dtype=float)


def compose(parent: np.ndarray, local: np.ndarray) -> np.ndarray:
    """World frames of rectangles given in ``parent``-local coordinates."""
    local = np.atleast_2d(local)
    ox, oy, ux, uy, s = parent
    out = np.empty_like(local)
    out[:, 0] = ox + s * (local[:, 0] * ux - local[:, 1] * uy)
    out[:, 1] = oy + s * (local[:, 0] * uy + local[:, 1] * ux)
    out[:, 2] = local[:, 2] * ux - local[:, 3] * uy
    out[:, 3] = local[:, 2] * uy + local[:, 3] * ux
    out[:, 4] = s * local[:, 4]
    return out


def compose_each(parents: np.ndarray, local: np.ndarray) -> np.ndarray:
    """One local rectangle placed in each of several parent frames."""
    P = np.atleast_2d(parents)
    lx, ly, lux, luy, ls = local
    ox, oy, ux, uy, s = P.T
    return np.stack([ox + s * (lx * ux - ly * uy), oy + s * (lx * uy + ly * ux),
                     lux * ux - luy * uy, lux * uy + luy * ux, s * ls], 1)


def to_world(frames: np.ndarray, X, Y) -> np.ndarray:
    """Points (X, Y) of each frame; returns shape (k, 2)."""
    f = np.atleast_2d(frames)
    X = np.broadcast_to(np.asarray(X, dtype=float), f.shape[:1])
    Y = np.broadcast_to(np.asarray(Y, dtype=float), f.shape[:1])
    s = f[:, 4]
    return np.stack([f[:, 0] + s * (X * f[:, 2] - Y * f[:, 3]),
                     f[:, 1] + s * (X * f[:, 3] + Y * f[:, 2])], 1)


def to_local(frame: np.ndarray, x, y):
    ox, oy, ux, uy, s = frame
    dx, dy = np.asarray(x) - ox, np.asarray(y) - oy
    return (dx * ux + dy * uy) / s, (-dx * uy + dy * ux) / s


def corners(frames: np.ndarray, length: float) -> np.ndarray:
    """Corners (k, 4, 2) in order (0,0), (L,0), (L,1), (0,1)."""
    return np.stack([to_world(frames, 0, 0), to_world(frames, length, 0),
                     to_world(frames, length, 1), to_world(frames, 0, 1)], 1)


# ---------------------------------------------------------------------------
# segment geometry

def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def _point_segment(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(L2 > 0, ((px - ax) * dx + (py - ay) * dy) / L2, 0.0)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def segment_distance(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Distance between segments P[k] = (x0, y0, x1, y1) and Q[k]."""
    P, Q = np.atleast_2d(P), np.atleast_2d(Q)
    a0x, a0y, a1x, a1y = P.T
    b0x, b0y, b1x, b1y = Q.T
    d = np.minimum.reduce([
        _point_segment(a0x, a0y, b0x, b0y, b1x, b1y), _point_segment(a1x, a1y, b0x, b0y, b1x, b1y),
        _point_segment(b0x, b0y, a0x, a0y, a1x, a1y), _point_segment(b1x, b1y, a0x, a0y, a1x, a1y)])
    o1 = _cross(a1x - a0x, a1y - a0y, b0x - a0x, b0y - a0y)
    o2 = _cross(a1x - a0x, a1y - a0y, b1x - a0x, b1y - a0y)
    o3 = _cross(b1x - b0x, b1y - b0y, a0x - b0x, a0y - b0y)
    o4 = _cross(b1x - b0x, b1y - b0y, a1x - b0x, a1y - b0y)
    proper = (o1 * o2 < 0) & (o3 * o4 < 0)
    return np.where(proper, 0.0, d)


def segments_intersect(P, Q, tol: float = GEOM_TOL) -> np.ndarray:
    return segment_distance(P, Q) <= tol


def segment_components(segs: np.ndarray, tol: float = GEOM_TOL) -> tuple[int, np.ndarray]:
    """Connected components of the segment intersection graph (spatial hashing)."""
    segs = np.atleast_2d(np.asarray(segs, dtype=float))
    k = segs.shape[0]
    if k <= 1:
        return k, np.zeros(k, dtype=np.int64)
    xmin = np.minimum(segs[:, 0], segs[:, 2]) - tol
    xmax = np.maximum(segs[:, 0], segs[:, 2]) + tol
    ymin = np.minimum(segs[:, 1], segs[:, 3]) - tol
    ymax = np.maximum(segs[:, 1], segs[:, 3]) + tol
    lens = np.hypot(segs[:, 2] - segs[:, 0], segs[:, 3] - segs[:, 1])
    cell = max(2.0 * float(np.median(lens)), 1e-12)
    x0, y0 = xmin.min(), ymin.min()
    while True:
        ci0 = np.floor((xmin - x0) / cell).astype(np.int64)
        ci1 = np.floor((xmax - x0) / cell).astype(np.int64)
        cj0 = np.floor((ymin - y0) / cell).astype(np.int64)
        cj1 = np.floor((ymax - y0) / cell).astype(np.int64)
        nx, ny = ci1 - ci0 + 1, cj1 - cj0 + 1
        cnt = nx * ny
        if cnt.sum() <= 40 * k + 1000:
            break
        cell *= 2.0
    seg_id = np.repeat(np.arange(k), cnt)
    off = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    ci = ci0[seg_id] + off % nx[seg_id]
    cj = cj0[seg_id] + off // nx[seg_id]
    width = int(ci.max()) + 1
    cid = cj * width + ci
    order = np.lexsort((seg_id, cid))
    cid, seg_id = cid[order], seg_id[order]
    pa, pb = [], []
    d = 1
    while True:
        same = cid[d:] == cid[:-d]
        if not same.any():
            break
        pa.append(seg_id[:-d][same])
        pb.append(seg_id[d:][same])
        d += 1
    if pa:
        a = np.concatenate(pa)
        b = np.concatenate(pb)
        pairs = np.unique(np.stack([np.minimum(a, b), np.maximum(a, b)], 1), axis=0)
        hit = segments_intersect(segs[pairs[:, 0]], segs[pairs[:, 1]], tol)
        pairs = pairs[hit]
    else:
        pairs = np.zeros((0, 2), dtype=np.int64)
    A = sp.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(k, k))
    return csgraph.connected_components(A, directed=False)


# ---------------------------------------------------------------------------
# layout

@dataclass(frozen=True)
class GadgetCheck:
    j: int
    integral: bool
    length_ok: bool
    sides_cross: bool


@dataclass(frozen=True, eq=False)
class StripLayout:
    """Strips, sloped gadgets and their blocks, in V^Gamma-local coordinates.

    ``strip_blocks[i-1, j]`` holds the beta*Gamma block frames of R_{i,j+1};
    ``sloped_blocks[i-1, j]`` the l_gamma block frames of S_{i,j+1}.
    """

    params: StrategyParams
    strip_blocks: np.ndarray
    sloped_blocks: np.ndarray
    strip_frames: np.ndarray
    sloped_frames: np.ndarray
    geometry: dict
    checks: tuple[GadgetCheck, ...]

    @property
    def join_failures(self) -> list[int]:
        return [c.j for c in self.checks if not c.sides_cross]


def _long_sides(frames: np.ndarray, length: float) -> np.ndarray:
    c = corners(frames, length)
    return np.stack([np.concatenate([c[:, 0], c[:, 1]], 1), np.concatenate([c[:, 3], c[:, 2]], 1)], 1)


def build_layout(params: StrategyParams) -> StripLayout:
    """Strip layout of V^Gamma.

    The sloped gadgets always split into whole blocks (hard error otherwise).
    The length bound and the side-crossing property only hold for small
    gamma; they are recorded per location in ``checks``.
    """
    G, beta = params.Gamma, params.beta
    J, B = params.locations, params.blocks_per_location
    if J < 2:
        raise DomainError(f"layout needs Gamma/beta >= 2 (got Gamma={G}, beta={beta})")
    h = 1.0 / (G * G)
    strip_blocks = np.empty((2, J, B, 5))
    strip_frames = np.empty((2, J, 5))
    for i, y in ((0, 0.75), (1, 0.25)):
        for j in range(J):
            x = j * beta + np.arange(B) / G
            strip_blocks[i, j] = np.stack([x, np.full(B, y), np.ones(B), np.zeros(B), np.full(B, h)], 1)
            # R_{i,j} itself: a copy of V^{beta Gamma^2} at scale Gamma^-2
            strip_frames[i, j] = [j * beta, y, 1.0, 0.0, h]
    geo = sloped_geometry(G, beta)
    L = geo["l_gamma"]
    top, bot = geo["c_up_prime"], geo["c_down"]
    u = (bot - top) / np.hypot(*(bot - top))
    up = np.array([-u[1], u[0]])
    mirror = 0.5 + 0.5 * h
    sloped_blocks = np.empty((2, J, L, 5))
    sloped_frames = np.empty((2, J, 5))
    for j in range(J):
        shift = np.array([j * beta, 0.0])
        start = top + shift
        o = start[None, :] + (np.arange(L) / G)[:, None] * u[None, :] - 0.5 * h * up[None, :]
        sloped_blocks[0, j] = np.concatenate([o, np.tile(u, (L, 1)), np.full((L, 1), h)], 1)
        sloped_frames[0, j] = [*(start - 0.5 * h * up), u[0], u[1], h]
        # S_2: mirror of S_1 in the horizontal line through the layout centre
        ur = np.array([u[0], -u[1]])
        upr = np.array([-ur[1], ur[0]])
        start_r = np.array([start[0], 2 * mirror - start[1]])
        o2 = start_r[None, :] + (np.arange(L) / G)[:, None] * ur[None, :] - 0.5 * h * upr[None, :]
        sloped_blocks[1, j] = np.concatenate([o2, np.tile(ur, (L, 1)), np.full((L, 1), h)], 1)
        sloped_frames[1, j] = [*(start_r - 0.5 * h * upr), ur[0], ur[1], h]
    checks = []
    dist_lr = float(np.hypot(*(geo["c_left"] - geo["c_right"])))
    for j in range(J):
        seg_len = L / G
        integral = abs(seg_len * G - round(seg_len * G)) < GEOM_TOL
        length_ok = seg_len <= dist_lr + 2.0 / G + GEOM_TOL
        if not integral:
            raise StructuralError(f"sloped gadget at location {j + 1} does not split into whole blocks")
        ok = True
        for i in (0, 1):
            s_sides = _long_sides(sloped_frames[i, j][None], L * G)[0]
            r_left = _long_sides(strip_blocks[i, j, 0][None], G)[0]
            r_right = _long_sides(strip_blocks[1 - i, j, B - 1][None], G)[0]
            for r in (r_left, r_right):
                P = np.repeat(s_sides, 2, axis=0)
                Q = np.tile(r, (2, 1))
                ok &= bool(segments_intersect(P, Q).all())
        checks.append(GadgetCheck(j + 1, integral, length_ok, ok))
    layout = StripLayout(params, strip_blocks, sloped_blocks, strip_frames, sloped_frames, geo, tuple(checks))
    if not all(c.length_ok for c in checks):
        log.info("sloped gadget longer than |c_left - c_right| + 2/Gamma (gamma=%g)", params.gamma)
    if layout.join_failures:
        log.info("sloped gadget sides miss the strip ends at %d locations (gamma=%g)",
                 len(layout.join_failures), params.gamma)
    return layout


def reflect_frames(frames: np.ndarray, y_mirror: float, length: float) -> np.ndarray:
    """Proper frames of the mirror images of rectangles in the line y = y_mirror."""
    f = np.atleast_2d(frames)
    top = to_world(f, 0, 1)
    out = np.empty_like(f)
    out[:, 0] = top[:, 0]
    out[:, 1] = 2 * y_mirror - top[:, 1]
    out[:, 2] = f[:, 2]
    out[:, 3] = -f[:, 3]
    out[:, 4] = f[:, 4]
    return out


# ---------------------------------------------------------------------------
# switching decision

@dataclass(frozen=True, eq=False)
class SwitchDecision:
    i: np.ndarray
    delta_z: np.ndarray
    block_sums: np.ndarray

    def switches(self) -> list[int]:
        """1-based locations j with i_j != i_{j+1} (i_{J+1} := i_J)."""
        nxt = np.append(self.i[1:], self.i[-1])
        return [int(j) + 1 for j in np.flatnonzero(self.i != nxt)]


def _line_values(field, start: np.ndarray, direction: np.ndarray, count: int, step: float) -> np.ndarray:
    """Field values at start + (q + 1/2)*step*direction, q = 0..count-1."""
    t = (np.arange(count) + 0.5) * step
    if isinstance(field, EtaField):
        dx, dy = float(direction[0]), float(direction[1])
        if dy == 0.0 and abs(dx) == 1.0:
            xs = start[0] + dx * t
            g = GridSpec(count, 1, step, (float(xs.min()), float(start[1])))
            v = field.evaluate(g)[0]
            return v if dx > 0 else v[::-1]
        if dx == 0.0 and abs(dy) == 1.0:
            ys = start[1] + dy * t
            g = GridSpec(1, count, step, (float(start[0]), float(ys.min())))
            v = field.evaluate(g)[:, 0]
            return v if dy > 0 else v[::-1]
        return field.evaluate_points(start[0] + direction[0] * t, start[1] + direction[1] * t)
    return np.asarray(field.interpolate(start[0] + direction[0] * t, start[1] + direction[1] * t))


def delta_z(eta_top_band, layout: StripLayout, params: StrategyParams,
            frame: np.ndarray = IDENTITY, gamma: float | None = None) -> np.ndarray:
    """gamma * (integral over the upper side of R_{1,j} - same for R_{2,j}), world units."""
    g = params.gamma if gamma is None else gamma
    G = params.Gamma
    count = G * DZ_STEPS_PER_UNIT
    step_local = 1.0 / DZ_STEPS_PER_UNIT
    u = frame[2:4]
    vals = []
    for y in (0.75 + 1.0 / G ** 2, 0.25 + 1.0 / G ** 2):
        start = to_world(frame, 0.0, y)[0]
        vals.append(_line_values(eta_top_band, start, u, count, step_local * frame[4]))
    J = params.locations
    step_world = step_local * frame[4]
    top = vals[0].reshape(J, -1).sum(axis=1) * step_world
    bot = vals[1].reshape(J, -1).sum(axis=1) * step_world
    return g * (top - bot)


def choose_strategy(eta_top_band, layout: StripLayout, params: StrategyParams,
                    frame: np.ndarray = IDENTITY) -> SwitchDecision:
    """i = 2 on switch blocks whose Delta Z sum is positive, else 1."""
    dz = delta_z(eta_top_band, layout, params, frame)
    N = params.N_gamma
    sums = dz.reshape(-1, N).sum(axis=1)
    i = np.repeat(np.where(sums > 0, 2, 1), N).astype(np.int8)
    return SwitchDecision(i, dz, sums)


def forced_decision(i, params: StrategyParams) -> SwitchDecision:
    i = np.asarray(i, dtype=np.int8)
    if i.shape != (params.locations,) or not np.isin(i, (1, 2)).all():
        raise DomainError(f"decision must be {params.locations} entries in {{1, 2}}")
    if i.size > 1 and i[0] != i[1]:
        raise DomainError("no switch allowed at location 1")
    z = np.zeros(params.locations)
    return SwitchDecision(i, z, z.reshape(-1, params.N_gamma).sum(axis=1))


def bridge_chains(layout: StripLayout, decision: SwitchDecision) -> list[tuple[np.ndarray, int]]:
    """Maximal runs of adjacent blocks (frames, provenance) selected by the decision."""
    i = decision.i
    J = len(i)
    chains: list[tuple[np.ndarray, int]] = []
    cur: list[np.ndarray] = []
    for j in range(J):
        a = int(i[j]) - 1
        b = int(i[j + 1]) - 1 if j + 1 < J else a
        if a == b:
            cur.append(layout.strip_blocks[a, j])
        else:
            cur.append(layout.strip_blocks[a, j, :1])
            chains.append((np.concatenate(cur), PROV_STRIP))
            chains.append((layout.sloped_blocks[a, j], PROV_SLOPED))
            cur = [layout.strip_blocks[1 - a, j, -1:]]
    chains.append((np.concatenate(cur), PROV_STRIP))
    return chains


def tie_frames(left: np.ndarray, Gamma: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The three tying rectangles for each block in ``left`` and its right neighbour."""
    G = float(Gamma)
    loc = np.array([[G, 0.0, 0.0, 1.0, 1.0 / G],
                    [G + 1.0 / G, 0.0, 0.0, 1.0, 1.0 / G],
                    [G - 1.0 / G, 0.0, 1.0, 0.0, 2.0 / G ** 2]])
    return tuple(compose_each(left, loc[t]) for t in range(3))


# ---------------------------------------------------------------------------
# band sources

class EtaBands:
    """Bands 1..n of one eta realisation, evaluated lazily on demand."""

    def __init__(self, seed: int, n: int, slabs_per_octave: int = 2):
        if n < 0:
            raise DomainError("n must be >= 0")
        self.seed = seeding.check_seed(seed)
        self.n = int(n)
        self.slabs_per_octave = slabs_per_octave
        self._bands: dict[int, EtaField] = {}

    def band(self, k: int) -> EtaField:
        if not (1 <= k <= self.n):
            raise DepthError(f"band {k} not available (have 1..{self.n})")
        if k not in self._bands:
            self._bands[k] = band_field(k, self.seed, self.slabs_per_octave)
        return self._bands[k]

    def total(self, mesh: float | None = None) -> WindowedField:
        mesh = 2.0 ** (-self.n - 1) if mesh is None else mesh
        return WindowedField(EtaField(2.0 ** -max(self.n, 0), 1.0, self.seed, self.slabs_per_octave), mesh)


class SampledBands:
    """Adapter exposing a ``BandDecomposition`` through the band-source interface."""

    def __init__(self, decomposition: BandDecomposition):
        self.decomposition = decomposition
        self.n = decomposition.n

    def band(self, k: int) -> FieldSample:
        if not (1 <= k <= self.n):
            raise DepthError(f"band {k} not available (have 1..{self.n})")
        return self.decomposition.band(k)

    def total(self, mesh: float | None = None) -> FieldSample:
        return self.decomposition.total


# ---------------------------------------------------------------------------
# crossings

@dataclass(frozen=True, eq=False)
class Polypath:
    """Segments (x0, y0, x1, y1) with selection flags, plus construction metadata."""

    segments: np.ndarray
    selected: np.ndarray
    provenance: np.ndarray
    rect: np.ndarray = field(default_factory=lambda: IDENTITY.copy())
    rect_length: float = 1.0
    top_blocks: np.ndarray | None = None
    decision: SwitchDecision | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.segments.shape[0])

    def selected_segments(self) -> np.ndarray:
        return self.segments[self.selected]

    def lengths(self) -> np.ndarray:
        s = self.segments
        return np.hypot(s[:, 2] - s[:, 0], s[:, 3] - s[:, 1])


def crossing_report(poly: Polypath, tol: float = GEOM_TOL) -> dict[str, Any]:
    segs = poly.selected_segments()
    if len(segs) == 0:
        return dict(connected=False, touches_left=False, touches_right=False, contained=False, components=0)
    X0, Y0 = to_local(poly.rect, segs[:, 0], segs[:, 1])
    X1, Y1 = to_local(poly.rect, segs[:, 2], segs[:, 3])
    X = np.concatenate([X0, X1])
    Y = np.concatenate([Y0, Y1])
    lt = tol / poly.rect[4]
    L = poly.rect_length
    ncomp, _ = segment_components(segs, tol)
    return dict(connected=ncomp == 1, components=int(ncomp),
                touches_left=bool(X.min() <= lt), touches_right=bool(X.max() >= L - lt),
                contained=bool(X.min() >= -lt and X.max() <= L + lt and Y.min() >= -lt and Y.max() <= 1 + lt))


def is_crossing(poly: Polypath, tol: float = GEOM_TOL) -> bool:
    r = crossing_report(poly, tol)
    return r["connected"] and r["touches_left"] and r["touches_right"] and r["contained"]


def check_crossing(poly: Polypath, tol: float = GEOM_TOL) -> None:
    r = crossing_report(poly, tol)
    if not (r["connected"] and r["touches_left"] and r["touches_right"] and r["contained"]):
        raise StructuralError(f"constructed polypath is not a crossing: {r}")


def _midlines(frames: np.ndarray, Gamma: float) -> np.ndarray:
    a = to_world(frames, 0.0, 0.5)
    b = to_world(frames, Gamma, 0.5)
    return np.concatenate([a, b], 1)


class _Builder:
    def __init__(self, params: StrategyParams, layout: StripLayout, source, n: int,
                 max_level: int, override: SwitchDecision | None):
        self.p = params
        self.layout = layout
        self.source = source
        self.n = n
        self.max_level = max_level
        self.override = override
        self.segs: list[np.ndarray] = []
        self.prov: list[np.ndarray] = []
        self.decisions = 0
        self.capped = 0

    def emit(self, frames: np.ndarray, prov: int):
        if len(frames):
            self.segs.append(_midlines(frames, self.p.Gamma))
            self.prov.append(np.full(len(frames), prov, dtype=np.int8))

    def run(self, frames: np.ndarray, level: int, prov: int, top: bool = False):
        """Crossings of each rect in ``frames`` (all at the same level)."""
        a = self.n - level
        if a <= 0:
            self.emit(frames, prov)
            return None
        if level >= self.max_level:
            self.capped += len(frames)
            self.emit(frames, prov)
            return None
        m = self.p.m_Gamma
        result = None
        for f in frames:
            if top and self.override is not None:
                dec = self.override
            else:
                dec = choose_strategy(self.source.band(level + 1), self.layout, self.p, f)
                self.decisions += 1
            chains = bridge_chains(self.layout, dec)
            world_chains = [(compose(f, c), pv) for c, pv in chains]
            if top:
                result = (dec, np.concatenate([c for c, _ in world_chains]))
            for blocks, pv in world_chains:
                child_prov = PROV_TIE if prov == PROV_TIE else (pv if prov == PROV_STRIP else prov)
                self.run(blocks, level + 2 * m, child_prov)
                if len(blocks) > 1:
                    t1, t2, t3 = tie_frames(blocks[:-1], self.p.Gamma)
                    self.run(np.concatenate([t1, t2]), level + 3 * m, PROV_TIE)
                    self.run(t3, level + 4 * m - 1, PROV_TIE)
        return result


def build_crossing(bands, n: int, params: StrategyParams, rect: np.ndarray = IDENTITY,
                   layout: StripLayout | None = None, decision: SwitchDecision | None = None,
                   check: bool = True) -> Polypath:
    """Crossing of the copy of V_l^Gamma given by ``rect`` at field scale n.

    ``bands`` is an ``EtaBands``, ``SampledBands`` or ``BandDecomposition``;
    only bands l+1 and finer are read.  ``decision`` overrides the top-level
    switching strategy (used for fixed-line comparisons).
    """
    if isinstance(bands, BandDecomposition):
        bands = SampledBands(bands)
    rect = np.asarray(rect, dtype=float)
    level = int(round(-math.log2(rect[4])))
    if abs(2.0 ** -level - rect[4]) > 1e-12 * rect[4]:
        raise DomainError("rect scale must be a power of 2")
    if n - level >= 1 and bands.n < n:
        raise DepthError(f"crossing at scale {n} needs bands up to {n}, source has {bands.n}")
    layout = build_layout(params) if layout is None else layout
    if decision is not None and decision.i.shape != (params.locations,):
        raise DomainError("decision length does not match the layout")
    max_level = 4 * params.m_Gamma
    b = _Builder(params, layout, bands, n, max(max_level, level + 1), decision)
    res = b.run(rect[None], level, PROV_STRIP, top=True)
    if b.capped:
        log.info("recursion capped at level %d: %d rects replaced by midlines", max_level, b.capped)
    segs = np.concatenate(b.segs)
    prov = np.concatenate(b.prov)
    dec, top_blocks = (res if res is not None else (None, None))
    poly = Polypath(segs, np.ones(len(segs), dtype=bool), prov, rect.copy(), float(params.Gamma),
                    top_blocks, dec, dict(n=n, level=level, decisions=b.decisions, capped=b.capped,
                                          join_failures=layout.join_failures))
    if check:
        check_crossing(poly)
    return poly


# ---------------------------------------------------------------------------
# weights

def _field_mesh(f) -> float:
    return f.grid.mesh if isinstance(f, FieldSample) else f.mesh


def segment_integrals(f, segs: np.ndarray, gamma: float, step: float) -> np.ndarray:
    """Composite-midpoint integrals of exp(gamma X) along each segment."""
    segs = np.atleast_2d(np.asarray(segs, dtype=float))
    L = np.hypot(segs[:, 2] - segs[:, 0], segs[:, 3] - segs[:, 1])
    nk = np.maximum(1, np.ceil(L / step - 1e-9).astype(np.int64))
    starts = np.cumsum(nk) - nk
    idx = np.repeat(np.arange(len(segs)), nk)
    t = (np.arange(nk.sum()) - starts[idx] + 0.5) / nk[idx]
    if gamma == 0.0:
        return L.copy()
    x = segs[idx, 0] + t * (segs[idx, 2] - segs[idx, 0])
    y = segs[idx, 1] + t * (segs[idx, 3] - segs[idx, 1])
    vals = np.exp(gamma * f.interpolate(x, y))
    return L * (np.add.reduceat(vals, starts) / nk)


def line_integral(f, segment, gamma: float, step: float | None = None) -> float:
    """Integral of exp(gamma X) along one segment (bilinear X, step <= mesh)."""
    mesh = _field_mesh(f)
    step = mesh / 2 if step is None else step
    if step > mesh * (1 + 1e-12):
        raise DomainError("quadrature step must not exceed the field mesh")
    seg = np.asarray(segment, dtype=float).reshape(1, 4)
    if isinstance(f, FieldSample):
        x0, x1, y0, y1 = f.grid.extent()
        t = GEOM_TOL
        xs, ys = seg[0, [0, 2]], seg[0, [1, 3]]
        if xs.min() < x0 - t or xs.max() > x1 + t or ys.min() < y0 - t or ys.max() > y1 + t:
            raise DomainError("segment leaves the field domain")
    return float(segment_integrals(f, seg, gamma, step)[0])


@dataclass(frozen=True)
class WeightLedger:
    base_length_term: float
    gadget_excess_term: float
    field_integral_term: float
    tie_term: float
    total: float
    measured: float

    def to_dict(self) -> dict:
        return asdict(self)


def crossing_weight(f, poly: Polypath, gamma: float, step: float | None = None) -> WeightLedger:
    """Weight of the selected segments and its split by provenance."""
    step = _field_mesh(f) / 2 if step is None else step
    segs = poly.selected_segments()
    prov = poly.provenance[poly.selected]
    L = np.hypot(segs[:, 2] - segs[:, 0], segs[:, 3] - segs[:, 1])
    I = segment_integrals(f, segs, gamma, step)
    base = float(poly.rect_length * poly.rect[4])
    tie = math.fsum(L[prov == PROV_TIE].tolist())
    main = math.fsum(L[prov != PROV_TIE].tolist())
    excess = main - base
    fld = math.fsum((I - L).tolist())
    total = ((base + excess) + tie) + fld
    return WeightLedger(base, float(excess), fld, tie, float(total), math.fsum(I.tolist()))


# ---------------------------------------------------------------------------
# dominance

@dataclass(frozen=True)
class DominanceResult:
    lattice_distance: float
    ledger_total: float
    allowance: float
    lattice_mesh: float
    nodes: int

    @property
    def passed(self) -> bool:
        return self.lattice_distance <= (1 + self.allowance) * self.ledger_total


def tube_mask(blocks: np.ndarray, Gamma: float, grid: GridSpec, tol: float = GEOM_TOL) -> np.ndarray:
    mask = np.zeros(grid.shape, dtype=bool)
    c = corners(blocks, Gamma)
    for f, cc in zip(blocks, c):
        i0, j0 = np.floor(grid.index_of(cc[:, 0].min(), cc[:, 1].min()) - np.array([1e-9, 1e-9])).astype(int)
        i1, j1 = np.ceil(grid.index_of(cc[:, 0].max(), cc[:, 1].max()) + np.array([1e-9, 1e-9])).astype(int)
        i0, j0 = max(i0, 0), max(j0, 0)
        i1, j1 = min(i1, grid.width - 1), min(j1, grid.height - 1)
        if i1 < i0 or j1 < j0:
            continue
        X, Y = np.meshgrid(grid.xs()[i0:i1 + 1], grid.ys()[j0:j1 + 1])
        lx, ly = to_local(f, X, Y)
        lt = tol / f[4]
        inside = (lx >= -lt) & (lx <= Gamma + lt) & (ly >= -lt) & (ly <= 1 + lt)
        mask[j0:j1 + 1, i0:i1 + 1] |= inside
    return mask


def dominance_check(f, poly: Polypath, gamma: float, ledger: WeightLedger | None = None,
                    allowance: float = 0.05, lattice_mesh: float | None = None) -> DominanceResult:
    """Lattice FPP distance inside the tube of top-level blocks vs the ledger total."""
    if poly.top_blocks is None:
        raise DomainError("dominance needs a recursive crossing (top-level blocks)")
    ledger = crossing_weight(f, poly, gamma) if ledger is None else ledger
    G = poly.rect_length
    h = poly.top_blocks[0, 4] / 4 if lattice_mesh is None else lattice_mesh
    c = corners(poly.top_blocks, G).reshape(-1, 2)
    grid = GridSpec.covering(c[:, 0].min(), c[:, 0].max(), c[:, 1].min(), c[:, 1].max(), h)
    mask = tube_mask(poly.top_blocks, G, grid)
    J, I = np.nonzero(mask)
    xs, ys = grid.world(I, J)
    w = np.ones(grid.shape)
    w[J, I] = h * np.exp(gamma * f.interpolate(xs, ys))
    lat = WeightedLattice(grid, gamma, w)
    segs = poly.selected_segments()
    ends = np.concatenate([segs[:, :2], segs[:, 2:]])
    X, _ = to_local(poly.rect, ends[:, 0], ends[:, 1])
    pl, pr = ends[np.argmin(X)], ends[np.argmax(X)]

    def nearest(p):
        d = (xs - p[0]) ** 2 + (ys - p[1]) ** 2
        k = int(np.argmin(d))
        return int(I[k]), int(J[k])

    res = fpp_distance(lat, nearest(pl), nearest(pr), region=mask)
    return DominanceResult(res.distance, ledger.total, allowance, h, int(mask.sum()))


# ---------------------------------------------------------------------------
# expected weight

def lambda_bound(n: int, gamma: float, c: float) -> float:
    """Gamma * (1 - c*gamma^(4/3)/2)^floor(n / 2 m_Gamma); Gamma for n <= 0."""
    Gamma = dyadic_ceil(gamma ** -2)
    m = int(round(math.log2(Gamma)))
    if n <= 0:
        return float(Gamma)
    k = n // (2 * m) if m > 0 else 0
    return Gamma * (1.0 - 0.5 * c * gamma ** (4.0 / 3.0)) ** k


@dataclass(frozen=True)
class LambdaEstimate:
    mean: float
    stderr: float
    replicas: int
    totals: tuple[float, ...]


def replica_crossing(gamma: float, n: int, seed: int, replica: int, params: StrategyParams,
                     layout: StripLayout, decision: SwitchDecision | None = None):
    src = EtaBands(seeding.replica_seed(seed, seeding.REPLICA, replica), n)
    poly = build_crossing(src, n, params, layout=layout, decision=decision)
    return src, poly


def measure_lambda(gamma: float, n: int, replicas: int, seed: int,
                   params: StrategyParams | None = None) -> LambdaEstimate:
    """Monte Carlo mean and standard error of the crossing weight at scale n.

    ``gamma`` drives both the weights and Delta Z; explicit ``params`` only
    supply the geometry.  At gamma = 0 every Delta Z vanishes, so all
    decisions are i = 1 and the result is deterministic.
    """
    if replicas < 1:
        raise ConfigError("replicas must be >= 1")
    if params is None:
        if gamma <= 0:
            raise ConfigError("gamma = 0 needs explicit geometry params")
        params = derive_params(gamma)
    elif params.gamma != gamma:
        params = replace(params, gamma=float(gamma))
    layout = build_layout(params)
    totals = []
    for r in range(replicas):
        src, poly = replica_crossing(gamma, n, seed, r, params, layout)
        f = src.total() if gamma != 0 else _ZeroField(2.0 ** (-n - 1))
        totals.append(crossing_weight(f, poly, gamma).total)
    arr = np.array(totals)
    if np.all(arr == arr[0]):
        return LambdaEstimate(float(arr[0]), 0.0, replicas, tuple(totals))
    mean = math.fsum(totals) / replicas
    se = float(np.std(arr, ddof=1) / math.sqrt(replicas)) if replicas > 1 else 0.0
    return LambdaEstimate(mean, se, replicas, tuple(totals))


class _ZeroField:
    def __init__(self, mesh: float):
        self.mesh = mesh

    def interpolate(self, x, y):
        return np.zeros(np.shape(x))


# ---------------------------------------------------------------------------
# calibration

@dataclass(frozen=True)
class PilotResult:
    calibration: Calibration
    c_samples: int
    C_fluct: float
    gain_ratio: float


def gadget_excess_length(params: StrategyParams) -> float:
    """gamma=0 length added by one switch: R_left + S + R_right - beta."""
    G = params.Gamma
    return params.l_gamma / G + 2.0 / G - params.beta


def pilot_calibration(gamma: float, replicas: int, seed: int) -> PilotResult:
    """Fit (c, C, C') from Delta Z block sums and top-band integrals over the sloped gadget."""
    params = derive_params(gamma, Calibration(1.0, 1.0, 0.0))
    layout = build_layout(params)
    N = params.locations
    sums, fl = [], []
    geo = layout.geometry
    seg = np.concatenate([geo["c_up_prime"], geo["c_down"]])
    slen = float(np.hypot(seg[2] - seg[0], seg[3] - seg[1]))
    count = int(math.ceil(slen * DZ_STEPS_PER_UNIT))
    for r in range(replicas):
        b1 = band_field(1, seeding.replica_seed(seed, seeding.REPLICA, r))
        dz = delta_z(b1, layout, params)
        sums.append(0.5 * dz.sum())
        d = (seg[2:] - seg[:2]) / slen
        vals = _line_values(b1, seg[:2], d, count, slen / count)
        fl.append(abs(vals.sum() * slen / count))
    sums = np.array(sums)
    c = float(np.var(sums, ddof=1) / (N * params.beta * gamma ** 2))
    C_fluct = float(np.mean(fl) / math.sqrt(params.beta))
    C_prime = params.beta * gadget_excess_length(params)
    ratio = float(np.mean(np.abs(sums)) / (math.sqrt(2 / math.pi) * np.std(sums, ddof=1)))
    return PilotResult(Calibration(round(c, 4), round(max(C_fluct, C_prime), 3), round(C_prime, 3)),
                       replicas, C_fluct, ratio)


# ---------------------------------------------------------------------------
# export

def polypath_to_csv(path, poly: Polypath) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x0", "y0", "x1", "y1", "selected"])
        for s, sel in zip(poly.segments, poly.selected):
            w.writerow([repr(float(v)) for v in s] + [int(sel)])


def ledger_to_json(path, ledger: WeightLedger, extra: dict | None = None) -> None:
    rec = ledger.to_dict()
    if extra:
        rec.update(extra)
    with open(path, "w") as fh:
        json.dump(rec, fh, indent=2, sort_keys=True)
