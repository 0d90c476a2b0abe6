"""Discrete Gaussian free field on a box with Dirichlet boundary.

Two samplers:

* exact: Cholesky factor of the Green matrix G = (I - P)^{-1}, P the simple
  random walk kernel restricted to interior vertices;
* band: stationary fields with covariance K_{N,k}(v, w) = 1/2 sum_{4^{k-1} <= t < 4^k} P^v(S_t = w)
  for the lazy walk (stay w.p. 1/2, each neighbour w.p. 1/8), synthesized
  spectrally on a torus large enough that the wrapped kernel mass is
  negligible.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.optimize as sopt
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import seeding
from .errors import CapacityError, ConfigError, DomainError, NumericError, ResolutionError
from .fields import FieldGenerator, FieldSample, GridSpec

MAX_INTERIOR = 4096
WRAP_TOL = 1e-8


@dataclass(frozen=True)
class DgffSpec:
    """Box V_N of ``width x height`` vertices (default N x N, N = 2^n); boundary = outer ring."""

    n: int
    margin: float = 0.25
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if int(self.n) < 1:
            raise ConfigError("n must be >= 1 (N >= 2)")
        if not (0 < self.margin < 0.5):
            raise ConfigError("margin must lie in (0, 1/2)")
        w = self.N if self.width is None else int(self.width)
        h = self.N if self.height is None else int(self.height)
        if w < 2 or h < 2:
            raise ConfigError("box sides must be >= 2")
        object.__setattr__(self, "width", w)
        object.__setattr__(self, "height", h)

    @property
    def N(self) -> int:
        return 2 ** int(self.n)

    @property
    def interior_shape(self) -> tuple[int, int]:
        return (max(self.height - 2, 0), max(self.width - 2, 0))

    @property
    def interior_count(self) -> int:
        a, b = self.interior_shape
        return a * b

    def grid(self) -> GridSpec:
        return GridSpec(self.width, self.height, 1.0, (0.0, 0.0))

    def inner_box(self) -> tuple[int, int, int, int]:
        """V_{N,eps}: vertices at l-infinity distance >= eps*N from the outer ring."""
        d = math.ceil(self.margin * self.N - 1e-9)
        x0, x1 = d, self.width - 1 - d
        y0, y1 = d, self.height - 1 - d
        if x0 > x1 or y0 > y1:
            raise ConfigError("margin leaves an empty inner box")
        return x0, x1, y0, y1

    def endpoints(self) -> tuple[tuple[int, int], tuple[int, int]]:
        """Midpoints of the left and right sides of V_{N,eps}."""
        x0, x1, y0, y1 = self.inner_box()
        ym = (y0 + y1) // 2
        return (x0, ym), (x1, ym)


def _check_budget(spec: DgffSpec) -> None:
    if spec.interior_count > MAX_INTERIOR:
        raise CapacityError(f"{spec.interior_count} interior vertices exceed the dense budget {MAX_INTERIOR}")


@functools.lru_cache(maxsize=8)
def _green(width: int, height: int) -> tuple[np.ndarray, float]:
    ny, nx = max(height - 2, 0), max(width - 2, 0)
    M = nx * ny
    if M == 0:
        return np.zeros((0, 0)), 0.0
    ex = sp.diags([np.ones(nx - 1), np.ones(nx - 1)], [-1, 1], shape=(nx, nx))
    ey = sp.diags([np.ones(ny - 1), np.ones(ny - 1)], [-1, 1], shape=(ny, ny))
    A = sp.kron(sp.identity(ny), ex) + sp.kron(ey, sp.identity(nx))
    L = (sp.identity(M) - 0.25 * A).tocsc()
    G = spla.splu(L).solve(np.eye(M))
    asym = float(np.abs(G - G.T).max())
    G = 0.5 * (G + G.T)
    G.setflags(write=False)
    return G, asym


def green_matrix(spec: DgffSpec, return_asymmetry: bool = False):
    """Expected visits G(v, w) of SRW from v to w before hitting the outer ring (interior, row-major)."""
    _check_budget(spec)
    G, asym = _green(spec.width, spec.height)
    if asym > 1e-10:
        raise NumericError(f"Green matrix asymmetry {asym:.3g} exceeds 1e-10")
    return (G, asym) if return_asymmetry else G


@dataclass(frozen=True, eq=False)
class GreenFactor:
    dimension: int
    factor: np.ndarray
    residual: float


@functools.lru_cache(maxsize=8)
def _factor(width: int, height: int) -> GreenFactor:
    G, _ = _green(width, height)
    M = G.shape[0]
    if M == 0:
        return GreenFactor(0, np.zeros((0, 0)), 0.0)
    try:
        Lc = sla.cholesky(G, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"Cholesky factorization failed: {exc}") from exc
    res = float(np.abs(Lc @ Lc.T - G).max())
    if not res < 1e-9 * float(np.abs(G).max()):
        raise NumericError(f"factor residual {res:.3g} too large")
    Lc.setflags(write=False)
    return GreenFactor(M, Lc, res)


def green_factor(spec: DgffSpec) -> GreenFactor:
    _check_budget(spec)
    return _factor(spec.width, spec.height)


def dgff_band(spec: DgffSpec) -> tuple[float, float]:
    return (1.0 / spec.N, 1.0)


def sample_dgff_exact(spec: DgffSpec, seed: int, replica: int = 0) -> FieldSample:
    """DGFF with covariance exactly G; zero on the outer ring."""
    gf = green_factor(spec)
    vals = np.zeros((spec.height, spec.width))
    if gf.dimension:
        z = seeding.substream(seed, seeding.DGFF_EXACT, replica).standard_normal(gf.dimension)
        ny, nx = spec.interior_shape
        vals[1:-1, 1:-1] = (gf.factor @ z).reshape(ny, nx)
    return FieldSample(spec.grid(), vals, dgff_band(spec), FieldGenerator.DgffExact, seed)


# ---------------------------------------------------------------------------
# lazy-walk band decomposition

def lazy_gap(L: int, half: bool = True) -> np.ndarray:
    """1 - phi on the L-torus frequencies, phi the lazy-step characteristic function (rfft2 layout if ``half``)."""
    xi1 = 2 * np.pi * np.fft.fftfreq(L)
    xi2 = 2 * np.pi * (np.fft.rfftfreq(L) if half else np.fft.fftfreq(L))
    # 1 - phi = (sin^2(xi1/2) + sin^2(xi2/2)) / 2, computed without cancellation
    one_minus = 0.5 * (np.sin(xi1 / 2)[:, None] ** 2 + np.sin(xi2 / 2)[None, :] ** 2)
    return one_minus


def band_times(k: int) -> tuple[int, int]:
    return 4 ** (k - 1), 4 ** k


def band_spectrum(L: int, a: int, b: int, half: bool = True) -> np.ndarray:
    """1/2 sum_{a <= t < b} phi^t on the torus frequencies."""
    om = lazy_gap(L, half)
    with np.errstate(divide="ignore", invalid="ignore"):
        logphi = np.log1p(-om)
        pa = np.exp(a * logphi)
        geo = -np.expm1((b - a) * logphi) / om
        S = 0.5 * pa * geo
    S[om == 0] = 0.5 * (b - a)
    S[np.isnan(S)] = 0.0
    return np.maximum(S, 0.0)


def tail_bound(t: int, a: float) -> float:
    """Chernoff bound on P(X_t >= a) for the 1-d marginal (+-1 w.p. 1/8 each, else stay)."""
    if a <= 0:
        return 1.0

    def f(lam):
        return t * math.log(0.75 + 0.25 * math.cosh(lam)) - lam * a

    res = sopt.minimize_scalar(f, bounds=(1e-12, 50.0), method="bounded", options={"xatol": 1e-10})
    return min(1.0, math.exp(min(res.fun, 0.0)))


def wrap_mass(L: int, k_max: int) -> float:
    """Bound on the fraction of band kernel mass outside the half-torus (union over 4 sides)."""
    _, b = band_times(k_max)
    return min(1.0, 4.0 * tail_bound(b - 1, L / 2.0))


def _nice(n: int) -> int:
    m = n
    while True:
        r = m
        for p in (2, 3, 5):
            while r % p == 0:
                r //= p
        if r == 1:
            return m
        m += 1


@functools.lru_cache(maxsize=64)
def auto_torus(width: int, height: int, k_max: int) -> int:
    L = _nice(2 * max(width, height))
    while wrap_mass(L, k_max) > WRAP_TOL:
        L = _nice(L + 1)
    return L


def _torus_for(spec: DgffSpec, k_max: int, torus: int | None) -> int:
    if torus is None:
        return auto_torus(spec.width, spec.height, k_max)
    L = int(torus)
    if L < 2 * max(spec.width, spec.height) or wrap_mass(L, k_max) > WRAP_TOL:
        raise ResolutionError(f"torus {L} too small: wrapped kernel mass exceeds {WRAP_TOL:g}")
    return L


def band_kernel(spec: DgffSpec, k: int, torus: int | None = None) -> np.ndarray:
    """Torus covariance kernel K(x) = Cov(X_0, X_x) of band k (full L x L array)."""
    if not (1 <= k <= spec.n):
        raise DomainError(f"band index must satisfy 1 <= k <= n={spec.n}")
    L = _torus_for(spec, k, torus)
    a, b = band_times(k)
    return np.fft.irfft2(band_spectrum(L, a, b), s=(L, L))


def _synthesize(spectrum: np.ndarray, L: int, rng: np.random.Generator, spec: DgffSpec) -> np.ndarray:
    z = rng.standard_normal((L, L))
    x = np.fft.irfft2(np.sqrt(spectrum) * np.fft.rfft2(z), s=(L, L))
    return np.ascontiguousarray(x[:spec.height, :spec.width])


def sample_dgff_band(spec: DgffSpec, k: int, seed: int, replica: int = 0,
                     torus: int | None = None) -> FieldSample:
    """Stationary band-k field restricted to the box."""
    if not (1 <= k <= spec.n):
        raise DomainError(f"band index must satisfy 1 <= k <= n={spec.n}")
    L = _torus_for(spec, k, torus)
    a, b = band_times(k)
    vals = _synthesize(band_spectrum(L, a, b), L, seeding.substream(seed, seeding.DGFF_BAND, k, replica), spec)
    band = (2.0 ** (k - 1 - spec.n), min(1.0, 2.0 ** (k - spec.n)))
    return FieldSample(spec.grid(), vals, band, FieldGenerator.DgffBand, seed)


def sample_dgff_band_sum(spec: DgffSpec, seed: int, replica: int = 0, torus: int | None = None) -> FieldSample:
    """Sum of bands 1..n in law, drawn as one synthesis with the summed spectrum."""
    L = _torus_for(spec, spec.n, torus)
    S = band_spectrum(L, 1, 4 ** spec.n)
    vals = _synthesize(S, L, seeding.substream(seed, seeding.DGFF_BAND_SUM, replica), spec)
    return FieldSample(spec.grid(), vals, dgff_band(spec), FieldGenerator.DgffBand, seed)
