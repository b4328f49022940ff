"""Local maxima, level sets and extremal point processes of lattice fields."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter1d
from scipy.spatial import cKDTree

from .lattice import TorusLattice, torus_distance
from .spectral import as_values

SQRT_2PI = math.sqrt(2 * math.pi)


def centering(epsilon: float) -> float:
    """``(2 log(1/eps) - (3/4) log log(1/eps)) / sqrt(2 pi)``, defined for ``eps < 1/e``."""
    if not 0 < epsilon < math.exp(-1):
        raise ValueError("centering needs 0 < epsilon < 1/e")
    L = math.log(1.0 / epsilon)
    return (2.0 * L - 0.75 * math.log(L)) / SQRT_2PI


def default_radius(epsilon: float) -> float:
    """``eps log^2(1/eps)``: tends to 0 while its ratio to ``eps`` diverges."""
    return epsilon * math.log(1.0 / epsilon) ** 2


def _lattice_of(values) -> TorusLattice:
    n = values.shape[-1]
    if values.shape[-2:] != (n, n):
        raise ValueError("fields must be square")
    return TorusLattice(n)


def disk_max(values: np.ndarray, r: float) -> np.ndarray:
    """Maximum of the field over the closed ball of radius ``r`` around every site."""
    lat = _lattice_of(values)
    n = lat.n
    out = np.full(values.shape, -np.inf)
    cache = {}
    for di, w in lat.row_halfwidths(r).items():
        if w not in cache:
            if 2 * w + 1 >= n:
                cache[w] = np.broadcast_to(values.max(axis=-1, keepdims=True), values.shape)
            else:
                cache[w] = maximum_filter1d(values, size=2 * w + 1, axis=-1, mode="wrap")
        np.maximum(out, np.roll(cache[w], -di, axis=-2), out=out)
    return out


def _greedy_separated(lat: TorusLattice, candidates: np.ndarray, r: float) -> np.ndarray:
    """Scan candidates in index order, keep those farther than ``r`` from every kept one."""
    if len(candidates) <= 1 or r == 0:
        return candidates
    pts = lat.coordinates(candidates)
    tree = cKDTree(pts, boxsize=1.0)
    # closed-ball neighbours, with the same tolerance as ball membership
    neigh = tree.query_ball_point(pts, r * math.sqrt(1 + 1e-12) * (1 + 1e-15))
    kept = np.zeros(len(candidates), dtype=bool)
    blocked = np.zeros(len(candidates), dtype=bool)
    for k in range(len(candidates)):
        if blocked[k]:
            continue
        kept[k] = True
        blocked[neigh[k]] = True
    return candidates[kept]


def local_maxima(field, r: float) -> np.ndarray:
    """Sorted site indices of the ``r``-local maxima.

    A site qualifies when its value is the maximum over the closed ball of radius
    ``r``.  Sites tied within distance ``r`` are thinned by a lexicographic greedy
    pass, so the result is ``r``-separated and deterministic.
    """
    if r < 0:
        raise ValueError("radius must be non-negative")
    values = as_values(field)
    lat = _lattice_of(values)
    cand = np.flatnonzero((values >= disk_max(values, r)).ravel())
    return _greedy_separated(lat, cand, r)


def local_maxima_bruteforce(field, r: float) -> np.ndarray:
    """Direct pairwise scan of the definition; the reference for :func:`local_maxima`."""
    values = as_values(field)
    lat = _lattice_of(values)
    flat = values.ravel()
    pts = lat.coordinates(np.arange(lat.num_sites))
    d = torus_distance(pts[:, None, :], pts[None, :, :])
    near = d * d <= r * r * (1 + 1e-12)
    cand = [x for x in range(lat.num_sites) if np.all(flat[x] >= flat[near[x]])]
    kept: list[int] = []
    for x in cand:
        if not any(near[x, y] for y in kept):
            kept.append(x)
    return np.array(kept, dtype=np.int64)


@dataclass(frozen=True)
class LevelSet:
    lam: float
    m_eps: float
    n: int
    sites: np.ndarray

    def __len__(self) -> int:
        return len(self.sites)

    def coordinates(self) -> np.ndarray:
        return TorusLattice(self.n).coordinates(self.sites)


def level_set(field, lam: float, m_eps: float) -> LevelSet:
    """Sites with ``phi(x) >= m_eps - lam``."""
    values = as_values(field)
    return LevelSet(float(lam), float(m_eps), values.shape[-1], np.flatnonzero(values.ravel() >= m_eps - lam))


@dataclass(frozen=True)
class ExtremalProcessSample:
    """Points ``(x, phi(x) - m_eps)`` at the ``r``-local maxima of one field."""

    locations: np.ndarray
    heights: np.ndarray
    r: float
    epsilon: float
    m_eps: float
    sites: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.heights)

    @property
    def points(self) -> list[tuple[tuple[float, float], float]]:
        return [((float(a), float(b)), float(h)) for (a, b), h in zip(self.locations, self.heights)]


def extremal_process(field, r: float | None = None) -> ExtremalProcessSample:
    values = as_values(field)
    lat = _lattice_of(values)
    eps = lat.epsilon
    if r is None:
        r = default_radius(eps)
    m = centering(eps)
    sites = local_maxima(values, r)
    return ExtremalProcessSample(lat.coordinates(sites), values.ravel()[sites] - m, float(r), eps, m, sites)


def oscillation(field, sites) -> float:
    sites = np.asarray(sites, dtype=np.int64).ravel()
    if sites.size == 0:
        raise ValueError("oscillation of an empty set")
    v = as_values(field).ravel()[sites]
    return float(v.max() - v.min())


def argmax_map(field, x, radius: float):
    """Site of maximal value in the closed ball around ``x`` (smallest index on ties).

    ``x`` may be a single site or an array of sites.
    """
    values = as_values(field)
    lat = _lattice_of(values)
    flat = values.ravel()
    xs = np.atleast_1d(np.asarray(x, dtype=np.int64))
    off = lat.ball_offsets(radius)
    i, j = lat.site_ij(xs)
    idx = np.sort(lat.site_index(i[:, None] + off[None, :, 0], j[:, None] + off[None, :, 1]), axis=1)
    vals = flat[idx]
    best = idx[np.arange(len(xs)), np.argmax(vals, axis=1)]
    return int(best[0]) if np.ndim(x) == 0 else best


def intermediate_pair_count(level: LevelSet, r: float, epsilon: float) -> int:
    """Unordered pairs of the level set at torus distance in ``(eps r, 1/r)``.

    Pairs are tallied per displacement from the FFT autocorrelation of the
    indicator, so the cost is ``O(n^2 log n)`` however large the set is.
    """
    if r < 1:
        raise ValueError("need r >= 1")
    if len(level) < 2:
        return 0
    lo, hi = epsilon * r, 1.0 / r
    if lo >= hi:
        return 0
    n = level.n
    ind = np.zeros(n * n)
    ind[level.sites] = 1.0
    spec = np.fft.rfft2(ind.reshape(n, n))
    auto = np.rint(np.fft.irfft2(spec * spec.conj(), s=(n, n)))
    d = np.arange(n)
    d = np.minimum(d, n - d) / n
    dist = np.sqrt(d[:, None] ** 2 + d[None, :] ** 2)
    window = (dist > lo) & (dist < hi)
    return int(auto[window].sum()) // 2
