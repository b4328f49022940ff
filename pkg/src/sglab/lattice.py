"""Periodic lattice geometry on the unit torus.

Sites of the lattice with ``n`` points per side sit at ``(i/n, j/n)`` and are
indexed row-major, ``(i, j) -> i * n + j``.  Wave vectors are ``k = 2*pi*(a, b)``
with integer ``a, b`` in ``(-n/2, n/2]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

KAPPA = 4.0 / np.pi**2
"""Lower constant in ``KAPPA |k|^2 <= -Delta_hat(k) <= |k|^2``."""

# closed-ball membership tolerance, relative to r^2
_BALL_RTOL = 1e-12


def torus_distance(x, y):
    """Euclidean distance on the unit torus (minimum over periodic images).

    Works elementwise on arrays of shape ``(..., 2)``.
    """
    d = np.abs(np.asarray(x, dtype=float) - np.asarray(y, dtype=float)) % 1.0
    d = np.minimum(d, 1.0 - d)
    out = np.sqrt(np.sum(d * d, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class FourierDual:
    """Integer mode labels of a lattice dual, one per site, in FFT order."""

    n: int

    @cached_property
    def integer_modes(self) -> np.ndarray:
        """Array ``(n, n, 2)`` of integer labels ``(a, b)`` in ``(-n/2, n/2]``."""
        a = np.fft.fftfreq(self.n, d=1.0 / self.n).astype(np.int64)
        if self.n % 2 == 0:
            a[a == -self.n // 2] = self.n // 2
        aa, bb = np.meshgrid(a, a, indexing="ij")
        return np.stack([aa, bb], axis=-1)

    @property
    def wave_vectors(self) -> np.ndarray:
        return 2.0 * np.pi * self.integer_modes

    @cached_property
    def partner_index(self) -> np.ndarray:
        """Flat index of the mode ``-k`` for every flat mode index."""
        i = np.arange(self.n)
        neg = (-i) % self.n
        return (neg[:, None] * self.n + neg[None, :]).ravel()

    @property
    def self_paired(self) -> np.ndarray:
        """Boolean mask ``(n, n)`` of modes with ``k == -k`` on the dual."""
        return (self.partner_index == np.arange(self.n * self.n)).reshape(self.n, self.n)

    def __len__(self) -> int:
        return self.n * self.n


@dataclass(frozen=True)
class TorusLattice:
    """The discretised unit torus with ``n`` sites per side (``epsilon = 1/n``)."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"lattice size must be an integer >= 2, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def epsilon(self) -> float:
        return 1.0 / self.n

    @property
    def num_sites(self) -> int:
        return self.n * self.n

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    def site_index(self, i, j):
        return (np.asarray(i) % self.n) * self.n + (np.asarray(j) % self.n)

    def site_ij(self, index):
        return np.divmod(np.asarray(index), self.n)

    def coordinates(self, index) -> np.ndarray:
        """Continuum coordinates in ``[0, 1)^2`` of site index/indices."""
        i, j = self.site_ij(index)
        return np.stack([i / self.n, j / self.n], axis=-1).astype(float)

    @cached_property
    def dual(self) -> FourierDual:
        return FourierDual(self.n)

    @cached_property
    def laplacian_eigenvalues(self) -> np.ndarray:
        """``-Delta_hat(k)`` on the FFT grid, shape ``(n, n)``."""
        a = np.fft.fftfreq(self.n, d=1.0 / self.n)
        one = 2.0 - 2.0 * np.cos(2.0 * np.pi * a / self.n)
        return self.n**2 * (one[:, None] + one[None, :])

    def ball_offsets(self, r: float) -> np.ndarray:
        """Distinct lattice offsets ``(di, dj)`` (mod n) within closed distance ``r``."""
        d = np.arange(self.n)
        d = np.minimum(d, self.n - d).astype(float)
        dist2 = (d[:, None] ** 2 + d[None, :] ** 2) / self.n**2
        di, dj = np.nonzero(dist2 <= r * r * (1.0 + _BALL_RTOL))
        return np.stack([di, dj], axis=-1)

    def row_halfwidths(self, r: float) -> dict[int, int]:
        """For each row offset ``di`` (mod n) touched by the closed ball, the
        half width ``w`` so that the row slice is ``|dj| <= w`` (cyclic)."""
        out: dict[int, int] = {}
        for di, dj in self.ball_offsets(r):
            dj_min = min(dj, self.n - dj)
            out[int(di)] = max(out.get(int(di), 0), int(dj_min))
        return out


def laplacian_multiplier(lattice: TorusLattice, k) -> float:
    """``-Delta_hat^eps(k) = eps^-2 * sum_i (2 - 2 cos(eps k_i))``."""
    eps = lattice.epsilon
    k = np.asarray(k, dtype=float)
    return float(np.sum(2.0 - 2.0 * np.cos(eps * k)) / eps**2)


def ball(lattice: TorusLattice, x: int, r: float) -> np.ndarray:
    """Sorted site indices ``y`` with ``torus_distance(x, y) <= r``."""
    if r < 0:
        raise ValueError("radius must be non-negative")
    i, j = lattice.site_ij(x)
    off = lattice.ball_offsets(r)
    return np.unique(lattice.site_index(i + off[:, 0], j + off[:, 1]))


def apply_laplacian(values: np.ndarray) -> np.ndarray:
    """``-Delta^eps`` applied by the 5-point periodic stencil over the last two axes."""
    n = values.shape[-1]
    nb = (
        np.roll(values, 1, axis=-1)
        + np.roll(values, -1, axis=-1)
        + np.roll(values, 1, axis=-2)
        + np.roll(values, -1, axis=-2)
    )
    return n * n * (4.0 * values - nb)
