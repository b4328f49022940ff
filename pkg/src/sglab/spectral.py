"""Gaussian fields on the torus by Fourier synthesis.

Convention: a field with spectral multiplier ``c_hat`` is

    phi(x) = sum_k sqrt(c_hat(k)) exp(i k.x) X(k),

with ``X`` a Hermitian family of standard complex Gaussians (``X(0)`` real
standard normal).  Hence ``E phi(x) phi(y) = sum_k c_hat(k) cos(k.(x - y))`` and
the per-site variance is ``sum_k c_hat(k)``.  The same multiplier values are the
eigenvalues of the corresponding covariance *operator*
(``c f(x) = eps^2 sum_y c(x, y) f(y)``), so operators are applied with
:func:`apply_multiplier`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .lattice import TorusLattice
from .rng import stream

# below this value of mu*s, g_s is evaluated from its Taylor series
GS_SERIES_CUTOFF = 1e-4
# tolerated imaginary residue of an inverse transform, relative to the field scale
IMAG_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class Field:
    """A real configuration on a lattice; ``values[i, j]`` is site ``i*n + j``."""

    lattice: TorusLattice
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.lattice.shape:
            raise ValueError(f"field shape {vals.shape} does not match lattice {self.lattice.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_array(cls, values) -> "Field":
        values = np.asarray(values, dtype=float)
        return cls(TorusLattice(values.shape[-1]), values)

    def __add__(self, other):
        other = other.values if isinstance(other, Field) else other
        return Field(self.lattice, self.values + other)

    def __sub__(self, other):
        other = other.values if isinstance(other, Field) else other
        return Field(self.lattice, self.values - other)


def as_values(field) -> np.ndarray:
    return field.values if isinstance(field, Field) else np.asarray(field, dtype=float)


@dataclass(frozen=True, eq=False)
class SpectralNoise:
    """Hermitian standard complex Gaussian coefficients ``X(k)`` on the FFT grid."""

    lattice: TorusLattice
    coefficients: np.ndarray
    seed: int | None = None
    tag: str = ""

    def __mul__(self, a: float) -> "SpectralNoise":
        return SpectralNoise(self.lattice, a * self.coefficients, self.seed, self.tag)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class SpectralMultiplier:
    lattice: TorusLattice
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.lattice.shape:
            raise ValueError("multiplier shape does not match lattice")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError(f"multiplier {self.label!r} must be finite and non-negative")
        object.__setattr__(self, "values", vals)

    @property
    def site_variance(self) -> float:
        return float(self.values.sum())


# -- noise ---------------------------------------------------------------------


def noise_from_white(white: np.ndarray) -> np.ndarray:
    """Map real white noise ``(..., n, n)`` to Hermitian coefficients ``X = FFT(w)/n``.

    The result is Hermitian, standard complex Gaussian on paired modes and real
    standard Gaussian on self-paired modes.
    """
    n = white.shape[-1]
    coeffs = sfft.fft2(white) / n
    h = n // 2
    for a in {0, h}:
        for b in {0, h}:
            coeffs[..., a, b] = coeffs[..., a, b].real
    return coeffs


def sample_noise(lattice: TorusLattice, seed: int, tag: str = "noise", index: int = 0) -> SpectralNoise:
    rng = stream(seed, "spectral", tag, index)
    white = rng.standard_normal(lattice.shape)
    return SpectralNoise(lattice, noise_from_white(white), seed=seed, tag=tag)


# -- multipliers -----------------------------------------------------------------


def _check_mass(mass_sq: float):
    if not mass_sq > 0:
        raise ValueError(f"mass_sq must be positive, got {mass_sq}")


def _mu(lattice: TorusLattice, mass_sq: float) -> np.ndarray:
    return lattice.laplacian_eigenvalues + mass_sq


def gff_multiplier(lattice: TorusLattice, mass_sq: float = 1.0, t: float = 0.0) -> SpectralMultiplier:
    """Covariance of the decomposed GFF ``Phi_t``: ``exp(-t mu) / mu``."""
    _check_mass(mass_sq)
    if t < 0:
        raise ValueError("t must be non-negative")
    mu = _mu(lattice, mass_sq)
    return SpectralMultiplier(lattice, np.exp(-t * mu) / mu, f"gff(m2={mass_sq},t={t})")


def heat_kernel_multiplier(lattice: TorusLattice, mass_sq: float, t: float) -> SpectralMultiplier:
    """Multiplier of ``c_t = int_0^t cdot_s ds``: ``(1 - exp(-t mu)) / mu``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    mu = _mu(lattice, mass_sq)
    return SpectralMultiplier(lattice, -np.expm1(-t * mu) / mu, f"c(m2={mass_sq},t={t})")


def heat_kernel_rate_multiplier(lattice: TorusLattice, mass_sq: float, t: float) -> SpectralMultiplier:
    """Multiplier of the heat kernel ``cdot_t = exp(t Delta) exp(-m^2 t)``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return SpectralMultiplier(lattice, np.exp(-t * _mu(lattice, mass_sq)), f"cdot(m2={mass_sq},t={t})")


def increment_multiplier(lattice: TorusLattice, mass_sq: float, t_lo: float, t_hi: float) -> SpectralMultiplier:
    """Covariance of ``Phi_{t_lo} - Phi_{t_hi}``, i.e. ``c_{t_hi} - c_{t_lo}``."""
    if not 0 <= t_lo <= t_hi:
        raise ValueError("need 0 <= t_lo <= t_hi")
    mu = _mu(lattice, mass_sq)
    vals = np.exp(-t_lo * mu) * (-np.expm1(-(t_hi - t_lo) * mu)) / mu
    return SpectralMultiplier(lattice, vals, f"dgff(m2={mass_sq},{t_lo}..{t_hi})")


def g_s(mu, s: float):
    """``g_s(mu) = (1 - exp(-mu s))/mu - 1/(mu + 1/s)``, stable as ``mu -> 0``."""
    if not s > 0:
        raise ValueError("s must be positive")
    mu = np.asarray(mu, dtype=float)
    x = mu * s
    small = np.abs(x) < GS_SERIES_CUTOFF
    out = np.empty_like(x)
    xs = x[small]
    out[small] = s * (xs / 2 - 5 * xs**2 / 6 + 23 * xs**3 / 24 - 119 * xs**4 / 120)
    mb = mu[~small]
    out[~small] = -np.expm1(-mb * s) / mb - 1.0 / (mb + 1.0 / s)
    return out if out.ndim else float(out)


def gs_multiplier(lattice: TorusLattice, mass_sq: float, s: float) -> SpectralMultiplier:
    """Covariance of the smooth field ``X_s^h``: ``g_s(-Delta_hat + m^2)``."""
    if not s > 0:
        raise ValueError("s must be positive")
    return SpectralMultiplier(lattice, g_s(_mu(lattice, mass_sq), s), f"g(m2={mass_sq},s={s})")


def massive_gff_multiplier(lattice: TorusLattice, mass_sq: float, s: float) -> SpectralMultiplier:
    """Covariance of ``X_s^GFF``, the GFF with mass ``m^2 + 1/s``."""
    if not s > 0:
        raise ValueError("s must be positive")
    return SpectralMultiplier(lattice, 1.0 / (_mu(lattice, mass_sq) + 1.0 / s), f"gff(m2={mass_sq}+1/{s})")


# -- synthesis -------------------------------------------------------------------


def synthesize(noise: SpectralNoise, mult: SpectralMultiplier) -> Field:
    """``phi(x) = sum_k sqrt(c_hat(k)) e^{ikx} X(k)`` evaluated by inverse FFT."""
    if noise.lattice.n != mult.lattice.n:
        raise ValueError(f"noise lattice n={noise.lattice.n} != multiplier lattice n={mult.lattice.n}")
    n = noise.lattice.n
    spec = np.sqrt(mult.values) * noise.coefficients
    out = sfft.ifft2(spec) * n * n
    scale = max(1.0, float(np.max(np.abs(out.real))))
    if np.max(np.abs(out.imag)) > IMAG_RTOL * scale:
        raise ArithmeticError("synthesized field is not real; noise is not Hermitian")
    return Field(noise.lattice, out.real)


def _half(values: np.ndarray) -> np.ndarray:
    return values[..., : values.shape[-1] // 2 + 1]


def fields_from_white(white: np.ndarray, mult_values: np.ndarray) -> np.ndarray:
    """Batch synthesis from real white noise ``(..., n, n)``; same law as :func:`synthesize`."""
    n = white.shape[-1]
    spec = sfft.rfft2(white) * np.sqrt(_half(mult_values))
    return sfft.irfft2(spec, s=(n, n)) * n


def sample_fields(lattice: TorusLattice, mult: SpectralMultiplier, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw ``size`` independent fields with covariance ``mult`` as an array."""
    shape = lattice.shape if size is None else (*np.atleast_1d(size), *lattice.shape)
    return fields_from_white(rng.standard_normal(shape), mult.values)


def apply_multiplier(values: np.ndarray, mult_values: np.ndarray) -> np.ndarray:
    """Apply the translation-invariant operator with eigenvalues ``mult_values``."""
    n = values.shape[-1]
    return sfft.irfft2(sfft.rfft2(values) * _half(mult_values), s=(n, n))


def covariance_kernel(mult: SpectralMultiplier) -> np.ndarray:
    """``K[d] = sum_k c_hat(k) cos(k.d)`` for every lattice displacement ``d``."""
    n = mult.lattice.n
    return (sfft.ifft2(mult.values) * n * n).real


def real_fourier_factor(mult: SpectralMultiplier) -> np.ndarray:
    """Real ``B`` of shape ``(n^2, n^2)`` with ``B B^T = covariance_kernel`` as a site matrix.

    Columns are ``sqrt(c_hat) cos(k.x)`` for self-paired modes and
    ``sqrt(2 c_hat) cos(k.x)``, ``sqrt(2 c_hat) sin(k.x)`` once per pair ``{k, -k}``.
    """
    lat = mult.lattice
    x = lat.coordinates(np.arange(lat.num_sites))
    k = lat.dual.wave_vectors.reshape(-1, 2)
    c = mult.values.ravel()
    partner = lat.dual.partner_index
    cols = []
    for idx in range(len(c)):
        if partner[idx] < idx:
            continue
        phase = x @ k[idx]
        if partner[idx] == idx:
            cols.append(np.sqrt(c[idx]) * np.cos(phase))
        else:
            amp = np.sqrt(2.0 * c[idx])
            cols.append(amp * np.cos(phase))
            cols.append(amp * np.sin(phase))
    return np.stack(cols, axis=1)


# -- identities and couplings ----------------------------------------------------------


def decomposition_identity_check(lattice: TorusLattice, mass_sq: float, s: float) -> float:
    """Max per-mode ``|[c_0 - c_s^GFF] - c^{GFF, m^2+1/s} - g_s|``."""
    lhs = gff_multiplier(lattice, mass_sq, 0.0).values - gff_multiplier(lattice, mass_sq, s).values
    rhs = massive_gff_multiplier(lattice, mass_sq, s).values + gs_multiplier(lattice, mass_sq, s).values
    return float(np.max(np.abs(lhs - rhs)))


def _coarse_partner_rep(a: np.ndarray, nc: int) -> np.ndarray:
    """Representative in ``(-nc/2, nc/2]`` of ``-a`` modulo ``nc``."""
    b = (-a) % nc
    return np.where(b > nc // 2, b - nc, b)


def _refinement_plan(n_fine: int, n_coarse: int):
    """For each coarse mode: the fine flat index of ``k`` and of its coarse partner,
    and whether the coarse Hermitian pairing coincides with the fine one."""
    if n_fine % n_coarse:
        raise ValueError(f"coarse size {n_coarse} does not divide fine size {n_fine}")
    modes = TorusLattice(n_coarse).dual.integer_modes  # (nc, nc, 2)
    a, b = modes[..., 0], modes[..., 1]
    pa, pb = _coarse_partner_rep(a, n_coarse), _coarse_partner_rep(b, n_coarse)
    own = (a % n_fine) * n_fine + (b % n_fine)
    partner = (pa % n_fine) * n_fine + (pb % n_fine)
    fine_neg = ((-a) % n_fine) * n_fine + ((-b) % n_fine)
    consistent = partner == fine_neg
    return own, partner, consistent


def shared_noise_refinement(noise_fine: SpectralNoise, lattice_coarse: TorusLattice) -> SpectralNoise:
    """Restrict the fine noise to the coarse dual so that all resolutions share ``X(k)``.

    Away from the coarse Nyquist edges this is plain restriction.  On the edges the
    coarse pairing ``k ~ -k`` differs from the fine one, and the coefficient is
    ``(X(k) + conj X(k'))/sqrt(2)`` with ``k'`` the coarse partner, which keeps the
    coarse family Hermitian and standard.
    """
    nf = noise_fine.lattice.n
    nc = lattice_coarse.n
    own, partner, consistent = _refinement_plan(nf, nc)
    flat = noise_fine.coefficients.ravel()
    mixed = (flat[own] + np.conj(flat[partner])) / np.sqrt(2.0)
    coeffs = np.where(consistent, flat[own], mixed)
    return SpectralNoise(lattice_coarse, coeffs, noise_fine.seed, noise_fine.tag)


def refinement_discrepancy(mult_coarse: SpectralMultiplier, mult_fine: SpectralMultiplier) -> float:
    """Exact ``E |X^coarse(x) - X^fine(x)|^2`` at a coarse site under :func:`shared_noise_refinement`.

    Collects, for every fine mode, its total coefficient in the difference; away from
    Nyquist edges this is ``sum_k |q_c(k) 1_{k in coarse} - q_f(k)|^2``.
    """
    nf, nc = mult_fine.lattice.n, mult_coarse.lattice.n
    own, partner, consistent = (a.ravel() for a in _refinement_plan(nf, nc))
    qc = np.sqrt(mult_coarse.values).ravel()
    coef = -np.sqrt(mult_fine.values).ravel().astype(float)
    # contribution of coarse mode k to fine modes: own (and -partner when mixed)
    w_own = np.where(consistent, qc, qc / np.sqrt(2.0))
    np.add.at(coef, own, w_own)
    fine_neg = TorusLattice(nf).dual.partner_index
    mixed = ~consistent
    # conj X(partner) = X(-partner): a fine mode distinct from own
    np.add.at(coef, fine_neg[partner[mixed]], qc[mixed] / np.sqrt(2.0))
    return float(np.sum(coef**2))
