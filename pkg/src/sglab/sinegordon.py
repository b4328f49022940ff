"""Lattice sine-Gordon measure and a spectrally preconditioned MALA sampler.

The target density on ``R^{Omega_eps}`` is ``exp(-H(phi))`` with

    H(phi) = eps^2 sum_x [ phi (-Delta phi)/2 + m^2 phi^2/2 + 2 z eps^{-beta/4pi} cos(sqrt(beta) phi) ].

Gradients are taken with respect to the plain coordinates ``phi(x)``, so they
carry the explicit ``eps^2`` site weight.  The MALA preconditioner is the inverse
of the Gaussian precision matrix, ``P = eps^-2 (-Delta + m^2)^-1``, which cancels
that weight: proposals have the same form on every lattice.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .lattice import TorusLattice, apply_laplacian
from .rng import stream
from .spectral import as_values, fields_from_white, gff_multiplier, real_fourier_factor

log = logging.getLogger(__name__)

BETA_MAX = 6 * math.pi
TARGET_ACCEPTANCE = 0.574
# warn when the vertex coefficient exceeds this multiple of m^2
STIFFNESS_GUARD = 50.0


class NumericalError(RuntimeError):
    """A sampler met a non-finite energy or an unusable estimate."""


@dataclass(frozen=True)
class SGParams:
    lattice: TorusLattice
    z: float
    beta: float
    mass_sq: float = 1.0

    def __post_init__(self):
        if not 0 < self.beta < BETA_MAX:
            raise ValueError("beta out of range (0, 6π)")
        if not self.mass_sq > 0:
            raise ValueError("mass_sq must be positive")

    @property
    def epsilon(self) -> float:
        return self.lattice.epsilon

    @property
    def sqrt_beta(self) -> float:
        return math.sqrt(self.beta)

    @property
    def vertex(self) -> float:
        """``2 z eps^{-beta/4pi}``."""
        return 2.0 * self.z * self.epsilon ** (-self.beta / (4 * math.pi))

    @property
    def stiff(self) -> bool:
        return abs(self.vertex) > STIFFNESS_GUARD * self.mass_sq


def vertex_energy(params: SGParams, phi) -> np.ndarray:
    """``eps^2 sum_x 2 z eps^{-beta/4pi} cos(sqrt(beta) phi(x))`` (batched)."""
    phi = as_values(phi)
    return params.epsilon**2 * params.vertex * np.cos(params.sqrt_beta * phi).sum(axis=(-2, -1))


def vertex_gradient(params: SGParams, phi) -> np.ndarray:
    """Plain-coordinate gradient of :func:`vertex_energy`."""
    phi = as_values(phi)
    return -params.epsilon**2 * params.vertex * params.sqrt_beta * np.sin(params.sqrt_beta * phi)


def gaussian_energy(params: SGParams, phi) -> np.ndarray:
    phi = as_values(phi)
    eps2 = params.epsilon**2
    return 0.5 * eps2 * np.sum(phi * apply_laplacian(phi) + params.mass_sq * phi * phi, axis=(-2, -1))


def energy(params: SGParams, phi) -> np.ndarray:
    out = gaussian_energy(params, phi) + vertex_energy(params, phi)
    return float(out) if np.ndim(out) == 0 else out


def grad_energy(params: SGParams, phi) -> np.ndarray:
    """``eps^2 [(-Delta phi) + m^2 phi - 2 z sqrt(beta) eps^{-beta/4pi} sin(sqrt(beta) phi)]``."""
    phi = as_values(phi)
    eps2 = params.epsilon**2
    return eps2 * (apply_laplacian(phi) + params.mass_sq * phi) + vertex_gradient(params, phi)


# -- preconditioned MALA ---------------------------------------------------------------


class _Precond:
    """``P = A^-1`` with ``A = eps^2 (-Delta + m^2)`` the Gaussian precision matrix."""

    def __init__(self, params: SGParams):
        lat = params.lattice
        n = lat.n
        self.n = n
        self.eps2 = params.epsilon**2
        mu = lat.laplacian_eigenvalues + params.mass_sq
        self.inv_mu_half = (1.0 / mu)[:, : n // 2 + 1]
        self.gff = gff_multiplier(lat, params.mass_sq).values
        self.mass_sq = params.mass_sq

    def apply(self, g):
        spec = sfft.rfft2(g) * self.inv_mu_half
        return sfft.irfft2(spec, s=(self.n, self.n)) / self.eps2

    def sqrt_apply(self, white):
        # covariance P: the GFF itself
        return fields_from_white(white, self.gff)

    def precision_norm2(self, v):
        return self.eps2 * np.sum(v * (apply_laplacian(v) + self.mass_sq * v), axis=(-2, -1))


def _log_q(pre: _Precond, to, frm, pgrad_frm, h):
    """Log proposal density (up to a constant) of ``to`` given ``frm``."""
    r = to - frm + 0.5 * h[..., None, None] * pgrad_frm
    return -pre.precision_norm2(r) / (2.0 * h)


def mala_log_ratio(params: SGParams, phi, phi_new, h: float) -> tuple[float, float]:
    """Log MH ratio for the move ``phi -> phi_new`` and the proposal asymmetry term.

    Returns ``(log_alpha, log q(phi|phi_new) - log q(phi_new|phi))``.
    """
    pre = _Precond(params)
    phi, phi_new = as_values(phi), as_values(phi_new)
    hh = np.asarray(h, dtype=float)
    pg = pre.apply(grad_energy(params, phi))
    pg_new = pre.apply(grad_energy(params, phi_new))
    asym = _log_q(pre, phi, phi_new, pg_new, hh) - _log_q(pre, phi_new, phi, pg, hh)
    return float(energy(params, phi) - energy(params, phi_new) + asym), float(asym)


@dataclass
class ChainDiagnostics:
    acceptance_rate: float
    autocorr_time: float
    samples_kept: int
    step_size: float
    warnings: list[str] = field(default_factory=list)


def integrated_autocorr_time(x, c: float = 5.0) -> float:
    """Integrated autocorrelation time ``1/2 + sum_t rho(t)`` with Sokal's window."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4 or np.var(x) == 0:
        return 0.5
    y = x - x.mean()
    f = np.fft.rfft(y, n=2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    acf /= acf[0]
    tau = 0.5
    for t in range(1, n):
        tau += acf[t]
        if t >= c * tau:
            break
    return max(0.5, float(tau))


def run_chains(
    params: SGParams,
    n_chains: int,
    step_size: float,
    n_samples: int,
    burn_in: int,
    thin: int,
    seed: int,
    adapt: bool = True,
    init=None,
    chain_offset: int = 0,
):
    """Run ``n_chains`` independent MALA chains, vectorised over chains.

    Chain ``c`` draws only from ``stream(seed, "mala", chain_offset + c)``, so its
    output is the same however chains are batched.  During burn-in the step size of
    each chain is adapted towards acceptance 0.574 and then frozen.

    Returns ``(samples, diagnostics)`` with samples of shape
    ``(n_chains, n_samples, n, n)``.
    """
    if step_size <= 0 or n_samples < 1 or thin < 1 or burn_in < 0:
        raise ValueError("need step_size > 0, n_samples >= 1, thin >= 1, burn_in >= 0")
    lat = params.lattice
    pre = _Precond(params)
    rngs = [stream(seed, "mala", chain_offset + c) for c in range(n_chains)]
    if init is None:
        phi = np.stack([pre.sqrt_apply(r.standard_normal(lat.shape)) for r in rngs])
    else:
        phi = np.broadcast_to(as_values(init), (n_chains, *lat.shape)).copy()
    log_h = np.full(n_chains, math.log(step_size))
    H = energy(params, phi)
    g = pre.apply(grad_energy(params, phi))
    total = burn_in + n_samples * thin
    out = np.empty((n_chains, n_samples, *lat.shape))
    accepted = np.zeros(n_chains)
    trace = np.empty((n_chains, n_samples))
    k = 0
    for it in range(total):
        h = np.exp(log_h)
        white = np.stack([r.standard_normal(lat.shape) for r in rngs])
        u = np.array([r.random() for r in rngs])
        prop = phi - 0.5 * h[:, None, None] * g + np.sqrt(h)[:, None, None] * pre.sqrt_apply(white)
        H_new = energy(params, prop)
        if not np.all(np.isfinite(H_new)):
            raise NumericalError(f"non-finite energy at iteration {it}")
        g_new = pre.apply(grad_energy(params, prop))
        log_alpha = H - H_new + _log_q(pre, phi, prop, g_new, h) - _log_q(pre, prop, phi, g, h)
        acc = np.log(u) < log_alpha
        phi[acc], H[acc], g[acc] = prop[acc], H_new[acc], g_new[acc]
        if it < burn_in:
            if adapt:
                a = np.exp(np.minimum(log_alpha, 0.0))
                log_h += (a - TARGET_ACCEPTANCE) / (it + 10) ** 0.6
        else:
            accepted += acc
            if (it - burn_in + 1) % thin == 0:
                out[:, k] = phi
                trace[:, k] = phi[:, 0, 0]
                k += 1
    rate = accepted / (n_samples * thin)
    diags = []
    for c in range(n_chains):
        warn = []
        if not 0.1 <= rate[c] <= 0.9:
            warn.append(f"acceptance rate {rate[c]:.3f} outside [0.1, 0.9]")
        if params.stiff:
            warn.append("vertex coefficient exceeds 50 m^2; chain may be stiff")
        diags.append(
            ChainDiagnostics(float(rate[c]), integrated_autocorr_time(trace[c]), n_samples, float(np.exp(log_h[c])), warn)
        )
    return out, diags


def mala_chain(params: SGParams, step_size: float, n_samples: int, burn_in: int, thin: int, seed: int, adapt: bool = True):
    """Single chain: list of sample arrays and its :class:`ChainDiagnostics`."""
    samples, diags = run_chains(params, 1, step_size, n_samples, burn_in, thin, seed, adapt=adapt)
    return list(samples[0]), diags[0]


def observable_suite(phi, beta: float) -> dict[str, float]:
    """Scalars used to cross-validate samplers.

    ``var`` is the site average of ``phi^2`` (the pointwise variance estimate by
    translation invariance; the mean is zero by ``phi -> -phi`` symmetry).
    """
    phi = as_values(phi)
    return {
        "mean": float(phi.mean()),
        "var": float(np.mean(phi * phi)),
        "mean_cos": float(np.mean(np.cos(math.sqrt(beta) * phi))),
        "max": float(phi.max()),
    }


# -- quadrature oracle --------------------------------------------------------------------


def gaussian_quadrature_nodes(cov_factor: np.ndarray, order: int):
    """Tensor Gauss-Hermite nodes for ``zeta = B u``, ``u ~ N(0, I_d)``.

    ``cov_factor`` is ``B`` with shape ``(sites, d)``.  Returns ``(zeta, weights)``
    with weights summing to one.
    """
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    d = cov_factor.shape[1]
    u = np.array(list(itertools.product(x, repeat=d)))
    wt = np.prod(np.array(list(itertools.product(w, repeat=d))), axis=1)
    return u @ cov_factor.T, wt


def quadrature_expectations(params: SGParams, observables: dict, order: int = 24) -> dict[str, float]:
    """``E_SG[f]`` for small lattices by Gauss-Hermite quadrature.

    Integrates against the GFF part and reweights by ``exp(-vertex_energy)``.
    Each observable maps an array ``(nodes, n, n)`` to ``(nodes,)``.
    """
    lat = params.lattice
    if lat.num_sites > 4:
        raise ValueError("tensor quadrature is only offered for n = 2")
    B = real_fourier_factor(gff_multiplier(lat, params.mass_sq))
    phi, w = gaussian_quadrature_nodes(B, order)
    phi = phi.reshape(-1, *lat.shape)
    lw = -vertex_energy(params, phi)
    wt = w * np.exp(lw - lw.max())
    wt /= wt.sum()
    return {k: float(np.sum(wt * f(phi))) for k, f in observables.items()}
