"""Renormalised potential, Polchinski residual and the backward coupling flow.

``v_t(phi) = -log E[exp(-v_0(phi + zeta))]`` with ``zeta`` centred Gaussian of
covariance ``c_t``.  Expectations over ``zeta`` use an ensemble of nodes and
weights: i.i.d. spectral draws (weights ``1/M``) or, on the 2x2 lattice, a tensor
Gauss-Hermite rule.

All gradients returned here are plain-coordinate partials ``d/d phi(x)``.  The
flow needs the L2 gradient, which is ``eps^-2`` times that.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .lattice import TorusLattice
from .rng import stream
from .sinegordon import NumericalError, SGParams, gaussian_quadrature_nodes, vertex_energy, vertex_gradient
from .spectral import (
    apply_multiplier,
    as_values,
    fields_from_white,
    gff_multiplier,
    gs_multiplier,
    heat_kernel_multiplier,
    heat_kernel_rate_multiplier,
    increment_multiplier,
    massive_gff_multiplier,
    real_fourier_factor,
)

DRIFT_TAIL_TOL = 1e-6


def v0(params: SGParams, phi) -> float:
    """Microscopic potential ``eps^2 sum_x 2 z eps^{-beta/4pi} cos(sqrt(beta) phi(x))``."""
    out = vertex_energy(params, phi)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class PotentialEstimator:
    params: SGParams
    t: float
    mc_samples: int = 256
    quadrature_order: int | None = None

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.t < 0:
            raise ValueError("t must be non-negative")
        if self.quadrature_order is not None and self.params.lattice.num_sites > 4:
            raise ValueError("quadrature is only offered on the 2x2 lattice")

    @property
    def scale(self) -> float:
        """Characteristic length ``L_t = min(sqrt(t), 1/m)``."""
        return min(math.sqrt(self.t), 1.0 / math.sqrt(self.params.mass_sq))


class _Ensemble:
    """Reusable Gaussian nodes; ``fields(mult)`` maps them to covariance ``mult``."""

    def __init__(self, base, weights, quadrature: bool):
        self.base = base
        self.weights = weights
        self.log_weights = np.log(weights)
        self.quadrature = quadrature

    @classmethod
    def monte_carlo(cls, lattice: TorusLattice, m: int, rng: np.random.Generator):
        return cls(rng.standard_normal((m, *lattice.shape)), np.full(m, 1.0 / m), False)

    @classmethod
    def gauss_hermite(cls, lattice: TorusLattice, order: int):
        u, w = gaussian_quadrature_nodes(np.eye(lattice.num_sites), order)
        return cls(u, w, True)

    def fields(self, mult):
        if self.quadrature:
            n = mult.lattice.n
            return (self.base @ real_fourier_factor(mult).T).reshape(-1, n, n)
        return fields_from_white(self.base, mult.values)


def _ensemble(est: PotentialEstimator, seed, label: str, index: int = 0) -> _Ensemble:
    if est.quadrature_order is not None:
        return _Ensemble.gauss_hermite(est.params.lattice, est.quadrature_order)
    return _Ensemble.monte_carlo(est.params.lattice, est.mc_samples, stream(seed, "potential", label, index))


def _log_terms(params: SGParams, ens: _Ensemble, phi, zeta):
    """Log of ``w_j exp(-v0(phi + zeta_j))`` and the shifted points."""
    pts = phi[..., None, :, :] + zeta
    return ens.log_weights - vertex_energy(params, pts), pts


def _value(params, ens, phi, mult):
    lw, _ = _log_terms(params, ens, phi, ens.fields(mult))
    v = -logsumexp(lw, axis=-1)
    if not np.all(np.isfinite(v)):
        raise NumericalError("all importance weights underflowed")
    if ens.quadrature:
        return v, np.zeros_like(v)
    a = np.exp(lw - lw.max(axis=-1, keepdims=True))
    m = a.shape[-1]
    se = a.std(axis=-1, ddof=1) / math.sqrt(m) / a.mean(axis=-1) if m > 1 else np.full_like(v, np.inf)
    return v, se


def _probabilities(lw):
    return np.exp(lw - logsumexp(lw, axis=-1, keepdims=True))


def _grad(params, ens, phi, mult):
    lw, pts = _log_terms(params, ens, phi, ens.fields(mult))
    p = _probabilities(lw)
    g = vertex_gradient(params, pts)
    mean = np.einsum("...j,...jxy->...xy", p, g)
    if ens.quadrature:
        return mean, np.zeros_like(mean)
    dev = g - mean[..., None, :, :]
    se = np.sqrt(np.einsum("...j,...jxy->...xy", p * p, dev * dev))
    return mean, se


def estimate_vt(est: PotentialEstimator, phi, seed: int):
    """``(v_t(phi), standard error)``; the error is zero for quadrature."""
    phi = as_values(phi)
    if est.params.z == 0:
        return 0.0, 0.0
    if not est.t > 0:
        raise ValueError("estimate_vt needs t > 0")
    lat = est.params.lattice
    ens = _ensemble(est, seed, "v")
    v, se = _value(est.params, ens, phi, heat_kernel_multiplier(lat, est.params.mass_sq, est.t))
    return float(v), float(se)


def estimate_grad_vt(est: PotentialEstimator, phi, seed: int):
    """Self-normalised estimate of ``d v_t / d phi(x)`` and its per-site standard error.

    Uses the same nodes as :func:`estimate_vt` for the same seed, so finite
    differences of the value agree with it under common random numbers.
    """
    phi = as_values(phi)
    if est.params.z == 0:
        return np.zeros_like(phi), np.zeros_like(phi)
    if not est.t > 0:
        raise ValueError("estimate_grad_vt needs t > 0")
    lat = est.params.lattice
    ens = _ensemble(est, seed, "v")
    return _grad(est.params, ens, phi, heat_kernel_multiplier(lat, est.params.mass_sq, est.t))


# -- Polchinski residual ---------------------------------------------------------------


@dataclass
class ResidualReport:
    residual: float
    error_bar: float
    status: str
    time_derivative: float
    laplacian_term: float
    quadratic_term: float
    batches: int

    def __iter__(self):
        yield self.residual
        yield self.error_bar


def _residual_once(params, ens, phi, t, dt):
    """``d_t v - (1/2) Lap_cdot v + (1/2) |grad v|^2_cdot`` on one ensemble.

    With ``u = E exp(-v0)`` the heat equation for ``u`` gives
    ``(1/2) sum K (d2 v - dv dv) = -(1/2) E_p[g K g - K(0) tr d2 v0]`` where ``p`` are
    the normalised weights, ``g`` the gradient of ``v0`` at the node and ``K`` the
    site kernel of ``cdot_t``.
    """
    lat = params.lattice
    m2 = params.mass_sq
    n = lat.n
    v_hi, _ = _value(params, ens, phi, heat_kernel_multiplier(lat, m2, t + dt))
    v_lo, _ = _value(params, ens, phi, heat_kernel_multiplier(lat, m2, t - dt))
    dv_dt = (v_hi - v_lo) / (2 * dt)

    kern = heat_kernel_rate_multiplier(lat, m2, t).values
    lw, pts = _log_terms(params, ens, phi, ens.fields(heat_kernel_multiplier(lat, m2, t)))
    p = _probabilities(lw)
    g = vertex_gradient(params, pts)
    kg = n * n * apply_multiplier(g, kern)
    gkg = np.sum(g * kg, axis=(-2, -1))
    hess_diag = -(params.epsilon**2) * params.vertex * params.beta * np.cos(params.sqrt_beta * pts)
    tr = kern.sum() * hess_diag.sum(axis=(-2, -1))
    combined = np.sum(p * (gkg - tr), axis=-1)
    gbar = np.einsum("...j,...jxy->...xy", p, g)
    quad = 0.5 * np.sum(gbar * n * n * apply_multiplier(gbar, kern), axis=(-2, -1))
    lap = quad - 0.5 * combined
    return float(dv_dt - lap + quad), float(dv_dt), float(lap), float(quad)


def polchinski_residual(
    est: PotentialEstimator, phi, dt: float, seed: int, batches: int = 20, ceiling: float = math.inf
) -> ResidualReport:
    """Residual of the Polchinski equation for ``v_t`` at ``phi``.

    Monte Carlo: ``batches`` independent ensembles, each shared between the time
    difference and the spatial terms; error bar is the standard error across
    batches.  Quadrature: a single deterministic evaluation with zero error bar.
    Status is ``consistent`` (within 3 error bars), ``inconsistent`` or
    ``inconclusive`` (error bar above ``ceiling``).
    """
    if not est.t > dt > 0:
        raise ValueError("need t > dt > 0")
    phi = as_values(phi)
    params = est.params
    if params.z == 0:
        return ResidualReport(0.0, 0.0, "consistent", 0.0, 0.0, 0.0, 0)
    if est.quadrature_order is not None:
        ens = _ensemble(est, seed, "residual")
        r, a, b, c = _residual_once(params, ens, phi, est.t, dt)
        return ResidualReport(r, 0.0, "consistent" if abs(r) < 1e-4 else "inconsistent", a, b, c, 1)
    if batches < 2:
        raise ValueError("need at least two batches for an error bar")
    rows = np.array([_residual_once(params, _ensemble(est, seed, "residual", b), phi, est.t, dt) for b in range(batches)])
    mean = rows.mean(axis=0)
    err = float(rows[:, 0].std(ddof=1) / math.sqrt(batches))
    if err > ceiling:
        status = "inconclusive"
    else:
        status = "consistent" if abs(mean[0]) <= 3 * err else "inconsistent"
    return ResidualReport(float(mean[0]), err, status, float(mean[1]), float(mean[2]), float(mean[3]), batches)


# -- backward coupling flow --------------------------------------------------------------


def default_horizon(params: SGParams, tol: float = DRIFT_TAIL_TOL) -> float:
    """Smallest ``T`` with ``int_T^inf sup|cdot_t grad v_t| dt <= tol``.

    The L2 gradient of ``v_t`` is bounded by ``|vertex| sqrt(beta)`` and ``cdot_t``
    contracts the sup norm by ``exp(-m^2 t)``.
    """
    bound = abs(params.vertex) * params.sqrt_beta
    if bound == 0:
        return 1.0
    return max(1.0, math.log(bound / (params.mass_sq * tol)) / params.mass_sq)


def time_grid(T: float, dt: float, marks=(), t_stop: float = 0.0, floor: float | None = None, lattice=None):
    """Descending grid from ``T`` to ``t_stop``: step ``min(dt, t/10)`` down to
    ``floor`` then a last step, with every mark in ``(t_stop, T)`` included."""
    if not dt > 0 or not T > t_stop >= 0:
        raise ValueError("need dt > 0 and T > t_stop >= 0")
    if floor is None:
        floor = 1e-3 * (lattice.epsilon**2 if lattice is not None else 1e-4)
    floor = max(floor, t_stop)
    pts = [T]
    t = T
    while t > floor:
        t = t - min(dt, 0.1 * t)
        pts.append(max(t, floor))
    pts.append(t_stop)
    pts.extend(m for m in marks if t_stop < m < T)
    return np.array(sorted(set(pts), reverse=True))


@dataclass
class CoupledPath:
    """Batched flow output; field arrays have shape ``(paths, n, n)``."""

    lattice: TorusLattice
    grid: np.ndarray
    sg: dict[float, np.ndarray]
    gff: dict[float, np.ndarray]
    delta: dict[float, np.ndarray]
    remainder: dict[float, np.ndarray]
    remainder_bound: dict[float, np.ndarray]
    path_ids: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        for t in self.sg:
            assert np.array_equal(self.delta[t], self.sg[t] - self.gff[t])

    @property
    def times(self):
        return sorted(self.sg, reverse=True)

    def final(self):
        t = self.times[-1]
        return self.sg[t], self.gff[t]


def backward_flow(
    params: SGParams,
    T: float | None = None,
    dt: float = 0.01,
    s_marks=(),
    seed: int = 0,
    n_paths: int = 1,
    mc_samples: int = 128,
    path_offset: int = 0,
    record_times=(),
    t_stop: float = 0.0,
    grad_se_ceiling: float | None = None,
) -> CoupledPath:
    """Euler-Maruyama integration of the coupling SDE from ``T`` down to ``t_stop``.

    Path ``p`` uses ``stream(seed, "flow-gff", p)`` for its Gaussian increments and
    ``stream(seed, "flow-zeta", p)`` for the inner expectation, so the GFF path does
    not depend on ``z`` and a path's output does not depend on batching.
    """
    lat = params.lattice
    n = lat.n
    m2 = params.mass_sq
    if T is None:
        T = default_horizon(params)
    s_marks = sorted(set(float(s) for s in s_marks))
    for s in s_marks:
        if not t_stop <= s < T:
            raise ValueError(f"s mark {s} outside [t_stop, T)")
    grid = time_grid(T, dt, [*s_marks, *record_times], t_stop=t_stop, lattice=lat)
    keep = {float(T), float(grid[-1]), *(float(t) for t in record_times), *s_marks}
    ids = np.arange(path_offset, path_offset + n_paths)
    gff_rngs = [stream(seed, "flow-gff", int(p)) for p in ids]
    zeta_rngs = [stream(seed, "flow-zeta", int(p)) for p in ids]
    ceiling = grad_se_ceiling
    if ceiling is None:
        ceiling = 0.5 * params.epsilon**2 * abs(params.vertex) * params.sqrt_beta
    active = params.z != 0

    white = np.stack([r.standard_normal(lat.shape) for r in gff_rngs])
    phi_gff = fields_from_white(white, gff_multiplier(lat, m2, T).values)
    phi_sg = phi_gff.copy()
    sg, gff = {}, {}
    rem = {s: np.zeros_like(phi_gff) for s in s_marks}
    bound = {s: np.zeros(n_paths) for s in s_marks}

    def record(t):
        if t in keep:
            sg[t], gff[t] = phi_sg.copy(), phi_gff.copy()

    record(float(T))
    ens_w = np.full(mc_samples, 1.0 / mc_samples)
    for t_hi, t_lo in zip(grid[:-1], grid[1:]):
        h = t_hi - t_lo
        if active:
            zw = np.stack([r.standard_normal((mc_samples, *lat.shape)) for r in zeta_rngs])
            ens = _Ensemble(zw, ens_w, False)
            grad, se = _grad(params, ens, phi_sg, heat_kernel_multiplier(lat, m2, t_hi))
            if np.max(se) > ceiling:
                raise NumericalError(f"gradient error bar {np.max(se):.3g} above ceiling {ceiling:.3g} at t={t_hi:.4g}")
            drift = h * apply_multiplier(n * n * grad, heat_kernel_rate_multiplier(lat, m2, t_hi).values)
        else:
            drift = 0.0
        white = np.stack([r.standard_normal(lat.shape) for r in gff_rngs])
        inc = fields_from_white(white, increment_multiplier(lat, m2, t_lo, t_hi).values)
        phi_sg = phi_sg - drift + inc
        phi_gff = phi_gff + inc
        if active:
            if not np.all(np.isfinite(phi_sg)):
                raise NumericalError(f"non-finite field at t={t_lo:.4g}")
            sup = np.max(np.abs(drift), axis=(-2, -1))
            for s in s_marks:
                if t_hi <= s:
                    rem[s] += drift
                    bound[s] += sup
        record(float(t_lo))

    delta = {t: sg[t] - gff[t] for t in sg}
    warnings = ["vertex coefficient exceeds 50 m^2"] if params.stiff else []
    return CoupledPath(lat, grid, sg, gff, delta, rem, bound, ids, warnings)


@dataclass
class RemainderReport:
    rows: list[dict]
    decreasing: bool
    bound_holds: bool


def remainder_decay_report(path: CoupledPath) -> RemainderReport:
    """Per ``s``: mean and standard error over paths of ``max_x |R_s|`` and the
    accumulated sup-norm bound."""
    rows = []
    ok = True
    for s in sorted(path.remainder):
        m = np.max(np.abs(path.remainder[s]), axis=(-2, -1))
        b = path.remainder_bound[s]
        ok &= bool(np.all(m <= b * (1 + 1e-12) + 1e-300))
        k = len(m)
        rows.append(
            {
                "s": s,
                "mean_max_abs": float(m.mean()),
                "std_error": float(m.std(ddof=1) / math.sqrt(k)) if k > 1 else 0.0,
                "mean_bound": float(b.mean()),
            }
        )
    means = [r["mean_max_abs"] for r in rows]
    dec = all(a < b for a, b in zip(means, means[1:]))
    return RemainderReport(rows, dec, ok)


# -- auxiliary field ---------------------------------------------------------------------


@dataclass
class AuxiliaryField:
    psi: np.ndarray
    x_gff: np.ndarray
    x_h: np.ndarray
    phi_sg: np.ndarray

    @property
    def x_c(self):
        return self.x_h + self.phi_sg


def auxiliary_field(params: SGParams, s: float, seed: int, n_paths: int = 1, path_offset: int = 0, **flow) -> AuxiliaryField:
    """``Psi_s = X_s^GFF + X_s^h + Phi_s^SG`` with independent Gaussian parts.

    ``Phi_s^SG`` comes from :func:`backward_flow` stopped at ``t = s``.  At
    ``z = 0`` the law of ``Psi_s`` is that of the full GFF.
    """
    if not s > 0:
        raise ValueError("s must be positive")
    lat = params.lattice
    m2 = params.mass_sq
    ids = range(path_offset, path_offset + n_paths)
    wg = np.stack([stream(seed, "aux-gff", p).standard_normal(lat.shape) for p in ids])
    wh = np.stack([stream(seed, "aux-h", p).standard_normal(lat.shape) for p in ids])
    x_gff = fields_from_white(wg, massive_gff_multiplier(lat, m2, s).values)
    x_h = fields_from_white(wh, gs_multiplier(lat, m2, s).values)
    T = flow.pop("T", None)
    if T is None:
        T = max(default_horizon(params), 2 * s)
    path = backward_flow(params, T=T, seed=seed, n_paths=n_paths, path_offset=path_offset, t_stop=s, **flow)
    phi_s, _ = path.final()
    return AuxiliaryField(x_gff + x_h + phi_s, x_gff, x_h, phi_s)


def holder_seminorm(values, alpha: float):
    """``max_{x != y} |f(x) - f(y)| / |x - y|^alpha`` over the torus, exact.

    Batched over leading axes; cost ``O(n^4)`` per field.
    """
    f = as_values(values)
    n = f.shape[-1]
    if f.ndim > 2:
        flat = f.reshape(-1, n, n)
        return np.array([holder_seminorm(x, alpha) for x in flat]).reshape(f.shape[:-2])
    d = np.arange(n)
    d = np.minimum(d, n - d) / n
    cols = (np.arange(n)[:, None] + np.arange(n)[None, :]) % n  # [dj, j]
    best = 0.0
    for di in range(n // 2 + 1):
        shifted = np.roll(f, -di, axis=0)[:, cols]  # [i, dj, j] = f[i+di, j+dj]
        diff = np.abs(shifted - f[:, None, :]).max(axis=(0, 2))
        dist = np.sqrt(d[di] ** 2 + d**2)
        if di == 0:
            diff = diff[..., 1:]
            dist = dist[1:]
        best = max(best, float(np.max(diff / dist**alpha)))
    return best
