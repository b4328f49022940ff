"""Estimators and tests for extremal point processes and level sets.

Every estimator returns a :class:`FitReport`.  Refusals (too little data, a
degenerate sample) are reported through ``status`` rather than raised, so a batch
run always produces a complete table.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sps

from .extremes import ExtremalProcessSample, LevelSet, argmax_map, intermediate_pair_count, level_set, local_maxima
from .lattice import TorusLattice, torus_distance
from .rng import stream
from .spectral import as_values

ALPHA = math.sqrt(8 * math.pi)
"""Exponential rate of the limiting height intensity."""

GUMBEL_WINDOW = (0.8, 0.99)


@dataclass
class FitReport:
    estimate: float
    std_error: float
    sample_size: int
    statistic: float | None = None
    p_value: float | None = None
    status: str = "ok"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.std_error >= 0 or math.isnan(self.std_error)):
            raise ValueError("std_error must be non-negative")
        if self.p_value is not None and not 0.0 <= self.p_value <= 1.0:
            raise ValueError("p_value must lie in [0, 1]")

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


def _refuse(reason: str, n: int, estimate: float = math.nan) -> FitReport:
    return FitReport(estimate, math.nan, n, status="insufficient", extra={"reason": reason})


# -- test functions ----------------------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """Non-negative ``f(x, h)`` vanishing for ``h < h0``; ``x`` has shape ``(..., 2)``."""

    __test__ = False  # not a pytest class

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    h0: float
    label: str = ""

    def __call__(self, x, h) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(x, dtype=float), np.asarray(h, dtype=float)), dtype=float)

    def pairing(self, sample: ExtremalProcessSample) -> float:
        """``<eta, f>`` for one point configuration."""
        if len(sample) == 0:
            return 0.0
        return float(np.sum(self(sample.locations, sample.heights)))


def _bump(u):
    out = np.zeros_like(u)
    inside = np.abs(u) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - u[inside] ** 2))
    return out


def box_bump(box=(0.0, 1.0, 0.0, 1.0), h0: float = 0.0, h1: float = 1.0, amplitude: float = 1.0) -> TestFunction:
    """Indicator of ``[x0, x1) x [y0, y1)`` times a smooth bump in ``h`` on ``(h0, h1)``
    with peak ``amplitude`` at the midpoint."""
    if not h1 > h0 or amplitude < 0:
        raise ValueError("need h1 > h0 and amplitude >= 0")
    x0, x1, y0, y1 = box
    mid, half = 0.5 * (h0 + h1), 0.5 * (h1 - h0)

    def fn(x, h):
        inside = (x[..., 0] >= x0) & (x[..., 0] < x1) & (x[..., 1] >= y0) & (x[..., 1] < y1)
        return amplitude * inside * _bump((h - mid) / half)

    return TestFunction(fn, h0, f"box_bump({box},{h0},{h1},{amplitude})")


def step_function(h0: float, g: float | Callable = 0.5) -> TestFunction:
    """``f(x, h) = -log(1 - g(x))`` for ``h > h0`` and 0 otherwise, with ``0 <= g < 1``.

    Then ``exp(-<eta, f>) = prod (1 - g(x_i))`` over points above ``h0``.
    """
    gfun = g if callable(g) else (lambda x, c=float(g): np.full(x.shape[:-1], c))

    def fn(x, h):
        gv = np.asarray(gfun(x), dtype=float)
        if np.any((gv < 0) | (gv >= 1)):
            raise ValueError("g must take values in [0, 1)")
        return np.where(h > h0, -np.log1p(-gv), 0.0)

    return TestFunction(fn, h0, f"step({h0})")


def translate_test_function(f: TestFunction, phi) -> TestFunction:
    """``(x, h) -> f(x, h + phi(x))`` with ``phi`` read at the lattice site of ``x``."""
    values = as_values(phi)
    n = values.shape[-1]

    def fn(x, h):
        ij = np.rint(np.asarray(x) * n).astype(np.int64) % n
        return f(x, h + values[ij[..., 0], ij[..., 1]])

    return TestFunction(fn, f.h0 - float(values.max()), f"{f.label}∘τ")


# -- Laplace functional ------------------------------------------------------------------


def laplace_functional(samples: Sequence[ExtremalProcessSample], f: TestFunction) -> FitReport:
    """Mean of ``exp(-<eta, f>)`` over samples, with its standard error."""
    if len(samples) < 1:
        raise ValueError("need at least one sample")
    vals = np.array([math.exp(-f.pairing(s)) for s in samples])
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return FitReport(float(vals.mean()), se, len(vals))


def poisson_laplace_value(f: TestFunction, rate: float, alpha: float, h_min: float, grid: int = 64, h_nodes: int = 4000) -> float:
    """``exp(-int (1 - e^{-f}) rate dx e^{-alpha h} dh)`` over ``[0,1)^2 x [h_min, inf)``.

    Midpoint rule in ``x`` and in ``u = exp(-alpha (h - h_min))`` on ``(0, 1]``.
    """
    c = (np.arange(grid) + 0.5) / grid
    xs = np.stack(np.meshgrid(c, c, indexing="ij"), -1).reshape(-1, 2)
    u = (np.arange(h_nodes) + 0.5) / h_nodes
    h = h_min - np.log(u) / alpha
    vals = -np.expm1(-f(xs[:, None, :], h[None, :]))
    inner = vals.mean() * math.exp(-alpha * h_min) / alpha
    return math.exp(-rate * inner)


# -- height law ----------------------------------------------------------------------


def exceedance_rate_fit(heights, h0: float, min_count: int = 10) -> FitReport:
    """Exponential MLE ``1 / mean(h - h0)`` of the exceedance rate.

    Also reports KS against ``Exp(alpha_hat)`` (Lilliefors caveat: the rate is
    fitted from the same data) and against ``Exp(sqrt(8 pi))``.
    """
    h = np.asarray(heights, dtype=float)
    if np.any(h < h0):
        raise ValueError("all heights must be >= h0")
    n = len(h)
    if n == 0:
        return _refuse("no exceedances", 0)
    excess = h - h0
    a = 1.0 / excess.mean()
    if n < min_count:
        rep = _refuse(f"fewer than {min_count} exceedances", n, a)
        rep.std_error = a / math.sqrt(n)
        return rep
    ks = sps.kstest(excess, "expon", args=(0, 1.0 / a))
    ks_th = sps.kstest(excess, "expon", args=(0, 1.0 / ALPHA))
    return FitReport(
        float(a),
        float(a / math.sqrt(n)),
        n,
        float(ks.statistic),
        float(ks.pvalue),
        extra={"ks_theory_statistic": float(ks_th.statistic), "ks_theory_p_value": float(ks_th.pvalue), "h0": h0, "lilliefors": True},
    )


def gumbel_tail_fit(max_values, window=GUMBEL_WINDOW, min_count: int = 100) -> FitReport:
    """Slope of ``log(-log F_hat(x))`` against ``x`` on an upper quantile window.

    ``F_hat`` uses plotting positions ``i/(N+1)``.  For a randomly shifted Gumbel
    law with rate ``alpha`` the slope tends to ``-alpha``; location is free.
    """
    x = np.sort(np.asarray(max_values, dtype=float))
    n = len(x)
    if n < min_count:
        return _refuse(f"need at least {min_count} values", n)
    F = np.arange(1, n + 1) / (n + 1)
    sel = (F >= window[0]) & (F <= window[1])
    xs, Fs = x[sel], F[sel]
    if len(np.unique(xs)) < 3:
        return _refuse("empirical CDF degenerate in the quantile window", n)
    fit = sps.linregress(xs, np.log(-np.log(Fs)))
    return FitReport(float(fit.slope), float(fit.stderr), n, extra={"window": list(window), "points": int(sel.sum()), "intercept": float(fit.intercept)})


def sample_shifted_gumbel(rng: np.random.Generator, size: int, rate: float = ALPHA, shift_sd: float = 0.0) -> np.ndarray:
    """Gumbel variates with rate ``rate`` plus an independent Gaussian shift."""
    return rng.gumbel(0.0, 1.0 / rate, size) + shift_sd * rng.standard_normal(size)


# -- level sets --------------------------------------------------------------------------


def level_set_growth(fields, lambda_grid, m_eps: float, min_fields: int = 20) -> FitReport:
    """Least-squares slope of mean ``log|Gamma(lambda)|`` against ``lambda``.

    Means are over fields with a non-empty level set.  Rows of the table and any
    dropped ``lambda`` are returned in ``extra``, together with second differences
    of ``log|Gamma|`` over consecutive grid triples.  Those are paired within each
    field (fields empty anywhere on the triple are skipped), so their standard
    errors are not inflated by the field-to-field spread shared by all rows.
    """
    fields = [as_values(f) for f in fields]
    lam = np.asarray(lambda_grid, dtype=float)
    if len(fields) < min_fields:
        raise ValueError(f"need at least {min_fields} fields")
    if np.any(np.diff(lam) <= 0):
        raise ValueError("lambda grid must be increasing")
    rows, dropped = [], []
    table = np.array([[len(level_set(f, l, m_eps)) for l in lam] for f in fields])
    for l, sizes in zip(lam, table.T):
        nz = sizes[sizes > 0]
        if len(nz) == 0:
            dropped.append(float(l))
            continue
        logs = np.log(nz)
        se = float(logs.std(ddof=1) / math.sqrt(len(logs))) if len(logs) > 1 else 0.0
        rows.append({"lambda": float(l), "mean_log_size": float(logs.mean()), "std_error": se, "nonempty": int(len(nz))})
    extra = {"rows": rows, "dropped": dropped, "second_differences": _second_differences(lam, table)}
    if len(rows) < 2:
        rep = _refuse("fewer than two lambda values with non-empty level sets", len(fields))
        rep.extra.update(extra)
        return rep
    x = np.array([r["lambda"] for r in rows])
    y = np.array([r["mean_log_size"] for r in rows])
    if np.ptp(y) == 0:
        return FitReport(0.0, 0.0, len(fields), extra=extra)
    fit = sps.linregress(x, y)
    return FitReport(float(fit.slope), float(fit.stderr), len(fields), extra=extra)


def _second_differences(lam, table) -> list[dict]:
    out = []
    for k in range(1, len(lam) - 1):
        trip = table[:, k - 1 : k + 2]
        ok = np.all(trip > 0, axis=1)
        if ok.sum() < 2:
            continue
        lg = np.log(trip[ok])
        d = (lg[:, 2] - lg[:, 1]) / (lam[k + 1] - lam[k]) - (lg[:, 1] - lg[:, 0]) / (lam[k] - lam[k - 1])
        out.append({"lambda": float(lam[k]), "estimate": float(d.mean()), "std_error": float(d.std(ddof=1) / math.sqrt(len(d))), "fields": int(ok.sum())})
    return out


def chaos_measure(field, region) -> float:
    """``eps^2 sum_A ((2/sqrt(2pi)) log(1/eps) - phi) exp(-2 log(1/eps) + sqrt(8pi) phi)``."""
    values = as_values(field)
    n = values.shape[-1]
    sites = np.asarray(region, dtype=np.int64).ravel()
    if sites.size == 0:
        return 0.0
    L = math.log(n)
    phi = values.ravel()[sites]
    return float(np.sum((2.0 / math.sqrt(2 * math.pi) * L - phi) * np.exp(-2.0 * L + ALPHA * phi)) / n**2)


def intermediate_pair_fraction(levels: Sequence[LevelSet], r: float, epsilon: float) -> FitReport:
    """Fraction of level sets with a pair at distance in ``(eps r, 1/r)``."""
    hits = np.array([intermediate_pair_count(ls, r, epsilon) > 0 for ls in levels], dtype=float)
    k = len(hits)
    p = float(hits.mean())
    return FitReport(p, math.sqrt(p * (1 - p) / k), k, extra={"r": r})


def _stack(fields) -> np.ndarray:
    arr = np.stack([as_values(f) for f in fields]) if isinstance(fields, (list, tuple)) else np.asarray(fields, dtype=float)
    return arr[None] if arr.ndim == 2 else arr


# -- correspondence between Psi_s and X_s^GFF ------------------------------------------------


def _correspondence_counts(a, b, r: int, lam: float, kappa: float, m_eps: float):
    """Maxima of ``a`` in both level sets, and how many map correctly to maxima of ``b``."""
    n = a.shape[-1]
    eps = 1.0 / n
    rad = r * eps
    lat = TorusLattice(n)
    fa, fb = a.ravel(), b.ravel()
    theta_a = local_maxima(a, rad)
    sel = theta_a[(fa[theta_a] >= m_eps - lam) & (fb[theta_a] >= m_eps - lam)]
    if len(sel) == 0:
        return 0, 0
    pi = np.atleast_1d(argmax_map(b, sel, 2 * rad))
    theta_b = set(local_maxima(b, rad).tolist())
    in_theta = np.array([p in theta_b for p in pi.tolist()])
    close = torus_distance(lat.coordinates(sel), lat.coordinates(pi)) <= rad / 2 * (1 + 1e-12)
    gap = fa[sel] - fa[pi]
    good = in_theta & close & (gap >= 0) & (gap <= kappa)
    return int(good.sum()), int(len(sel))


def correspondence_fraction(psi_fields, gff_fields, r: int, lam: float, kappa: float, m_eps: float) -> FitReport:
    """Pooled fraction of ``Psi_s`` maxima (in both level sets) whose ``X_s^GFF`` argmax
    within ``2 r eps`` is an ``r eps``-maximum at distance ``<= r eps / 2`` with
    ``0 <= Psi(x) - Psi(Pi(x)) <= kappa``.  ``extra['reverse']`` swaps the roles."""
    if r < 1 or kappa <= 0:
        raise ValueError("need r >= 1 and kappa > 0")
    psi_fields, gff_fields = _stack(psi_fields), _stack(gff_fields)
    if psi_fields.shape != gff_fields.shape:
        raise ValueError("fields must be paired on one lattice")
    fwd = np.array([_correspondence_counts(p, g, r, lam, kappa, m_eps) for p, g in zip(psi_fields, gff_fields)])
    rev = np.array([_correspondence_counts(g, p, r, lam, kappa, m_eps) for p, g in zip(psi_fields, gff_fields)])
    extra = {"fields": len(psi_fields)}
    k_rev = int(rev[:, 1].sum())
    extra["reverse"] = float(rev[:, 0].sum() / k_rev) if k_rev else math.nan
    extra["reverse_size"] = k_rev
    k = int(fwd[:, 1].sum())
    if k == 0:
        return FitReport(math.nan, math.nan, 0, status="empty", extra=extra)
    p = float(fwd[:, 0].sum() / k)
    return FitReport(p, math.sqrt(p * (1 - p) / k), k, extra=extra)


def inclusion_test(gff_fields, psi_fields, lam: float, m_eps: float) -> FitReport:
    """Empirical ``P(Gamma^GFF(lam) in Gamma^Psi(2 lam))``; the reverse inclusion is
    in ``extra['reverse']``."""
    gff_fields, psi_fields = _stack(gff_fields), _stack(psi_fields)
    if gff_fields.shape != psi_fields.shape:
        raise ValueError("fields must be paired")
    fwd = np.array([bool(np.all(p[g >= m_eps - lam] >= m_eps - 2 * lam)) for g, p in zip(gff_fields, psi_fields)])
    rev = np.array([bool(np.all(g[p >= m_eps - lam] >= m_eps - 2 * lam)) for g, p in zip(gff_fields, psi_fields)])
    k = len(fwd)
    p1, p2 = float(fwd.mean()), float(rev.mean())
    return FitReport(p1, math.sqrt(p1 * (1 - p1) / k), k, extra={"lambda": lam, "reverse": p2, "reverse_std_error": math.sqrt(p2 * (1 - p2) / k)})


# -- strip ratio and synthetic Cox processes ---------------------------------------------


def strip_counts(samples: Sequence[ExtremalProcessSample], h0: float, h1: float):
    lower = np.array([np.count_nonzero((s.heights >= h0) & (s.heights < h1)) for s in samples])
    upper = np.array([np.count_nonzero(s.heights >= h1) for s in samples])
    return lower, upper


def strip_ratio_test(samples, h0: float, h1: float, seed: int = 0, n_boot: int = 2000, alpha: float = ALPHA) -> FitReport:
    """Ratio of mean counts in ``[h0, h1)`` and ``[h1, inf)`` with a bootstrap error.

    For an intensity ``Z(dx) e^{-alpha h} dh`` the population value is
    ``exp(alpha (h1 - h0)) - 1`` whatever the law of ``Z``.
    """
    if not h1 > h0:
        raise ValueError("need h0 < h1")
    lower, upper = strip_counts(samples, h0, h1)
    k = len(lower)
    theory = math.expm1(alpha * (h1 - h0))
    if upper.sum() == 0:
        return _refuse("no points in the upper strip", k)
    ratio = lower.sum() / upper.sum()
    rng = stream(seed, "stats", "bootstrap")
    idx = rng.integers(0, k, size=(n_boot, k))
    lo_b, up_b = lower[idx].sum(axis=1), upper[idx].sum(axis=1)
    ok = up_b > 0
    se = float(np.std(lo_b[ok] / up_b[ok], ddof=1))
    z = (ratio - theory) / se if se > 0 else math.inf
    return FitReport(
        float(ratio),
        se,
        k,
        statistic=float(z),
        extra={"theory": theory, "alpha": alpha, "h0": h0, "h1": h1, "lower": int(lower.sum()), "upper": int(upper.sum())},
    )


def sample_cox_process(
    rng: np.random.Generator,
    n_samples: int,
    h_min: float,
    alpha: float = ALPHA,
    z_mean: float = 1.0,
    z_sampler: Callable[[np.random.Generator], float] | None = None,
    epsilon: float = 0.0,
) -> list[ExtremalProcessSample]:
    """Poisson processes on ``[0,1)^2 x [h_min, inf)`` with intensity
    ``Z dx e^{-alpha h} dh``; ``Z`` is drawn per sample (default ``z_mean * Exp(1)``)."""
    out = []
    for _ in range(n_samples):
        Z = z_sampler(rng) if z_sampler is not None else z_mean * rng.exponential()
        mean = Z * math.exp(-alpha * h_min) / alpha
        k = rng.poisson(mean)
        out.append(
            ExtremalProcessSample(
                rng.random((k, 2)), h_min + rng.exponential(1.0 / alpha, k), 0.0, epsilon, 0.0
            )
        )
    return out


# -- emitters ------------------------------------------------------------------------------


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
