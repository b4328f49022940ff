"""The seven experiment kinds run by the command line tool.

Each experiment reads an :class:`ExperimentConfig`, writes its files through an
:class:`Output` (which records checksums) and returns a JSON-ready report.
Per-sample work goes through :func:`parallel_map`; every unit draws from its own
labelled stream, so results do not depend on the worker count.
"""
from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import io as sio
from .config import ConfigError, ExperimentConfig
from .extremes import centering, default_radius, extremal_process, level_set
from .lattice import TorusLattice
from .polchinski import (
    PotentialEstimator,
    auxiliary_field,
    backward_flow,
    default_horizon,
    estimate_grad_vt,
    estimate_vt,
    polchinski_residual,
    remainder_decay_report,
)
from .rng import stream
from .sinegordon import SGParams, energy, grad_energy, observable_suite, quadrature_expectations, run_chains
from .spectral import decomposition_identity_check, gff_multiplier, sample_fields
from .stats import (
    ALPHA,
    FitReport,
    correspondence_fraction,
    exceedance_rate_fit,
    gumbel_tail_fit,
    inclusion_test,
    intermediate_pair_fraction,
    level_set_growth,
    rows_to_csv,
    strip_ratio_test,
)

log = logging.getLogger(__name__)

FLOW_MAX_N = 16


class Output:
    """Writes files below one directory and remembers their SHA-256."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}
        self.streams: dict[str, int] = {}

    def write(self, rel: str, data: bytes | str) -> None:
        if isinstance(data, str):
            data = data.encode("utf-8")
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.files[rel] = hashlib.sha256(data).hexdigest()

    def count_streams(self, label: str, k: int) -> None:
        self.streams[label] = self.streams.get(label, 0) + int(k)


def parallel_map(fn, args, workers: int):
    args = list(args)
    if workers <= 1 or len(args) <= 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, args, chunksize=max(1, len(args) // (4 * workers))))


def _report(fit: FitReport) -> dict:
    return fit.to_dict()


def _radius(cfg: ExperimentConfig, n: int) -> float:
    r = cfg["r"]
    return default_radius(1.0 / n) if r == "default" else float(r)


def _params(cfg: ExperimentConfig, n: int | None = None, z: float | None = None) -> SGParams:
    return SGParams(TorusLattice(n or cfg["n"]), cfg["z"] if z is None else z, cfg["beta"], cfg["mass_sq"])


def _flow_guard(params: SGParams) -> None:
    if params.z != 0 and params.lattice.n > FLOW_MAX_N:
        raise ConfigError(f"the coupling flow is limited to n <= {FLOW_MAX_N} when z != 0")


def _stiffness_warning(params: SGParams) -> list[str]:
    if params.stiff:
        msg = f"vertex coefficient {abs(params.vertex):.3g} exceeds 50 m^2; samplers may be stiff"
        log.warning(msg)
        return [msg]
    return []


# -- extremes -------------------------------------------------------------------------


def _gff_unit(args):
    seed, n, m2, r, rep, i, keep = args
    lat = TorusLattice(n)
    f = sample_fields(lat, gff_multiplier(lat, m2), stream(seed, "gff-field", n, rep, i))
    return extremal_process(f, r), float(f.max()), (f if keep else None)


def _sg_unit(args):
    cfg, chain, k, keep = args
    params = _params(cfg)
    samples, diags = run_chains(
        params, 1, cfg["step_size"], k, cfg["burn_in"], cfg["thin"], cfg["seed"], chain_offset=chain
    )
    r = _radius(cfg, cfg["n"])
    out = [(extremal_process(f, r), float(f.max()), (f if keep else None)) for f in samples[0]]
    return out, diags[0]


def _extremes_report(cfg, out: Output, units, prefix: str = "") -> dict:
    processes = [u[0] for u in units]
    maxima = np.array([u[1] for u in units])
    rows = []
    for i, (proc, mx, fld) in enumerate(units):
        out.write(f"{prefix}points/sample_{i:05d}.jsonl", sio.encode_points(proc))
        if fld is not None:
            out.write(f"{prefix}fields/sample_{i:05d}.fld", sio.encode_field(fld))
        rows.append({"index": i, "max": mx, "points": len(proc), "max_height": float(proc.heights.max()) if len(proc) else math.nan})
    out.write(f"{prefix}samples.csv", rows_to_csv(rows))
    h = np.concatenate([p.heights for p in processes]) if processes else np.zeros(0)
    exc = exceedance_rate_fit(h[h >= cfg["threshold"]], cfg["threshold"])
    rep = {
        "exceedance": _report(exc),
        "strip_ratio": _report(strip_ratio_test(processes, cfg["h0"], cfg["h1"], seed=cfg["seed"])),
        "gumbel": _report(gumbel_tail_fit(maxima)),
        "samples": len(units),
        "radius": processes[0].r if processes else None,
        "m_eps": processes[0].m_eps if processes else None,
        "alpha_theory": ALPHA,
    }
    return rep


def run_gff_extremes(cfg: ExperimentConfig, out: Output) -> dict:
    n, m2, seed = cfg["n"], cfg["mass_sq"], cfg["seed"]

    def units(nn, rep):
        args = [(seed, nn, m2, _radius(cfg, nn), rep, i, cfg["save_fields"] and rep == 0 and nn == n) for i in range(cfg["samples"])]
        out.count_streams(f"gff-field/{nn}/{rep}", len(args))
        return parallel_map(_gff_unit, args, cfg["workers"])

    main = units(n, 0)
    report = _extremes_report(cfg, out, main)
    if cfg["compare_n"]:
        rows = []
        for rep in range(cfg["replicates"]):
            fits = {}
            for nn in (n, cfg["compare_n"]):
                us = main if (rep == 0 and nn == n) else units(nn, rep)
                h = np.concatenate([u[0].heights for u in us])
                fits[nn] = exceedance_rate_fit(h[h >= cfg["threshold"]], cfg["threshold"]).estimate
            rows.append(
                {
                    "replicate": rep,
                    f"alpha_n{n}": fits[n],
                    f"alpha_n{cfg['compare_n']}": fits[cfg["compare_n"]],
                    "closer_at_n": abs(fits[n] - ALPHA) < abs(fits[cfg["compare_n"]] - ALPHA),
                }
            )
        out.write("replicates.csv", rows_to_csv(rows))
        report["replicates"] = rows
    return report


def run_sg_extremes(cfg: ExperimentConfig, out: Output) -> dict:
    params = _params(cfg)
    warnings = _stiffness_warning(params)
    chains = cfg["chains"]
    per = -(-cfg["samples"] // chains)
    res = parallel_map(_sg_unit, [(cfg, c, per, cfg["save_fields"]) for c in range(chains)], cfg["workers"])
    out.count_streams("mala", chains)
    units = [u for r, _ in res for u in r][: cfg["samples"]]
    diags = [d for _, d in res]
    report = _extremes_report(cfg, out, units)
    report["chains"] = [d.__dict__ for d in diags]
    report["warnings"] = warnings + [w for d in diags for w in d.warnings]
    return report


# -- samplers cross-checks -----------------------------------------------------------------


OBSERVABLES = ("mean", "var", "mean_cos", "max")


def _mala_means(params, cfg, per_chain: int):
    samples, diags = run_chains(params, cfg["chains"], cfg["step_size"], per_chain, cfg["burn_in"], cfg["thin"], cfg["seed"])
    obs = np.array([[[observable_suite(f, params.beta)[k] for k in OBSERVABLES] for f in ch] for ch in samples])
    chain_means = obs.mean(axis=1)  # (chains, observables)
    c = len(chain_means)
    return chain_means.mean(axis=0), chain_means.std(axis=0, ddof=1) / math.sqrt(c), samples, diags


def _xcheck_flow(cfg, out):
    params = _params(cfg)
    _flow_guard(params)
    T = cfg["T"] or default_horizon(params)
    path = backward_flow(params, T=T, dt=cfg["dt"], seed=cfg["seed"], n_paths=cfg["samples"], mc_samples=cfg["mc_samples"])
    out.count_streams("flow", 2 * cfg["samples"])
    sg, _ = path.final()
    fobs = np.array([[observable_suite(f, params.beta)[k] for k in OBSERVABLES] for f in sg])
    f_mean, f_se = fobs.mean(axis=0), fobs.std(axis=0, ddof=1) / math.sqrt(len(fobs))
    per = -(-cfg["samples"] * 10 // cfg["chains"])
    m_mean, m_se, _, diags = _mala_means(params, cfg, per)
    out.count_streams("mala", cfg["chains"])
    rows = []
    for k, name in enumerate(OBSERVABLES):
        se = math.hypot(f_se[k], m_se[k])
        rows.append(
            {"observable": name, "flow_mean": f_mean[k], "flow_se": f_se[k], "mala_mean": m_mean[k], "mala_se": m_se[k], "z_score": (f_mean[k] - m_mean[k]) / se if se > 0 else 0.0}
        )
    out.write("observables.csv", rows_to_csv(rows))
    return {"observables": rows, "T": T, "all_within_3se": all(abs(r["z_score"]) <= 3 for r in rows), "chains": [d.__dict__ for d in diags]}


def _xcheck_quadrature(cfg, out):
    params = _params(cfg)
    if params.lattice.n != 2:
        raise ConfigError("quadrature reference needs n = 2")
    sb = params.sqrt_beta
    quad = quadrature_expectations(
        params,
        {"phi0_sq": lambda f: f[:, 0, 0] ** 2, "cos_phi0": lambda f: np.cos(sb * f[:, 0, 0])},
        order=cfg["quadrature_order"] or 24,
    )
    per = -(-cfg["samples"] // cfg["chains"])
    samples, diags = run_chains(params, cfg["chains"], cfg["step_size"], per, cfg["burn_in"], cfg["thin"], cfg["seed"])
    out.count_streams("mala", cfg["chains"])
    # site averages: same expectation by translation invariance, lower variance
    obs = {"phi0_sq": (samples**2).mean(axis=(-2, -1)), "cos_phi0": np.cos(sb * samples).mean(axis=(-2, -1))}
    rows = []
    for k, v in obs.items():
        cm = v.mean(axis=1)
        se = cm.std(ddof=1) / math.sqrt(len(cm))
        rows.append({"observable": k, "quadrature": quad[k], "mala_mean": float(cm.mean()), "mala_se": float(se), "z_score": float((cm.mean() - quad[k]) / se)})
    out.write("quadrature.csv", rows_to_csv(rows))
    return {"observables": rows, "all_within_3se": all(abs(r["z_score"]) <= 3 for r in rows), "chains": [d.__dict__ for d in diags]}


def _xcheck_spectral(cfg, out):
    params = _params(cfg)
    if params.z != 0:
        raise ConfigError("spectral reference needs z = 0")
    lat = params.lattice
    per = -(-cfg["samples"] // cfg["chains"])
    samples, diags = run_chains(params, cfg["chains"], cfg["step_size"], per, cfg["burn_in"], cfg["thin"], cfg["seed"])
    out.count_streams("mala", cfg["chains"])
    mala = samples[..., 0, 0].ravel()[: cfg["samples"]]
    ref = sample_fields(lat, gff_multiplier(lat, params.mass_sq), stream(cfg["seed"], "spectral-reference"), size=cfg["samples"])[:, 0, 0]
    out.count_streams("spectral-reference", 1)
    ks = sps.ks_2samp(mala, ref)
    return {
        "ks_statistic": float(ks.statistic),
        "ks_p_value": float(ks.pvalue),
        "mala_var": float(mala.var()),
        "spectral_var": float(ref.var()),
        "exact_var": gff_multiplier(lat, params.mass_sq).site_variance,
        "draws": int(len(mala)),
        "chains": [d.__dict__ for d in diags],
    }


def _flow_unit(args):
    params, T, dt, seed, paths, offset, mc, s_marks = args
    return backward_flow(params, T=T, dt=dt, seed=seed, n_paths=paths, path_offset=offset, mc_samples=mc, s_marks=s_marks)


def _flow_batches(params, cfg, s_marks=()):
    T = cfg["T"] or default_horizon(params)
    P = cfg["samples"]
    w = cfg["workers"]
    size = -(-P // w)
    args = [(params, T, cfg["dt"], cfg["seed"], min(size, P - o), o, cfg["mc_samples"], tuple(s_marks)) for o in range(0, P, size)]
    return parallel_map(_flow_unit, args, w), T


def _xcheck_difference(cfg, out):
    ns = cfg["n_list"] or (cfg["n"],)
    zs = cfg["z_list"] or (cfg["z"],)
    rows = []
    for n in ns:
        for z in zs:
            params = _params(cfg, n=n, z=z)
            _flow_guard(params)
            paths, T = _flow_batches(params, cfg)
            out.count_streams(f"flow/{n}/{z}", 2 * cfg["samples"])
            m = np.concatenate([np.max(np.abs(p.delta[p.times[-1]]), axis=(-2, -1)) for p in paths])
            rows.append({"n": n, "z": z, "T": T, "mean_max_abs_delta": float(m.mean()), "std_error": float(m.std(ddof=1) / math.sqrt(len(m)))})
    out.write("difference_field.csv", rows_to_csv(rows))
    tab = {(r["n"], r["z"]): r["mean_max_abs_delta"] for r in rows}
    n_ratio = {z: tab[(ns[-1], z)] / tab[(ns[0], z)] for z in zs} if len(ns) > 1 else {}
    z_ratio = {n: tab[(n, zs[-1])] / tab[(n, zs[0])] for n in ns} if len(zs) > 1 else {}
    return {
        "rows": rows,
        "n_ratio": {str(k): v for k, v in n_ratio.items()},
        "z_ratio": {str(k): v for k, v in z_ratio.items()},
        "linear_z_ratio": zs[-1] / zs[0] if len(zs) > 1 else None,
    }


def _xcheck_remainder(cfg, out):
    params = _params(cfg)
    _flow_guard(params)
    paths, T = _flow_batches(params, cfg, cfg["s_marks"])
    out.count_streams("flow", 2 * cfg["samples"])
    merged = paths[0]
    for p in paths[1:]:
        for s in merged.remainder:
            merged.remainder[s] = np.concatenate([merged.remainder[s], p.remainder[s]])
            merged.remainder_bound[s] = np.concatenate([merged.remainder_bound[s], p.remainder_bound[s]])
    rep = remainder_decay_report(merged)
    out.write("remainder.csv", rows_to_csv(rep.rows))
    return {"rows": rep.rows, "decreasing": rep.decreasing, "bound_holds": rep.bound_holds, "T": T}


def run_coupling_xcheck(cfg: ExperimentConfig, out: Output) -> dict:
    mode = cfg["mode"] or "flow"
    handlers = {
        "flow": _xcheck_flow,
        "quadrature": _xcheck_quadrature,
        "spectral": _xcheck_spectral,
        "difference": _xcheck_difference,
        "remainder": _xcheck_remainder,
    }
    if mode not in handlers:
        raise ConfigError(f"coupling-xcheck mode must be one of {', '.join(handlers)}")
    rep = handlers[mode](cfg, out)
    rep["mode"] = mode
    rep["warnings"] = _stiffness_warning(_params(cfg))
    return rep


# -- Gaussian identities --------------------------------------------------------------------


def run_decomposition_audit(cfg: ExperimentConfig, out: Output) -> dict:
    ns = cfg["n_list"] or (cfg["n"],)
    ss = cfg["s_list"] or (cfg["s"],)
    m2 = cfg["mass_sq"]
    ident = [{"n": n, "s": s, "max_mode_discrepancy": decomposition_identity_check(TorusLattice(n), m2, s)} for n in ns for s in ss]
    norm = []
    for n in ns:
        total = gff_multiplier(TorusLattice(n), m2).site_variance
        norm.append({"n": n, "site_variance": total, "offset": total - math.log(n) / (2 * math.pi), "centering": centering(1.0 / n)})
    offsets = [r["offset"] for r in norm]
    lat = TorusLattice(cfg["n"])
    rng = stream(cfg["seed"], "gff-variance")
    mult = gff_multiplier(lat, m2)
    sizes = [min(256, cfg["samples"] - k) for k in range(0, cfg["samples"], 256)]
    draws = np.concatenate([sample_fields(lat, mult, rng, size=k)[:, 0, 0] for k in sizes])
    out.count_streams("gff-variance", 1)
    exact = gff_multiplier(lat, m2).site_variance
    out.write("identity.csv", rows_to_csv(ident))
    out.write("normalization.csv", rows_to_csv(norm))
    return {
        "identity": ident,
        "max_discrepancy": max(r["max_mode_discrepancy"] for r in ident),
        "normalization": norm,
        "offset_spread": max(offsets) - min(offsets),
        "variance_check": {"n": cfg["n"], "draws": cfg["samples"], "empirical": float(draws.var()), "spectral": exact, "relative_error": float(abs(draws.var() / exact - 1))},
    }


# -- potential and residual ------------------------------------------------------------------


def _residual_rows(cfg, out):
    params = _params(cfg)
    rows = []
    for t in cfg["t_list"]:
        est = PotentialEstimator(params, t, cfg["mc_samples"], cfg["quadrature_order"] or None)
        rep = polchinski_residual(est, np.zeros(params.lattice.shape), cfg["dt"], cfg["seed"], batches=cfg["batches"])
        out.count_streams(f"potential/residual/{t}", rep.batches)
        rows.append(
            {
                "t": t,
                "residual": rep.residual,
                "error_bar": rep.error_bar,
                "status": rep.status,
                "time_derivative": rep.time_derivative,
                "laplacian_term": rep.laplacian_term,
                "quadratic_term": rep.quadratic_term,
            }
        )
    out.write("residual.csv", rows_to_csv(rows))
    return {"rows": rows, "quadrature": bool(cfg["quadrature_order"])}


def _fd(fun, phi, h):
    g = np.zeros_like(phi)
    for idx in np.ndindex(phi.shape):
        e = np.zeros_like(phi)
        e[idx] = h
        g[idx] = (fun(phi + e) - fun(phi - e)) / (2 * h)
    return g


def _gradient_rows(cfg, out):
    params = _params(cfg)
    lat = params.lattice
    t = cfg["t_list"][0]
    est = PotentialEstimator(params, t, cfg["mc_samples"])
    rng = stream(cfg["seed"], "gradient-configurations")
    out.count_streams("gradient-configurations", 1)
    h = cfg["fd_step"]
    rows = []
    for c in range(cfg["configurations"]):
        phi = rng.standard_normal(lat.shape)
        ge = grad_energy(params, phi)
        fe = _fd(lambda p: energy(params, p), phi, h)
        gv, _ = estimate_grad_vt(est, phi, cfg["seed"] + c)
        fv = _fd(lambda p: estimate_vt(est, p, cfg["seed"] + c)[0], phi, h)
        rows.append(
            {
                "configuration": c,
                "energy_rel_error": float(np.max(np.abs(fe - ge) / np.maximum(np.abs(ge), 1e-300))),
                "potential_rel_error": float(np.max(np.abs(fv - gv) / np.maximum(np.abs(gv), 1e-300))),
            }
        )
    out.write("gradients.csv", rows_to_csv(rows))
    return {
        "rows": rows,
        "t": t,
        "max_energy_rel_error": max(r["energy_rel_error"] for r in rows),
        "max_potential_rel_error": max(r["potential_rel_error"] for r in rows),
    }


def run_polchinski_residual(cfg: ExperimentConfig, out: Output) -> dict:
    mode = cfg["mode"] or "residual"
    if mode == "residual":
        rep = _residual_rows(cfg, out)
    elif mode == "gradients":
        rep = _gradient_rows(cfg, out)
    else:
        raise ConfigError("polchinski-residual mode must be residual or gradients")
    rep["mode"] = mode
    return rep


# -- level sets and geometry -----------------------------------------------------------------


def _gff_field_unit(args):
    seed, n, m2, rep, i = args
    lat = TorusLattice(n)
    return sample_fields(lat, gff_multiplier(lat, m2), stream(seed, "gff-field", n, rep, i))


def _gff_fields(cfg, out, n):
    args = [(cfg["seed"], n, cfg["mass_sq"], 0, i) for i in range(cfg["samples"])]
    out.count_streams(f"gff-field/{n}/0", len(args))
    return parallel_map(_gff_field_unit, args, cfg["workers"])


def run_level_set_growth(cfg: ExperimentConfig, out: Output) -> dict:
    ns = cfg["n_list"] or (cfg["n"],)
    fits, rows = {}, []
    for n in ns:
        fields = _gff_fields(cfg, out, n)
        fit = level_set_growth(fields, cfg["lambda_grid"], centering(1.0 / n))
        fits[n] = fit
        for r in fit.extra["rows"]:
            rows.append({"n": n, **r})
    out.write("growth.csv", rows_to_csv(rows))
    slopes = {str(n): f.estimate for n, f in fits.items()}
    rep = {"fits": {str(n): _report(f) for n, f in fits.items()}, "slopes": slopes}
    if len(ns) > 1:
        a, b = fits[ns[0]].estimate, fits[ns[-1]].estimate
        rep["slope_relative_difference"] = abs(a - b) / max(abs(a), abs(b))
    return rep


def _correspondence(cfg, out):
    params = _params(cfg)
    _flow_guard(params)
    n = params.lattice.n
    flow = {"dt": cfg["dt"], "mc_samples": cfg["mc_samples"]}
    if cfg["T"]:
        flow["T"] = cfg["T"]
    aux = auxiliary_field(params, cfg["s"], cfg["seed"], n_paths=cfg["samples"], **flow)
    out.count_streams("aux", 2 * cfg["samples"])
    m = centering(1.0 / n)
    corr = correspondence_fraction(aux.psi, aux.x_gff, cfg["r_lattice"], cfg["lambda"], cfg["kappa"], m)
    inc = inclusion_test(aux.x_gff, aux.psi, cfg["lambda"], m)
    return {"correspondence": _report(corr), "inclusion": _report(inc), "m_eps": m}


def _pairs(cfg, out):
    n = cfg["n"]
    eps = 1.0 / n
    m = centering(eps)
    fields = _gff_fields(cfg, out, n)
    levels = [level_set(f, cfg["lambda"], m) for f in fields]
    rows = []
    for r in cfg["r_list"]:
        fit = intermediate_pair_fraction(levels, r, eps)
        rows.append({"r": r, "fraction": fit.estimate, "std_error": fit.std_error, "samples": fit.sample_size})
    out.write("pairs.csv", rows_to_csv(rows))
    fr = [r["fraction"] for r in rows]
    inversions = [i for i in range(len(fr) - 1) if fr[i + 1] > fr[i]]
    within = all(fr[i + 1] - fr[i] <= 2 * math.hypot(rows[i]["std_error"], rows[i + 1]["std_error"]) for i in inversions)
    return {
        "rows": rows,
        "inversions": len(inversions),
        "non_increasing": not inversions or (len(inversions) <= 1 and within),
        "mean_level_set_size": float(np.mean([len(ls) for ls in levels])),
    }


def run_near_maxima_geometry(cfg: ExperimentConfig, out: Output) -> dict:
    mode = cfg["mode"] or "pairs"
    if mode == "pairs":
        rep = _pairs(cfg, out)
    elif mode == "correspondence":
        rep = _correspondence(cfg, out)
    else:
        raise ConfigError("near-maxima-geometry mode must be pairs or correspondence")
    rep["mode"] = mode
    return rep


RUNNERS = {
    "gff-extremes": run_gff_extremes,
    "sg-extremes": run_sg_extremes,
    "coupling-xcheck": run_coupling_xcheck,
    "decomposition-audit": run_decomposition_audit,
    "polchinski-residual": run_polchinski_residual,
    "level-set-growth": run_level_set_growth,
    "near-maxima-geometry": run_near_maxima_geometry,
}
