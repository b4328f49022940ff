import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sglab.lattice import TorusLattice, apply_laplacian
from sglab.rng import stream
from sglab.sinegordon import (
    ChainDiagnostics,
    SGParams,
    energy,
    gaussian_energy,
    grad_energy,
    integrated_autocorr_time,
    mala_chain,
    mala_log_ratio,
    observable_suite,
    quadrature_expectations,
    run_chains,
)
from sglab.spectral import gff_multiplier, sample_fields

PI = math.pi


def params(n=4, z=0.1, beta=PI, m2=1.0):
    return SGParams(TorusLattice(n), z, beta, m2)


def fd_grad(f, phi, h=1e-5):
    g = np.zeros_like(phi)
    for idx in np.ndindex(phi.shape):
        e = np.zeros_like(phi)
        e[idx] = h
        g[idx] = (f(phi + e) - f(phi - e)) / (2 * h)
    return g


def test_energy_closed_form_example():
    p = params(4, 0.5, 4 * PI)
    assert energy(p, np.zeros((4, 4))) == pytest.approx(4.0, rel=1e-14)


def test_gaussian_constant_field():
    p = params(8, 0.0)
    assert energy(p, np.full((8, 8), 1.7)) == pytest.approx(0.5 * 1.7**2, rel=1e-14)


def test_beta_range_is_enforced():
    for beta in (0.0, 6 * PI, 7 * PI, -1.0):
        with pytest.raises(ValueError, match="beta out of range"):
            params(beta=beta)


def test_gradient_matches_finite_differences():
    p = params(4, 0.1, PI)
    rng = stream(0, "fd")
    for _ in range(10):
        phi = rng.standard_normal((4, 4))
        g = grad_energy(p, phi)
        fd = fd_grad(lambda x: float(energy(p, x)), phi)
        assert np.max(np.abs(fd - g) / np.abs(g)) < 1e-6


def test_gradient_special_cases():
    p = params(4, 0.3)
    assert np.all(grad_energy(p, np.zeros((4, 4))) == 0)
    q = params(4, 0.0)
    phi = stream(1, "g").standard_normal((4, 4))
    np.testing.assert_allclose(grad_energy(q, phi), q.epsilon**2 * (apply_laplacian(phi) + phi), atol=1e-13)


def test_periodic_shift_changes_only_the_mass_term():
    p = params(4, 0.4, 2.0)
    phi = stream(2, "shift").standard_normal((4, 4))
    shift = 2 * PI / p.sqrt_beta
    lhs = energy(p, phi + shift) - energy(p, phi)
    rhs = gaussian_energy(p, phi + shift) - gaussian_energy(p, phi)
    assert lhs == pytest.approx(rhs, abs=1e-10)
    assert abs(lhs) > 1e-3


def test_energy_is_batched():
    p = params(4)
    phis = stream(3, "b").standard_normal((5, 4, 4))
    np.testing.assert_allclose(energy(p, phis), [energy(p, f) for f in phis], rtol=1e-14)


@given(st.integers(0, 10_000), st.floats(1e-4, 2.0))
@settings(max_examples=30, deadline=None)
def test_detailed_balance_audit(seed, h):
    p = params(4, 0.3, 2.0)
    rng = stream(seed, "db")
    a, b = rng.standard_normal((2, 4, 4))
    fwd, asym_f = mala_log_ratio(p, a, b, h)
    bwd, asym_b = mala_log_ratio(p, b, a, h)
    assert fwd + bwd == pytest.approx(0.0, abs=1e-10)
    assert fwd - asym_f == pytest.approx(float(energy(p, a) - energy(p, b)), abs=1e-10)


def test_tiny_step_is_always_accepted():
    _, diag = mala_chain(params(4, 0.1), 1e-5, 200, 0, 1, seed=5, adapt=False)
    assert diag.acceptance_rate > 0.999


def test_chain_determinism_and_batching():
    p = params(4, 0.2)
    a, _ = run_chains(p, 3, 0.3, 20, 30, 2, seed=9)
    b, _ = run_chains(p, 3, 0.3, 20, 30, 2, seed=9)
    np.testing.assert_array_equal(a, b)
    c, _ = run_chains(p, 1, 0.3, 20, 30, 2, seed=9, chain_offset=2)
    np.testing.assert_array_equal(a[2], c[0])


def test_diagnostics_contract():
    samples, diag = mala_chain(params(4, 0.1), 0.5, 50, 50, 2, seed=1)
    assert isinstance(diag, ChainDiagnostics)
    assert len(samples) == diag.samples_kept == 50
    assert 0 <= diag.acceptance_rate <= 1
    assert diag.autocorr_time >= 0.5


def test_bad_acceptance_is_flagged():
    _, diag = mala_chain(params(4, 0.1), 50.0, 20, 0, 1, seed=1, adapt=False)
    assert diag.acceptance_rate < 0.1
    assert any("acceptance" in w for w in diag.warnings)


def test_stiffness_flag():
    p = params(256, 30.0, 4 * PI)
    assert p.stiff
    assert not params(8, 0.1).stiff


def test_autocorr_of_white_noise_and_ar1():
    rng = stream(4, "ac")
    assert integrated_autocorr_time(rng.standard_normal(20_000)) == pytest.approx(0.5, abs=0.1)
    x = np.zeros(50_000)
    e = rng.standard_normal(50_000)
    for i in range(1, len(x)):
        x[i] = 0.8 * x[i - 1] + e[i]
    # exact value 1/2 + 0.8/0.2 = 4.5
    assert integrated_autocorr_time(x) == pytest.approx(4.5, rel=0.15)


def test_observable_suite_examples():
    o = observable_suite(np.zeros((4, 4)), PI)
    assert (o["mean"], o["max"], o["mean_cos"]) == (0.0, 0.0, 1.0)
    o = observable_suite(np.full((4, 4), -0.25), PI)
    assert o["mean"] == -0.25 and o["max"] == -0.25


def test_z0_mala_matches_spectral_sampler():
    p = params(16, 0.0)
    samples, diags = run_chains(p, 8, 0.5, 1250, 200, 5, seed=21)
    mala = samples[..., 0, 0].ravel()
    lat = p.lattice
    ref = sample_fields(lat, gff_multiplier(lat), stream(21, "ref"), size=10_000)[:, 0, 0]
    assert stats.ks_2samp(mala, ref).pvalue > 0.01
    assert all(0.1 <= d.acceptance_rate <= 0.9 for d in diags)


def test_two_by_two_quadrature_oracle():
    p = params(2, 0.1, PI)
    quad = quadrature_expectations(p, {"sq": lambda f: f[:, 0, 0] ** 2}, order=24)
    samples, _ = run_chains(p, 8, 0.5, 5000, 500, 2, seed=4)
    per_chain = (samples**2).mean(axis=(-2, -1)).mean(axis=1)
    se = per_chain.std(ddof=1) / math.sqrt(len(per_chain))
    assert abs(per_chain.mean() - quad["sq"]) < 3 * se


def test_quadrature_reduces_to_gaussian_at_z0():
    p = params(2, 0.0)
    quad = quadrature_expectations(p, {"sq": lambda f: f[:, 0, 0] ** 2}, order=12)
    assert quad["sq"] == pytest.approx(gff_multiplier(p.lattice).site_variance, rel=1e-12)
    with pytest.raises(ValueError):
        quadrature_expectations(params(4, 0.1), {})
