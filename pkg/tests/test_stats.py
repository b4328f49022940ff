import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sglab.extremes import ExtremalProcessSample, LevelSet, level_set, local_maxima
from sglab.rng import stream
from sglab.stats import (
    ALPHA,
    FitReport,
    box_bump,
    chaos_measure,
    correspondence_fraction,
    exceedance_rate_fit,
    gumbel_tail_fit,
    inclusion_test,
    intermediate_pair_fraction,
    laplace_functional,
    level_set_growth,
    poisson_laplace_value,
    rows_to_csv,
    sample_cox_process,
    sample_shifted_gumbel,
    step_function,
    strip_ratio_test,
    translate_test_function,
)


def empty_sample():
    return ExtremalProcessSample(np.zeros((0, 2)), np.zeros(0), 0.1, 1 / 8, 0.0)


def test_alpha_value():
    assert ALPHA == pytest.approx(5.01326, abs=1e-5)


# -- FitReport ----------------------------------------------------------------------------


def test_fit_report_invariants():
    with pytest.raises(ValueError):
        FitReport(1.0, -0.1, 3)
    with pytest.raises(ValueError):
        FitReport(1.0, 0.1, 3, p_value=1.5)
    rep = FitReport(1.0, math.nan, 3, status="insufficient")
    assert not rep.ok
    d = json.loads(FitReport(np.float64(2.0), 0.5, 4, extra={"a": np.arange(2)}).to_json())
    assert d["estimate"] == 2.0 and d["extra"]["a"] == [0, 1]


# -- test functions ------------------------------------------------------------------------


@pytest.mark.parametrize("f", [box_bump((0.2, 0.7, 0.0, 0.5), 0.5, 1.5, 2.0), step_function(0.3, 0.4)])
def test_test_functions_vanish_below_threshold(f):
    g = np.linspace(0, 1, 21, endpoint=False)
    xs = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    hs = np.linspace(f.h0 - 3, f.h0 + 3, 61)
    vals = f(xs[:, None, :], hs[None, :])
    assert np.all(vals >= 0)
    assert np.all(vals[:, hs < f.h0] == 0)
    assert vals.max() > 0


def test_step_function_generates_products():
    f = step_function(0.0, 0.25)
    s = ExtremalProcessSample(np.full((3, 2), 0.5), np.array([-1.0, 0.5, 2.0]), 0.1, 0.01, 0.0)
    assert math.exp(-f.pairing(s)) == pytest.approx(0.75**2, rel=1e-14)
    with pytest.raises(ValueError):
        step_function(0.0, 1.0)(np.zeros((1, 2)), np.ones(1))


def test_translation_of_test_functions():
    f = box_bump((0.0, 1.0, 0.0, 1.0), 0.0, 1.0)
    rng = stream(0, "tr")
    xs = rng.integers(0, 8, (50, 2)) / 8
    hs = rng.uniform(-1, 2, 50)
    np.testing.assert_array_equal(translate_test_function(f, np.zeros((8, 8)))(xs, hs), f(xs, hs))
    np.testing.assert_allclose(translate_test_function(f, np.full((8, 8), 0.3))(xs, hs), f(xs, hs + 0.3))
    phi, psi = rng.standard_normal((2, 8, 8))
    twice = translate_test_function(translate_test_function(f, phi), psi)
    np.testing.assert_allclose(twice(xs, hs), translate_test_function(f, phi + psi)(xs, hs), atol=1e-12)


# -- Laplace functional --------------------------------------------------------------------


def test_laplace_trivial_cases():
    f = box_bump(h0=0.0, h1=1.0)
    rep = laplace_functional([empty_sample()] * 5, f)
    assert (rep.estimate, rep.std_error) == (1.0, 0.0)
    s = ExtremalProcessSample(np.array([[0.5, 0.5]]), np.array([-2.0]), 0.1, 0.01, 0.0)
    assert laplace_functional([s, s], f).estimate == 1.0
    with pytest.raises(ValueError):
        laplace_functional([], f)


def test_laplace_matches_poisson_formula():
    rate = 3.0
    f = box_bump((0.0, 0.5, 0.0, 1.0), 0.0, 0.4, 1.5)
    samples = sample_cox_process(stream(1, "ppp"), 4000, 0.0, ALPHA, z_sampler=lambda r: rate)
    rep = laplace_functional(samples, f)
    target = poisson_laplace_value(f, rate, ALPHA, 0.0)
    assert 0 < rep.estimate <= 1
    assert abs(rep.estimate - target) < 3 * rep.std_error


# -- height law ------------------------------------------------------------------------------


def test_exceedance_closed_form_and_refusal():
    rep = exceedance_rate_fit([0.1, 0.3, 0.2], 0.0)
    assert rep.estimate == pytest.approx(5.0, rel=1e-14)
    assert rep.status == "insufficient"
    assert exceedance_rate_fit([], 0.0).sample_size == 0
    with pytest.raises(ValueError):
        exceedance_rate_fit([0.1, -0.2], 0.0)


def test_exceedance_on_synthetic_exponential():
    h = stream(2, "exp").exponential(1 / ALPHA, 10_000)
    rep = exceedance_rate_fit(h, 0.0)
    assert rep.ok
    assert abs(rep.estimate - ALPHA) < 3 * ALPHA / 100
    assert rep.std_error == pytest.approx(rep.estimate / 100)
    assert rep.p_value > 0.01 and rep.extra["ks_theory_p_value"] > 0.01


@given(st.integers(0, 2**31), st.floats(-5, 5), st.floats(0.1, 10))
@settings(max_examples=40, deadline=None)
def test_exceedance_equivariance(seed, c, k):
    h = stream(seed, "eq").exponential(1.0, 50)
    base = exceedance_rate_fit(h, 0.0).estimate
    assert exceedance_rate_fit(h + c, c).estimate == pytest.approx(base, rel=1e-9)
    assert exceedance_rate_fit(k * h, 0.0).estimate == pytest.approx(base / k, rel=1e-9)


@pytest.mark.parametrize("rate, tol", [(1.0, 0.05), (ALPHA, 0.25)])
def test_gumbel_slope_recovers_rate(rate, tol):
    x = sample_shifted_gumbel(stream(3, "gum"), 100_000, rate)
    assert gumbel_tail_fit(x).estimate == pytest.approx(-rate, abs=tol)


@given(st.integers(0, 2**31), st.floats(-20, 20))
@settings(max_examples=30, deadline=None)
def test_gumbel_slope_location_invariance(seed, c):
    x = sample_shifted_gumbel(stream(seed, "loc"), 400, ALPHA, 0.3)
    assert gumbel_tail_fit(x + c).estimate == pytest.approx(gumbel_tail_fit(x).estimate, rel=1e-6)


def test_gumbel_refusals():
    assert gumbel_tail_fit(np.zeros(50)).status == "insufficient"
    assert gumbel_tail_fit(np.zeros(500)).status == "insufficient"


# -- level sets --------------------------------------------------------------------------


def test_growth_constant_fields_drop_lambdas():
    fields = [np.zeros((8, 8))] * 20
    rep = level_set_growth(fields, [0.5, 1.0, 2.0, 3.0], 2.0)
    assert rep.extra["dropped"] == [0.5, 1.0]
    assert rep.estimate == 0.0
    with pytest.raises(ValueError):
        level_set_growth(fields[:19], [1.0, 2.0], 2.0)
    with pytest.raises(ValueError):
        level_set_growth(fields, [2.0, 1.0], 2.0)


def test_growth_positive_for_iid_fields():
    fields = stream(4, "iid").standard_normal((20, 16, 16))
    rep = level_set_growth(fields, np.arange(1.0, 4.01, 0.5), 3.0)
    assert rep.ok and rep.estimate > 0
    assert len(rep.extra["rows"]) == 7


def test_chaos_measure_examples():
    assert chaos_measure(np.zeros((4, 4)), np.arange(16)) == pytest.approx(0.069132, abs=1e-6)
    assert chaos_measure(np.zeros((4, 4)), []) == 0.0


@given(st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_chaos_additive_and_brute_force(seed):
    rng = stream(seed, "chaos")
    n = 8
    f = rng.standard_normal((n, n))
    perm = rng.permutation(n * n)
    a, b = perm[:20], perm[20:45]
    assert chaos_measure(f, np.concatenate([a, b])) == pytest.approx(chaos_measure(f, a) + chaos_measure(f, b), rel=1e-12, abs=1e-15)
    eps, L = 1 / n, math.log(n)
    brute = sum(eps**2 * (2 / math.sqrt(2 * math.pi) * L - f.flat[x]) * math.exp(-2 * L + ALPHA * f.flat[x]) for x in a)
    assert chaos_measure(f, a) == pytest.approx(brute, rel=1e-12, abs=1e-15)


def test_pair_fraction():
    one = LevelSet(0.0, 0.0, 64, np.array([0, 6]))
    none = LevelSet(0.0, 0.0, 64, np.array([0]))
    rep = intermediate_pair_fraction([one, none, none, one], 4, 1 / 64)
    assert rep.estimate == 0.5 and rep.sample_size == 4


# -- coupled fields ---------------------------------------------------------------------


def test_correspondence_identity_counts_wider_maxima():
    # with Psi = X the argmax over the doubled ball is x itself exactly when x is a
    # maximum at radius 2 r eps as well
    x = stream(5, "corr").standard_normal((4, 32, 32)) + 2.0
    r, lam, m = 4, 3.0, 2.0
    sel = wide = 0
    for f in x:
        th = local_maxima(f, r / 32)
        th = th[f.ravel()[th] >= m - lam]
        sel += len(th)
        wide += len(np.intersect1d(th, local_maxima(f, 2 * r / 32)))
    for psi in (x, x + 0.7):
        rep = correspondence_fraction(psi, x, r, lam, 0.5, m)
        assert rep.sample_size == sel
        assert rep.estimate == pytest.approx(wide / sel, rel=1e-12)


def test_correspondence_separated_spikes():
    f = np.zeros((32, 32))
    f[4, 4], f[20, 12], f[10, 26] = 5.0, 4.0, 4.5
    rep = correspondence_fraction(f + 0.3, f, 4, 1.0, 0.5, 5.0)
    assert rep.estimate == 1.0 and rep.extra["reverse"] == 1.0 and rep.sample_size == 3


def test_correspondence_refusals():
    x = stream(5, "corr").standard_normal((2, 16, 16))
    empty = correspondence_fraction(x, x, 4, -100.0, 0.5, 2.0)
    assert empty.sample_size == 0 and empty.status == "empty"
    with pytest.raises(ValueError):
        correspondence_fraction(x, x, 0, 3.0, 0.5, 2.0)
    with pytest.raises(ValueError):
        correspondence_fraction(x, x[:1], 4, 3.0, 0.5, 2.0)


def test_inclusion_trivial_cases():
    rng = stream(6, "inc")
    x = rng.standard_normal((10, 16, 16))
    rep = inclusion_test(x, x, 1.0, 2.0)
    assert rep.estimate == 1.0 and rep.extra["reverse"] == 1.0
    bounded = 0.9 * np.tanh(rng.standard_normal((10, 16, 16)))
    assert inclusion_test(x, x + bounded, 1.0, 2.0).estimate == 1.0


# -- strip ratio -----------------------------------------------------------------------------


def test_strip_ratio_on_cox_process():
    samples = sample_cox_process(stream(7, "cox"), 1500, -1.0, ALPHA, z_mean=2.0)
    rep = strip_ratio_test(samples, -1.0, -0.8, seed=1)
    assert rep.extra["theory"] == pytest.approx(1.7255, abs=1e-4)
    assert abs(rep.estimate - rep.extra["theory"]) < 3 * rep.std_error


def test_strip_ratio_z_cancellation():
    one = sample_cox_process(stream(8, "z"), 1500, -1.0, ALPHA, z_mean=1.0)
    two = sample_cox_process(stream(8, "z"), 1500, -1.0, ALPHA, z_mean=2.0)
    a, b = strip_ratio_test(one, -1.0, -0.8), strip_ratio_test(two, -1.0, -0.8)
    assert b.extra["lower"] > 1.5 * a.extra["lower"]
    assert abs(a.estimate - b.estimate) < 3 * math.hypot(a.std_error, b.std_error)


def test_strip_ratio_edges():
    samples = sample_cox_process(stream(9, "edge"), 300, -1.0, ALPHA)
    assert strip_ratio_test(samples, -1.0, -0.999).estimate < 0.02
    assert strip_ratio_test([empty_sample()] * 3, 0.0, 0.2).status == "insufficient"
    with pytest.raises(ValueError):
        strip_ratio_test(samples, 0.2, 0.1)


def test_rows_to_csv_round_trip_floats():
    text = rows_to_csv([{"a": 0.1, "b": 2}, {"a": 1 / 3, "b": 3}])
    lines = text.splitlines()
    assert lines[0] == "a,b" and float(lines[2].split(",")[0]) == 1 / 3
    assert rows_to_csv([]) == ""


def test_level_set_helper_agrees_with_growth_rows():
    fields = stream(10, "rows").standard_normal((20, 8, 8))
    rep = level_set_growth(fields, [1.0, 2.0], 2.0)
    sizes = [len(level_set(f, 1.0, 2.0)) for f in fields]
    nz = [s for s in sizes if s > 0]
    assert rep.extra["rows"][0]["mean_log_size"] == pytest.approx(np.mean(np.log(nz)))


def test_growth_second_differences_are_paired():
    # log sizes exactly linear in lambda for every field: zero curvature, zero spread
    lam = np.array([0.0, 1.0, 2.0, 3.0])
    fields = []
    for _ in range(20):
        f = np.full(1024, -10.0)
        f[:8] = 2.0  # |Gamma(0)| = 8 with m_eps = 2
        f[8:16] = 1.0
        f[16:32] = 0.0
        f[32:64] = -1.0
        fields.append(f.reshape(32, 32))
    rep = level_set_growth(fields, lam, 2.0)
    sd = rep.extra["second_differences"]
    assert [r["lambda"] for r in sd] == [1.0, 2.0]
    for r in sd:
        assert r["estimate"] == pytest.approx(0.0, abs=1e-12) and r["std_error"] == 0.0
    assert rep.estimate == pytest.approx(math.log(2))
