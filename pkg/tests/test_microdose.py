from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcforge.errors import EmptyGainTable, MicrodoseError, NonPositiveEdge, UnknownKernel, ZeroCounts
from mcforge.microdose import (
    DY_WEIGHTED,
    LITERAL_SUMS,
    GainTable,
    LinearSpectrum,
    LogSpectrum,
    SiteGeometry,
    analyze,
    compute_spectra,
    emit_results,
    load_gain_table,
    log_edges,
    log_rebin,
    propagate_uncertainty,
    quality_kernel,
    read_distributions,
    to_lineal,
    weight_with_gains,
)

from oracles import overlap_split, q_average, resampled_sigma_q, spectra_reference

GEOM = SiteGeometry()


def linear(edges, counts, sigma=None):
    edges = np.asarray(edges, dtype=float)
    counts = np.asarray(counts, dtype=float)
    return LinearSpectrum(edges[:-1], edges[1:], counts, np.zeros_like(counts) if sigma is None else sigma)


def smooth_log_spectrum(n=50, bpd=10, peak=1.0, scale=1e4):
    edges = 0.1 * 10.0 ** (np.arange(n + 1) / bpd)
    mid = 0.5 * (edges[:-1] + edges[1:])
    counts = scale * np.exp(-0.5 * ((np.log10(mid) - peak) / 0.6) ** 2)
    return LogSpectrum(edges[:-1], edges[1:], counts, np.sqrt(counts), bpd)


# tally values are either empty or well above the subnormal range
count_st = st.one_of(st.just(0.0), st.floats(1e-6, 1e6))
spectra_st = st.lists(count_st, min_size=1, max_size=40).filter(lambda c: sum(c) > 0)


# ---- gains


def test_unit_gains_identity():
    s = linear([1e-9, 2e-9, 3e-9], [4.0, 5.0], np.array([1.0, 2.0]))
    out = weight_with_gains(s, GainTable([1e-10, 1e-6], [1.0, 1.0]))
    np.testing.assert_array_equal(out.counts, s.counts)
    np.testing.assert_array_equal(out.sigma, s.sigma)


def test_single_gain_point_doubles():
    s = linear([1e-9, 2e-9, 3e-9], [4.0, 5.0], np.array([1.0, 2.0]))
    out = weight_with_gains(s, GainTable([5e-9], [2.0]))
    np.testing.assert_array_equal(out.counts, [8.0, 10.0])
    np.testing.assert_array_equal(out.sigma, [2.0, 4.0])


def test_gain_log_interpolation():
    g = GainTable([1e-9, 1e-7], [2.0, 4.0])
    # 1e-8 sits halfway between the points in log E
    assert g.at(1e-8) == pytest.approx(3.0)
    assert g.at(1e-10) == 2.0 and g.at(1.0) == 4.0


def test_gain_table_file(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("energy,gain\n1e-9,2\n1e-7,4\n")
    assert load_gain_table(p).at(1e-8) == pytest.approx(3.0)
    p.write_text("energy,gain\n")
    with pytest.raises(EmptyGainTable):
        load_gain_table(p)
    with pytest.raises(EmptyGainTable):
        GainTable([], [])


# ---- lineal transform


def test_lineal_edges():
    out = to_lineal(linear([1e-9, 2e-9], [3.0]), SiteGeometry(50, 2 / 3))
    assert out.elow[0] == pytest.approx(0.03)
    assert out.ehigh[0] == pytest.approx(0.06)
    assert out.counts[0] == 3.0


def test_lineal_scales_with_chord():
    s = linear([1e-9, 2e-9, 5e-9], [1.0, 2.0])
    a = to_lineal(s, SiteGeometry(50, 0.5))
    b = to_lineal(s, SiteGeometry(100, 0.5))
    np.testing.assert_allclose(b.elow, a.elow / 2)


def test_geometry_validation():
    for kw in ({"dt": 0}, {"clf": 0}, {"clf": 1.5}, {"flag": 2}):
        with pytest.raises(MicrodoseError):
            SiteGeometry(**kw)


# ---- rebinning


def test_aligned_grid_is_identity():
    edges = 0.1 * 10.0 ** (np.arange(31) / 10)
    counts = np.arange(1.0, 31.0)
    out = log_rebin(linear(edges, counts, np.sqrt(counts)), 10)
    np.testing.assert_allclose(out.ylow, edges[:-1], rtol=1e-12)
    np.testing.assert_allclose(out.counts, counts, rtol=1e-12)
    np.testing.assert_allclose(out.sigma, np.sqrt(counts), rtol=1e-12)


def test_split_thirty_seventy():
    # one decade per bin from 1: targets [1,10), [10,100); source [7.3, 37.3) straddles 10
    src = linear([1.0, 7.3, 37.3, 100.0], [0.0, 100.0, 0.0])
    out = log_rebin(src, 1)
    lo_share, hi_share = overlap_split(7.3, 37.3, 10.0)
    assert out.counts[0] == pytest.approx(100 * lo_share)
    assert out.counts[1] == pytest.approx(100 * hi_share)
    assert lo_share == pytest.approx(0.09) and hi_share == pytest.approx(0.91)
    src = linear([1.0, 7.0, 17.0, 100.0], [0.0, 100.0, 0.0])
    out = log_rebin(src, 1)
    assert out.counts[:2] == pytest.approx([30.0, 70.0])


def test_rebin_errors():
    with pytest.raises(NonPositiveEdge):
        log_rebin(linear([0.0, 1.0], [1.0]))
    with pytest.raises(ZeroCounts):
        log_rebin(linear([1.0, 2.0], [0.0]))


def test_log_edges_constant_ratio():
    e = log_edges(0.03, 3e4, 60)
    r = e[1:] / e[:-1]
    np.testing.assert_allclose(r, 10 ** (1 / 60), rtol=1e-12)
    assert e[-1] >= 3e4 * (1 - 1e-12)


@settings(max_examples=100, deadline=None)
@given(spectra_st, st.floats(1e-10, 1e-6), st.integers(5, 80))
def test_chain_conserves_counts(counts, e0, bpd):
    n = len(counts)
    edges = np.linspace(e0, e0 * (2 + n), n + 1)
    s = linear(edges, counts)
    s = weight_with_gains(s, GainTable([1e-9], [1.0]))
    out = log_rebin(to_lineal(s, GEOM), bpd)
    assert out.counts.sum() == pytest.approx(sum(counts), rel=1e-9)


# ---- spectra


def test_two_bin_closed_form():
    spec = LogSpectrum(np.array([1.0, 10.0]), np.array([10.0, 100.0]), np.array([3.0, 1.0]), np.zeros(2), 1)
    ms = compute_spectra(spec, GEOM)
    # f = C/(dy*4): 3/36, 1/360 ; yF = 5.5*9*3/36 + 55*90/360 = 4.125 + 13.75
    assert ms.f == pytest.approx([3 / 36, 1 / 360])
    assert ms.yF == pytest.approx(17.875)
    d = [5.5 * 3 / 36 / 17.875, 55 / 360 / 17.875]
    assert ms.d == pytest.approx(d)
    assert ms.yD == pytest.approx(5.5 * d[0] * 9 + 55 * d[1] * 90)
    f, d2, yF, yD = spectra_reference([1.0, 10.0], [10.0, 100.0], [3.0, 1.0])
    assert ms.yD == pytest.approx(yD)


def test_delta_spectrum():
    counts = np.zeros(20)
    counts[7] = 42.0
    edges = 0.1 * 10.0 ** (np.arange(21) / 5)
    spec = LogSpectrum(edges[:-1], edges[1:], counts, np.sqrt(counts), 5)
    ms = compute_spectra(spec, GEOM)
    y0 = 0.5 * (edges[7] + edges[8])
    assert ms.yF == pytest.approx(y0, rel=1e-12)
    assert ms.yD == pytest.approx(y0, rel=1e-12)
    assert ms.Q_avg == pytest.approx(quality_kernel(y0), rel=1e-12)
    out = propagate_uncertainty(spec, ms)
    assert out.sigma_Q == pytest.approx(0.0, abs=1e-12)  # single bin: Q_avg ignores d's scale


@settings(max_examples=200, deadline=None)
@given(spectra_st, st.sampled_from([DY_WEIGHTED, LITERAL_SUMS]))
def test_normalization_and_order(counts, sums):
    n = len(counts)
    edges = 0.5 * 10.0 ** (np.arange(n + 1) / 12)
    spec = LogSpectrum(edges[:-1], edges[1:], np.array(counts), np.zeros(n), 12)
    ms = compute_spectra(spec, GEOM, sums=sums)
    assert np.sum(ms.f * ms.dy) == pytest.approx(1.0, abs=1e-9)
    if sums == DY_WEIGHTED:
        # the plain-sum variant drops the bin widths, so it is not a normalized mean
        assert np.sum(ms.d * ms.dy) == pytest.approx(1.0, abs=1e-9)
        assert ms.yF <= ms.yD * (1 + 1e-12)
    f, d, yF, yD = spectra_reference(edges[:-1], edges[1:], counts, sums == DY_WEIGHTED)
    assert ms.yF == pytest.approx(yF, rel=1e-9)
    assert ms.yD == pytest.approx(yD, rel=1e-9)
    assert ms.Q_avg == pytest.approx(q_average(edges[:-1], edges[1:], counts, sums == DY_WEIGHTED), rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(spectra_st, st.floats(1e-3, 1e3))
def test_scale_invariance(counts, k):
    n = len(counts)
    edges = 0.5 * 10.0 ** (np.arange(n + 1) / 12)
    a = compute_spectra(LogSpectrum(edges[:-1], edges[1:], np.array(counts), np.zeros(n), 12), GEOM)
    b = compute_spectra(LogSpectrum(edges[:-1], edges[1:], np.array(counts) * k, np.zeros(n), 12), GEOM)
    np.testing.assert_allclose(b.f, a.f, rtol=1e-9)
    np.testing.assert_allclose(b.d, a.d, rtol=1e-9)
    assert b.Q_avg == pytest.approx(a.Q_avg, rel=1e-9)


def test_zero_counts():
    with pytest.raises(ZeroCounts):
        compute_spectra(LogSpectrum(np.array([1.0]), np.array([2.0]), np.array([0.0]), np.zeros(1), 1), GEOM)


# ---- kernels


def test_icru40_small_y_limit():
    for y in (1e-4, 1e-3, 1e-2):
        assert quality_kernel(y) == pytest.approx(0.2755 * y, rel=1e-3)
    ys = np.linspace(1e-3, 10, 200)
    assert np.all(np.diff(quality_kernel(ys)) > 0)


def test_icru40_large_y_limit():
    assert quality_kernel(1e4) == pytest.approx(5510 / 1e4, rel=1e-9)


def test_unknown_kernel():
    with pytest.raises(UnknownKernel):
        quality_kernel(1.0, "icrp60")


def test_literal_kernel_is_selectable():
    y = 100.0
    assert quality_kernel(y, "appendix-literal") == pytest.approx(5.6e-5 * y * y * (1 - math.exp(-0.5e-4 * y) - 2e-6 * y))


# ---- uncertainties


def test_exact_inputs_give_zero_sigma():
    spec = smooth_log_spectrum()
    spec = LogSpectrum(spec.ylow, spec.yhigh, spec.counts, np.zeros_like(spec.counts), 10)
    out = propagate_uncertainty(spec, compute_spectra(spec, GEOM), sigma_yF=0.0)
    assert np.all(out.sigma_f == 0) and np.all(out.sigma_d == 0) and out.sigma_Q == 0


def test_empty_bins_carry_zero_sigma():
    spec = smooth_log_spectrum()
    c = spec.counts.copy()
    c[:5] = 0
    spec = LogSpectrum(spec.ylow, spec.yhigh, c, np.sqrt(c), 10)
    out = propagate_uncertainty(spec, compute_spectra(spec, GEOM))
    assert np.all(out.sigma_f[:5] == 0) and np.all(out.sigma_d[:5] == 0)


def test_sigma_f_formula():
    spec = smooth_log_spectrum(n=5, bpd=2)
    out = propagate_uncertainty(spec, compute_spectra(spec, GEOM))
    C, s = spec.counts, spec.sigma
    tot = C.sum()
    rel_tot = math.sqrt(float(np.sum(s ** 2))) / tot
    for i in range(5):
        assert out.sigma_f[i] == pytest.approx(out.f[i] * math.hypot(s[i] / C[i], rel_tot))


def test_sigma_q_matches_resampling():
    spec = smooth_log_spectrum()
    assert spec.counts.size == 50
    out = propagate_uncertainty(spec, compute_spectra(spec, GEOM))
    oracle = resampled_sigma_q(spec.ylow, spec.yhigh, spec.counts, spec.sigma, trials=10_000)
    assert out.sigma_Q == pytest.approx(oracle, rel=0.15)


# ---- analyze / emit


def test_analyze_uses_pre_lineal_energy():
    edges = np.linspace(1e-9, 1e-6, 101)
    counts = np.exp(-0.5 * ((0.5 * (edges[:-1] + edges[1:]) - 3e-7) / 1e-7) ** 2) * 1e3
    s = linear(edges, counts, np.sqrt(counts))
    logspec, ms = analyze(s, GEOM)
    mid = 0.5 * (edges[:-1] + edges[1:])
    assert ms.E_mean == pytest.approx(float(np.sum(mid * counts) / counts.sum()), rel=1e-12)
    assert logspec.counts.sum() == pytest.approx(counts.sum(), rel=1e-9)
    with pytest.raises(MicrodoseError):
        analyze(s, SiteGeometry(flag=1))


def test_flag_applies_gains():
    edges = np.linspace(1e-9, 1e-6, 11)
    s = linear(edges, np.ones(10))
    _, a = analyze(s, SiteGeometry(flag=0), GainTable([1e-9], [3.0]))
    logspec, b = analyze(s, SiteGeometry(flag=1), GainTable([1e-9], [3.0]))
    assert logspec.counts.sum() == pytest.approx(30.0)
    assert a.yF == pytest.approx(b.yF)  # a flat gain is a pure rescale


def test_emit_results(tmp_path):
    spec = smooth_log_spectrum()
    ms = propagate_uncertainty(spec, compute_spectra(spec, GEOM))
    paths = emit_results(ms, tmp_path)
    assert sorted(p.name for p in paths) == ["lineal_distributions.csv", "micro_summary.json", "ydy_spectrum.svg"]
    table = read_distributions(tmp_path / "lineal_distributions.csv")
    assert table["y_mid"].size == 50
    np.testing.assert_array_equal(table["f"], ms.f)
    np.testing.assert_array_equal(table["sigma_d"], ms.sigma_d)
    summary = json.loads((tmp_path / "micro_summary.json").read_text())
    for key in ("E_mean", "yF", "yD", "Q_avg", "sigma_Q"):
        assert key in summary
    assert summary["yD"] == ms.yD
