import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from oracles import sinc_power
from vacrng.analysis import (
    BandMask,
    bin_occupancy_scan,
    byte_chi2_test,
    correlation,
    correlation_scan,
    default_gsm_mask,
    detect_spurs,
    fit_linearity,
    group_spurs,
    monobit_test,
    second_harmonic_ratio,
    write_csv,
)
from vacrng.errors import DataError
from vacrng.signal_sim import (
    NoiseModel,
    PiecewiseLinear,
    Spur,
    flat_electronic_psd,
    inject_gsm_burst,
    simulate_block,
)
from vacrng.spectral import PsdAccumulator, dft_frames, frames, psd_of_trace

FS = 20e9
N = 200_000


def test_correlation_examples():
    x = np.random.default_rng(0).normal(size=1000)
    assert correlation(x, x) == pytest.approx(1.0)
    assert correlation(x, -x) == pytest.approx(-1.0)


def test_correlation_independent_normals():
    rng = np.random.default_rng(1)
    n = 10**6
    for _ in range(5):
        assert abs(correlation(rng.normal(size=n), rng.normal(size=n))) < 5 / math.sqrt(n)


def test_correlation_errors():
    with pytest.raises(ValueError):
        correlation([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        correlation([1.0], [1.0])
    with pytest.raises(ValueError):
        correlation([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


vectors = hnp.arrays(np.float64, st.integers(3, 50), elements=st.floats(-1e3, 1e3))


@settings(max_examples=200, deadline=None)
@given(vectors, st.data())
def test_correlation_symmetric_and_affine_invariant(x, data):
    y = data.draw(hnp.arrays(np.float64, x.size, elements=st.floats(-1e3, 1e3)))
    if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
        return
    c = correlation(x, y)
    assert correlation(y, x) == c
    a = data.draw(st.floats(1e-2, 1e2))
    b = data.draw(st.floats(-1e3, 1e3))
    assert correlation(a * x + b, y) == pytest.approx(c, rel=1e-12, abs=1e-12)
    assert -1 - 1e-12 <= c <= 1 + 1e-12


# --- correlation scans -------------------------------------------------------

SCAN_FS = 2e9
SCAN_N = 20_000


def _scan(samples, n, window=10e6):
    fr = frames(samples, n)

    def chunks():
        for i in range(0, fr.shape[0], 64):
            yield dft_frames(fr[i:i + 64], SCAN_FS)[:, 1:-1]

    return correlation_scan(chunks(), SCAN_FS / n, window)


@pytest.fixture(scope="module")
def white_scan():
    model = NoiseModel(quantum_var_per_mw=50.0, electronic_psd=flat_electronic_psd(25.0, SCAN_FS))
    blk = simulate_block(model, 4.5, SCAN_N * 2000, SCAN_FS, seed=1)
    return _scan(blk.samples, SCAN_N)


@pytest.fixture(scope="module")
def step_trace():
    # gain drops by 60 dB above 0.2 GHz; one long trace so block edges cause leakage
    gain = PiecewiseLinear((0.0, 2.0e8, 2.1e8), (1.0, 1.0, 1e-3))
    model = NoiseModel(quantum_var_per_mw=50.0, detector_response=gain,
                       electronic_psd=flat_electronic_psd(0.01, SCAN_FS))
    return simulate_block(model, 20.0, SCAN_N * 2000, SCAN_FS, seed=2).samples


def test_white_input_correlations_small(white_scan):
    rep = white_scan
    assert rep.blocks == 2000
    assert rep.freqs[1] - rep.freqs[0] == pytest.approx(10e6)
    means = rep.band_mean(0, SCAN_FS / 2)
    assert all(abs(v) < 1e-3 for v in means.values())


def test_correlations_bounded(white_scan):
    for fam in (white_scan.re_im, white_scan.consecutive_blocks, white_scan.neighbor_bins):
        vals = fam[np.isfinite(fam)]
        assert np.all((vals >= -1) & (vals <= 1))


def test_out_of_band_neighbor_correlation_grows(step_trace):
    rep = _scan(step_trace, SCAN_N)
    inband = np.nanmean(np.abs(rep.neighbor_bins[rep.freqs < 1.9e8]))
    outband = np.nanmean(np.abs(rep.neighbor_bins[(rep.freqs > 2.2e8) & (rep.freqs < 4e8)]))
    assert outband > 5 * inband


def test_halving_resolution_lowers_correlations(step_trace):
    coarse = _scan(step_trace, SCAN_N)
    fine = _scan(step_trace, 2 * SCAN_N)
    for fam in ("re_im", "consecutive_blocks", "neighbor_bins"):
        c = abs(coarse.band_mean(2.6e8, 6e8)[fam])
        f = abs(fine.band_mean(2.6e8, 6e8)[fam])
        assert f / c < 0.8, fam


def test_scan_needs_enough_blocks():
    amps = np.random.default_rng(0).normal(size=(10, 50)) + 0j
    with pytest.raises(DataError):
        correlation_scan([amps], 1.0, 5.0)
    rep = correlation_scan([amps], 1.0, 5.0, min_blocks=10)
    assert rep.freqs.size == 10


# --- linearity ---------------------------------------------------------------

def test_fit_exact_line():
    slope, offset, r2 = fit_linearity([(0, 3), (1, 5), (2, 7), (4, 11)])
    assert slope == pytest.approx(2) and offset == pytest.approx(3) and r2 == pytest.approx(1)


def test_fit_degenerate():
    with pytest.raises(ValueError):
        fit_linearity([(1, 2), (2, 3)])
    with pytest.raises(ValueError):
        fit_linearity([(1, 2), (1, 3), (2, 4)])


def _sweep(model, powers, samples=2**22):
    pts = []
    for i, p in enumerate(powers):
        blk = simulate_block(model, p, samples, FS, seed=40 + i)
        pts.append((p, float(psd_of_trace(blk.samples, FS, 4096).power[1:-1].mean())))
    return pts


SWEEP_MW = np.linspace(1, 6, 5)
FLAT_MODEL = dict(quantum_var_per_mw=50.0, electronic_psd=flat_electronic_psd(25.0, FS))


def test_simulated_sweep_offset_is_electronic_level():
    slope, offset, r2 = fit_linearity(_sweep(NoiseModel(**FLAT_MODEL), SWEEP_MW))
    assert offset == pytest.approx(25.0, rel=0.05)
    assert slope == pytest.approx(50.0, rel=0.02)
    assert r2 > 0.999


def _quadratic_coeff(share, power_mw=6.0):
    # detector c s^2 adds 2 c^2 var^2 of variance; solve for `share` of the quantum variance
    var = 50.0 * power_mw
    return math.sqrt(share / (2 * var))


def _noiseless_r2(share, powers=SWEEP_MW):
    q = share * 50.0 / powers[-1]
    y = 25.0 + 50.0 * powers + q * powers**2
    resid = y - np.polyval(np.polyfit(powers, y, 1), powers)
    return 1 - resid.var() / y.var()


def test_quadratic_sweep_matches_noiseless_curvature():
    model = NoiseModel(**FLAT_MODEL, quadratic_coeff=_quadratic_coeff(0.1))
    r2 = fit_linearity(_sweep(model, SWEEP_MW))[2]
    assert 1 - r2 == pytest.approx(1 - _noiseless_r2(0.1), rel=0.3)


@pytest.mark.xfail(strict=True, reason="a 10% quadratic share leaves R^2 near 0.9995 even "
                                        "without noise; the 0.999 line needs about 15.1%")
def test_quadratic_detector_breaks_linearity():
    model = NoiseModel(**FLAT_MODEL, quadratic_coeff=_quadratic_coeff(0.1))
    assert fit_linearity(_sweep(model, SWEEP_MW))[2] < 0.999


def test_stronger_quadratic_detector_breaks_linearity():
    assert _noiseless_r2(0.16) < 0.999 < _noiseless_r2(0.1)
    model = NoiseModel(**FLAT_MODEL, quadratic_coeff=_quadratic_coeff(0.2))
    assert fit_linearity(_sweep(model, SWEEP_MW))[2] < 0.999


# --- spurs and masks ---------------------------------------------------------

def _psd(power, blocks=100, delta_f=1e5):
    return PsdAccumulator().add_power(np.asarray(power)[None, :], delta_f).result().__class__(
        np.asarray(power, dtype=float), blocks, delta_f)


def test_flat_psd_has_no_spurs():
    assert detect_spurs(_psd(np.full(1001, 7.0)), 3.0) == []


def test_spur_preconditions():
    with pytest.raises(DataError):
        detect_spurs(_psd(np.ones(1001), blocks=99), 3.0)
    with pytest.raises(DataError):
        detect_spurs(_psd(np.ones(150)), 3.0)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, 401, elements=st.floats(1.0, 1.9)), st.floats(3.0, 20.0))
def test_no_spurs_below_threshold_ratio(power, threshold):
    # max/median < 2 < 10^(3/10) keeps every bin below a 3 dB threshold
    assert detect_spurs(_psd(power), threshold) == []


def test_detect_sorted_by_excess():
    p = np.ones(1001)
    p[300], p[700] = 100.0, 1000.0
    found = detect_spurs(_psd(p), 10.0)
    assert [s["freq_hz"] for s in found] == [700 * 1e5, 300 * 1e5]
    assert found[0]["excess_db"] == pytest.approx(30.0)


@pytest.fixture(scope="module")
def burst_psd():
    model = NoiseModel(quantum_var_per_mw=50.0, electronic_psd=flat_electronic_psd(25.0, FS))
    # amplitude for |a_k|^2 = N A^2 / 4 = 1e4 x the 250 code^2 floor
    amp = math.sqrt(1e4 * 250 * 4 / N)
    acc = PsdAccumulator()
    for i in range(100):
        blk = simulate_block(model, 4.5, N, FS, seed=500 + i)
        blk = inject_gsm_burst(blk, 900e6, amp, (0, N))
        acc.add_power(np.abs(dft_frames(blk.samples[None, :], FS)) ** 2, FS / N)
    return acc.result()


def test_gsm_burst_detected_inside_mask(burst_psd):
    found = detect_spurs(burst_psd, 20.0)
    top = found[0]
    assert abs(top["freq_hz"] - 900e6) <= burst_psd.delta_f
    assert top["excess_db"] >= 35
    assert top["freq_hz"] in default_gsm_mask()


def _expected_flagged_width(peak_over_floor, threshold_db, window=201, half=400):
    # noiseless floor plus the sinc^2 skirt of a tone midway between two bins
    k = np.arange(-half, half + 1)
    skirt = np.array([sinc_power(d + 0.5) for d in k]) / sinc_power(0.5)
    model = 1.0 + peak_over_floor * skirt
    pad = np.pad(model, window // 2, mode="edge")
    med = np.median(np.lib.stride_tricks.sliding_window_view(pad, window), axis=1)
    return int(np.count_nonzero(10 * np.log10(model / med) > threshold_db))


def test_leak_broadened_spur_width():
    model = NoiseModel(quantum_var_per_mw=50.0, electronic_psd=flat_electronic_psd(25.0, FS),
                       spurs=(Spur(900.05e6, math.sqrt(1e4 * 250 * 4 / (N * sinc_power(0.5)))),))
    blk = simulate_block(model, 4.5, N * 100, FS, seed=3)
    psd = psd_of_trace(blk.samples, FS, N)
    regions = group_spurs(detect_spurs(psd, 3.0), psd.delta_f)
    assert abs(regions[0]["peak_freq_hz"] - 900.05e6) <= psd.delta_f
    # bin noise of 1/sqrt(100) jitters each edge by about 1.5 bins and can split off edge bins
    near = [r for r in regions if abs(r["peak_freq_hz"] - 900.05e6) < 5e6]
    span = max(r["f_hi_hz"] for r in near) - min(r["f_lo_hz"] for r in near) + psd.delta_f
    expected = _expected_flagged_width(1e4, 3.0) * psd.delta_f
    assert span == pytest.approx(expected, abs=6 * psd.delta_f)
    assert 3e6 <= span <= 8e6


def test_default_gsm_mask():
    mask = default_gsm_mask()
    assert mask.width == pytest.approx(49e6)
    assert 900e6 in mask
    assert 870.9e6 not in mask
    assert mask.to_list() == [[871e6, 920e6]]


def test_band_mask_merges_and_validates():
    m = BandMask(((5.0, 8.0), (1.0, 3.0), (2.0, 4.0), (8.0, 9.0)))
    assert m.intervals == ((1.0, 4.0), (5.0, 9.0))
    assert m.contains(np.array([0.5, 1.0, 3.99, 4.0, 8.5])).tolist() == [False, True, True, False,
                                                                        True]
    with pytest.raises(ValueError):
        BandMask(((3.0, 1.0),))
    with pytest.raises(ValueError):
        m.check_range(8.0)


intervals = st.lists(st.tuples(st.floats(0, 1e9), st.floats(1, 1e8)).map(
    lambda t: (t[0], t[0] + t[1])), max_size=8)


@settings(max_examples=200, deadline=None)
@given(intervals)
def test_band_mask_normalization_idempotent(iv):
    m = BandMask(tuple(iv))
    assert m.normalized() == m
    assert BandMask(m.intervals).intervals == m.intervals
    for (a, b), (c, d) in zip(m.intervals, m.intervals[1:]):
        assert b < c


# --- harmonics ---------------------------------------------------------------

def _tone_psd(quadratic):
    model = NoiseModel(quantum_var_per_mw=50.0, electronic_psd=flat_electronic_psd(25.0, FS),
                       spurs=(Spur(0.2e9, 50.0),), quadratic_coeff=quadratic)
    blk = simulate_block(model, 0.0, N * 10, FS, seed=1)
    return psd_of_trace(blk.samples, FS, N)


def test_pure_tone_has_no_harmonic():
    assert second_harmonic_ratio(_tone_psd(0.0), 0.2e9) >= 60


def test_quadratic_detector_harmonic_at_18_db():
    # c A^2 / 2 at 2 f0 against A at f0 gives 20 log10(2 / (c A))
    c = 2 / (50.0 * 10 ** (18 / 20))
    psd = _tone_psd(c)
    assert psd.bin_of(0.4e9) == 4000
    assert second_harmonic_ratio(psd, 0.2e9) == pytest.approx(18, abs=1)


def test_harmonic_range_errors():
    psd = _psd(np.ones(1001))
    with pytest.raises(ValueError):
        second_harmonic_ratio(psd, 60e6)
    with pytest.raises(ValueError):
        second_harmonic_ratio(psd, 0.0)


# --- occupancy and output tests ---------------------------------------------

def test_occupancy_uniform_words():
    rng = np.random.default_rng(5)
    for n in (4, 8, 12):
        assert bin_occupancy_scan(rng.integers(0, 2**n, 64 * 2**n), n) < 1.8


def test_occupancy_constant_and_errors():
    assert bin_occupancy_scan(np.zeros(16 * 2**6, dtype=int), 6) == 2**6
    with pytest.raises(DataError):
        bin_occupancy_scan(np.zeros(100, dtype=int), 6)
    with pytest.raises(ValueError):
        bin_occupancy_scan(np.full(16 * 4, 4), 2)


def test_occupancy_of_pipeline_words():
    from vacrng.entropy import ChannelCalibration, build_entropy_report
    from vacrng.extract import block_words
    fs, n_block = 2e9, 20_000
    model = NoiseModel(quantum_var_per_mw=50.0, electronic_psd=flat_electronic_psd(25.0, fs))
    dark = simulate_block(model, 0.0, n_block * 100, fs, seed=1)
    total = simulate_block(model, 4.5, n_block * 130, fs, seed=2)
    cal = ChannelCalibration.from_psds(psd_of_trace(dark.samples, fs, n_block),
                                       psd_of_trace(total.samples[:n_block * 100], fs, n_block),
                                       0.9e9)
    _, binnings = build_entropy_report(cal, 16)
    keep = [i for i, f in enumerate(cal.freqs) if f not in default_gsm_mask()]
    bins = cal.bin_indices()[keep]
    widths = np.array([binnings[i].b for i in keep])
    words = np.concatenate([block_words(f, bins, widths, 16)
                            for f in frames(total.samples, n_block)])
    assert words.size >= 2**21
    assert bin_occupancy_scan(words, 16) <= 2.5


def test_monobit_and_chi2():
    bits = np.random.default_rng(0).integers(0, 2, 2**20)
    assert monobit_test(bits) > 1e-6 and byte_chi2_test(bits) > 1e-6
    assert monobit_test(np.ones(10_000)) < 1e-6
    assert byte_chi2_test(np.tile([0, 1, 0, 1, 1, 0, 1, 1], 5000)) < 1e-6
    with pytest.raises(ValueError):
        byte_chi2_test(np.ones(100))


def test_write_csv(tmp_path):
    path = write_csv(tmp_path / "x.csv", {"freq_hz": [1.0, 2.0], "value": [0.5, 0.25]})
    assert path.read_text().splitlines() == ["freq_hz,value", "1,0.5", "2,0.25"]
