"""Trace synthesis and the side-channel evaluation suite.

Oracles: hand-built Welch statistics, re-derived hiding substream draws,
independent AES batch encryption, and closed-form DFT expectations.
"""

import numpy as np
import pytest

from pro_sim import sca
from pro_sim.aes import POPCOUNT, encrypt_batch, hd_last_round, key_expansion
from pro_sim.errors import InputError
from pro_sim.pro import active_inverters, nominal_delay, sel_from_id
from pro_sim.rng import substream
from pro_sim.scenario import scenario_from_dict


def quiet_sca(**sca_over):
    over = {"sca": {"noise_sigma": 0.0}}
    over["sca"].update(sca_over)
    return scenario_from_dict(over)


def arr_set(traces, sample_rate=1e6, dtype=np.float32):
    traces = np.asarray(traces, dtype=dtype)
    n = traces.shape[0]
    return sca.TraceSet(
        sample_rate=sample_rate,
        traces=traces,
        plaintexts=np.zeros((n, 16), dtype=np.uint8),
        ciphertexts=np.zeros((n, 16), dtype=np.uint8),
        class_labels=None,
        seed=0,
    )


# ---------------------------------------------------------------- welch_t ---


def test_welch_identical_sets_all_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 8))
    res = sca.welch_t(x, x)
    assert np.all(res.t_values == 0.0)
    assert res.max_abs_t == 0.0
    assert res.threshold == 4.5


def test_welch_matches_hand_computation():
    a = np.array([[1.0], [2.0], [3.0], [4.0]])
    b = np.array([[2.0], [2.5], [4.5]])
    res = sca.welch_t(a, b)
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    want = (ma - mb) / np.sqrt(va / 4 + vb / 3)
    assert res.t_values[0] == pytest.approx(want, rel=1e-12)
    assert res.max_abs_t == pytest.approx(abs(want), rel=1e-12)


def test_welch_zero_variance_sentinels():
    same = sca.welch_t(np.full((3, 2), 5.0), np.full((4, 2), 5.0))
    assert np.all(same.t_values == 0.0)
    diff = sca.welch_t(np.full((3, 1), 1.0), np.full((3, 1), 0.0))
    assert diff.t_values[0] == np.inf
    flipped = sca.welch_t(np.full((3, 1), 0.0), np.full((3, 1), 1.0))
    assert flipped.t_values[0] == -np.inf


def test_welch_sqrt_n_scaling():
    rng = np.random.default_rng(11)
    ts = []
    for n in (1000, 4000, 16000):
        a = rng.normal(2.0, 1.0, size=(n, 1))
        b = rng.normal(0.0, 1.0, size=(n, 1))
        ts.append(sca.welch_t(a, b).max_abs_t)
    assert ts[1] / ts[0] == pytest.approx(2.0, rel=0.1)
    assert ts[2] / ts[1] == pytest.approx(2.0, rel=0.1)


def test_welch_accepts_trace_sets():
    a = arr_set(np.ones((4, 3)))
    b = arr_set(np.zeros((4, 3)))
    res = sca.welch_t(a, b)
    assert res.t_values.shape == (3,)


def test_welch_rejects_empty_or_mismatched():
    with pytest.raises(InputError):
        sca.welch_t(np.zeros((0, 4)), np.zeros((3, 4)))
    with pytest.raises(InputError):
        sca.welch_t(np.zeros((3, 4)), np.zeros((3, 5)))


# ------------------------------------------------------------- cpa_attack ---


def leaky_set(n, key, leak_scale=0.002, noise=0.0, samples=30, window=(10, 20), seed=3):
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 256, size=(n, 16), dtype=np.uint8)
    cts, state9 = encrypt_batch(key, pts)
    hd = hd_last_round(state9, cts).astype(float)
    traces = np.zeros((n, samples))
    traces[:, window[0] : window[1]] = leak_scale * hd[:, None]
    if noise:
        traces += rng.normal(0.0, noise, size=traces.shape)
    return sca.TraceSet(
        sample_rate=1e8,
        traces=traces.astype(np.float32),
        plaintexts=pts,
        ciphertexts=cts,
        class_labels=None,
        seed=seed,
    )


def test_cpa_recovers_key_from_noiseless_leak():
    key = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
    ts = leaky_set(2000, key)
    res = sca.cpa_attack(ts, true_key=key)
    assert res.recovered_key == bytes(key_expansion(key)[10])
    assert res.rank_of_true_key == (0,) * 16


def test_cpa_correlations_shape_and_argmax_consistency():
    key = bytes(range(16))
    ts = leaky_set(500, key)
    res = sca.cpa_attack(ts)
    assert res.correlations.shape == (16, 256, 30)
    peaks = np.max(np.abs(res.correlations), axis=2)
    assert bytes(int(np.argmax(peaks[b])) for b in range(16)) == res.recovered_key
    assert res.rank_of_true_key is None


def test_cpa_affine_invariance():
    key = bytes(range(16))
    ts = leaky_set(300, key)
    scaled = sca.TraceSet(
        sample_rate=ts.sample_rate,
        traces=(2.5 * ts.traces + 7.0).astype(np.float32),
        plaintexts=ts.plaintexts,
        ciphertexts=ts.ciphertexts,
        class_labels=None,
        seed=ts.seed,
    )
    r1 = sca.cpa_attack(ts)
    r2 = sca.cpa_attack(scaled)
    assert r1.recovered_key == r2.recovered_key
    assert np.allclose(r1.correlations, r2.correlations, atol=1e-5)


def test_cpa_constant_samples_give_zero_correlation():
    key = bytes(range(16))
    ts = leaky_set(200, key)
    # columns outside the leak window are identically zero
    res = sca.cpa_attack(ts)
    assert np.all(res.correlations[:, :, :10] == 0.0)
    assert np.all(res.correlations[:, :, 20:] == 0.0)


def test_cpa_no_leakage_ranks_roughly_uniform():
    key = bytes.fromhex("000102030405060708090a0b0c0d0e0f")
    ranks = []
    for seed in range(40):
        rng = np.random.default_rng(1000 + seed)
        pts = rng.integers(0, 256, size=(80, 16), dtype=np.uint8)
        cts, _ = encrypt_batch(key, pts)
        ts = sca.TraceSet(
            sample_rate=1e8,
            traces=rng.normal(size=(80, 12)).astype(np.float32),
            plaintexts=pts,
            ciphertexts=cts,
            class_labels=None,
            seed=seed,
        )
        res = sca.cpa_attack(ts, true_key=key)
        ranks.extend(res.rank_of_true_key)
    med = float(np.median(ranks))
    assert 100 <= med <= 156


# --------------------------------------------------- spectrum and filters ---


def test_power_spectrum_pure_tone():
    s, fs = 64, 64.0
    k = np.arange(s)
    ts = arr_set(np.sin(2 * np.pi * 12 * k / s)[None, :], sample_rate=fs, dtype=np.float64)
    spectrum = sca.power_spectrum(ts, averaging=True)
    assert spectrum.bin_frequencies.shape == (s // 2 + 1,)
    assert np.array_equal(spectrum.bin_frequencies, np.fft.rfftfreq(s, 1 / fs))
    peak = int(np.argmax(spectrum.magnitudes))
    assert peak == 12
    others = np.delete(spectrum.magnitudes, peak)
    assert np.all(others <= 1e-9 * spectrum.magnitudes[peak])


def test_power_spectrum_shapes():
    rng = np.random.default_rng(5)
    ts = arr_set(rng.normal(size=(7, 32)))
    assert sca.power_spectrum(ts, averaging=True).magnitudes.shape == (17,)
    assert sca.power_spectrum(ts, averaging=False).magnitudes.shape == (7, 17)


def test_bandstop_empty_band_is_identity():
    rng = np.random.default_rng(9)
    s, fs = 128, 128.0
    k = np.arange(s)
    x = np.sin(2 * np.pi * 5 * k / s) + 0.3 * np.sin(2 * np.pi * 20 * k / s)
    ts = arr_set(np.tile(x, (3, 1)), sample_rate=fs)
    out = sca.bandstop_filter(ts, f_center=45.0, width=4.0)
    assert np.allclose(out.traces, ts.traces, atol=1e-9 * np.abs(x).max())
    assert any("bandstop" in note for note in out.notes)


def test_bandstop_removes_in_band_tone():
    s, fs = 128, 128.0
    k = np.arange(s)
    ts = arr_set(np.sin(2 * np.pi * 20 * k / s)[None, :], sample_rate=fs)
    out = sca.bandstop_filter(ts, f_center=20.0, width=3.0)
    rms_in = float(np.sqrt(np.mean(ts.traces.astype(float) ** 2)))
    rms_out = float(np.sqrt(np.mean(out.traces.astype(float) ** 2)))
    assert rms_out <= 1e-6 * rms_in


def test_bandstop_rejects_band_beyond_nyquist():
    ts = arr_set(np.zeros((1, 16)), sample_rate=100.0)
    with pytest.raises(InputError):
        sca.bandstop_filter(ts, f_center=49.0, width=4.0)


# ------------------------------------------------------ trace synthesis ----


def test_synthesize_deterministic_and_prefix_stable():
    sc = scenario_from_dict({})
    a = sca.synthesize_traces(sc, 6, "pro-random", seed=5)
    b = sca.synthesize_traces(sc, 6, "pro-random", seed=5)
    assert np.array_equal(a.traces, b.traces)
    assert np.array_equal(a.plaintexts, b.plaintexts)
    longer = sca.synthesize_traces(sc, 10, "pro-random", seed=5)
    assert np.array_equal(longer.traces[:6], a.traces)
    other_seed = sca.synthesize_traces(sc, 6, "pro-random", seed=6)
    assert not np.array_equal(other_seed.traces, a.traces)


def test_synthesize_fixed_class_traces_identical_when_noiseless():
    sc = quiet_sca()
    ts = sca.synthesize_traces(sc, 8, "pro-off", tvla_classes=True, seed=1)
    assert list(ts.class_labels) == [0, 1, 0, 1, 0, 1, 0, 1]
    fixed = ts.traces[0::2]
    assert all(np.array_equal(fixed[0], t) for t in fixed[1:])
    randoms = ts.plaintexts[1::2]
    assert len({bytes(p) for p in randoms}) == 4


def test_synthesize_ciphertexts_verify_against_aes():
    sc = scenario_from_dict({})
    ts = sca.synthesize_traces(sc, 5, "pro-off", seed=9)
    cts, _ = encrypt_batch(sc.aes.key, ts.plaintexts)
    assert np.array_equal(cts, ts.ciphertexts)


def test_synthesize_leak_values_exact_when_quiet():
    sc = quiet_sca()
    ts = sca.synthesize_traces(sc, 12, "pro-off", seed=2)
    _, state9 = encrypt_batch(sc.aes.key, ts.plaintexts)
    hd = hd_last_round(state9, ts.ciphertexts).astype(float)
    spr = sc.sca.samples_per_trace // 10
    first_last_round = 9 * spr
    # envelope is zero at the round boundary, leaving the leak term alone
    assert np.allclose(ts.traces[:, first_last_round], sc.aes.leak_scale * hd, atol=1e-6)
    mid = first_last_round + spr // 2
    want_mid = sc.aes.i_round_peak + sc.aes.leak_scale * hd
    assert np.allclose(ts.traces[:, mid], want_mid, atol=1e-5)


def test_synthesize_pro_fixed_additivity_oracle():
    sc = quiet_sca()
    base_set = sca.synthesize_traces(sc, 4, "pro-off", seed=7)
    with_pro = sca.synthesize_traces(sc, 4, "pro-fixed", seed=7)
    sel = sel_from_id(sc.sca.fixed_sel)
    f = 1.0 / (2.0 * nominal_delay(sc.design, sel))
    amp = (
        sc.design.switch_charge
        * f
        * active_inverters(sc.design, sel)
        * (sc.hiding.io_gain if sc.hiding.drive_io else 1.0)
    )
    dt = 1.0 / sc.sca.sample_rate
    k = np.arange(sc.sca.samples_per_trace)
    for i in range(4):
        theta = substream(7, "hiding", i).uniform(0.0, 2.0 * np.pi)
        want = amp * (1.0 + np.sin(theta + 2.0 * np.pi * f * k * dt))
        got = with_pro.traces[i].astype(float) - base_set.traces[i].astype(float)
        assert np.allclose(got, want, atol=1e-4)


def test_synthesize_pro_fixed_tone_lands_in_expected_bin():
    sc = quiet_sca()
    ts = sca.synthesize_traces(sc, 64, "pro-fixed", seed=3)
    spectrum = sca.power_spectrum(ts, averaging=True)
    bin_hz = sc.sca.sample_rate / sc.sca.samples_per_trace
    sel = sel_from_id(sc.sca.fixed_sel)
    f = 1.0 / (2.0 * nominal_delay(sc.design, sel))
    mags = spectrum.magnitudes.copy()
    clock_bin = int(round((1.0 / sc.aes.round_duration) / bin_hz))
    for b in (0, 1, clock_bin - 1, clock_bin, clock_bin + 1):
        mags[b] = 0.0
    assert abs(int(np.argmax(mags)) - round(f / bin_hz)) <= 1


def test_synthesize_pro_random_varies_between_traces_and_segments():
    sc = quiet_sca()
    ts = sca.synthesize_traces(sc, 6, "pro-random", seed=4)
    base, _ = encrypt_batch(sc.aes.key, ts.plaintexts)
    assert not np.array_equal(ts.traces[0], ts.traces[1])
    # per-round re-randomization: segment means differ within one trace
    spr = sc.sca.samples_per_trace // 10
    seg_means = ts.traces[0].reshape(10, spr).mean(axis=1)
    assert np.std(seg_means) > 0.01


def test_synthesize_nyquist_note_recorded():
    sc = quiet_sca(sample_rate=40e6, samples_per_trace=80)
    ts = sca.synthesize_traces(sc, 2, "pro-off", seed=1)
    assert any("nyquist" in note.lower() for note in ts.notes)
    fast = quiet_sca()
    ts2 = sca.synthesize_traces(fast, 2, "pro-off", seed=1)
    assert not any("nyquist" in note.lower() for note in ts2.notes)


def test_synthesize_rejects_bad_mode_and_count():
    sc = scenario_from_dict({})
    with pytest.raises(InputError):
        sca.synthesize_traces(sc, 0, "pro-off", seed=1)
    with pytest.raises(InputError):
        sca.synthesize_traces(sc, 4, "pro-sideways", seed=1)


def test_select_fixed_plaintext_matches_brute_force():
    key = scenario_from_dict({}).aes.key
    got = sca.select_fixed_plaintext(key)
    best, best_gap = None, -1
    for v in range(4096):
        pt = v.to_bytes(16, "big")
        arr = np.frombuffer(pt, dtype=np.uint8)[None, :]
        cts, st9 = encrypt_batch(key, arr)
        gap = abs(int(hd_last_round(st9, cts)[0]) - 64)
        if gap > best_gap:
            best, best_gap = pt, gap
    assert got == best
    assert best_gap >= 10  # far enough from the random-plaintext mean to matter


def test_split_by_class():
    sc = quiet_sca()
    ts = sca.synthesize_traces(sc, 10, "pro-off", tvla_classes=True, seed=8)
    fixed, rand = ts.split_by_class()
    assert fixed.n_traces == 5 and rand.n_traces == 5
    assert np.array_equal(fixed.traces, ts.traces[0::2])
    assert np.array_equal(rand.traces, ts.traces[1::2])
    plain = sca.synthesize_traces(sc, 4, "pro-off", seed=8)
    with pytest.raises(InputError):
        plain.split_by_class()


def test_subset_prefix():
    sc = quiet_sca()
    ts = sca.synthesize_traces(sc, 6, "pro-off", tvla_classes=True, seed=8)
    head = ts.subset(4)
    assert head.n_traces == 4
    assert np.array_equal(head.traces, ts.traces[:4])
    assert np.array_equal(head.class_labels, ts.class_labels[:4])
    with pytest.raises(InputError):
        ts.subset(0)
    with pytest.raises(InputError):
        ts.subset(7)
