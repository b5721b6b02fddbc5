"""Power-trace synthesis and the side-channel evaluation toolbox.

Traces model the sensed supply current of an AES-128 accelerator: a
half-sine consumption envelope per round, a small data-dependent leak
during the final round, an optional hiding oscillator riding on top, and
white measurement noise.  The same seeded substreams used elsewhere in
the package drive every random choice, keyed by absolute trace index, so
a trace's content never depends on batch size or synthesis order.

Evaluation side: Welch's t-test for leakage assessment, last-round
Hamming-distance CPA, magnitude spectra, and a brick-wall band-stop
filter for tone removal experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .aes import INV_SBOX, POPCOUNT, SHIFT_ROWS_SRC, encrypt_batch, hd_last_round, key_expansion
from .errors import InputError
from .pro import (
    CoverageReport,
    SelConfig,
    active_inverters,
    all_delay,
    all_shorting,
    check_frequency_coverage,
    nominal_delay,
    sel_from_id,
)
from .rng import substream
from .scenario import Scenario

MODES = ("pro-off", "pro-fixed", "pro-random")

LABEL_FIXED = 0
LABEL_RANDOM = 1


@dataclass(frozen=True)
class TraceSet:
    """A batch of power traces plus the data needed to attack them."""

    sample_rate: float
    traces: np.ndarray          # float32, (n_traces, samples_per_trace)
    plaintexts: np.ndarray      # uint8, (n_traces, 16)
    ciphertexts: np.ndarray     # uint8, (n_traces, 16)
    class_labels: np.ndarray | None = None   # uint8, 0 fixed / 1 random
    seed: int | None = None
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.traces.ndim != 2:
            raise InputError("traces must be a 2-D array")
        n = self.traces.shape[0]
        for name, arr in (("plaintexts", self.plaintexts), ("ciphertexts", self.ciphertexts)):
            if arr.shape != (n, 16):
                raise InputError(f"{name} must have shape ({n}, 16)")
        if self.class_labels is not None and self.class_labels.shape != (n,):
            raise InputError(f"class_labels must have shape ({n},)")
        if self.sample_rate <= 0:
            raise InputError("sample_rate must be positive")

    @property
    def n_traces(self) -> int:
        return self.traces.shape[0]

    @property
    def samples_per_trace(self) -> int:
        return self.traces.shape[1]

    def subset(self, n: int) -> "TraceSet":
        """First n traces, sharing the underlying arrays."""
        if not 1 <= n <= self.n_traces:
            raise InputError(f"subset size must be in [1, {self.n_traces}], got {n}")
        labels = None if self.class_labels is None else self.class_labels[:n]
        return replace(
            self,
            traces=self.traces[:n],
            plaintexts=self.plaintexts[:n],
            ciphertexts=self.ciphertexts[:n],
            class_labels=labels,
        )

    def split_by_class(self) -> tuple["TraceSet", "TraceSet"]:
        """(fixed-class set, random-class set); requires class labels."""
        if self.class_labels is None:
            raise InputError("trace set carries no class labels to split on")
        out = []
        for label in (LABEL_FIXED, LABEL_RANDOM):
            idx = np.flatnonzero(self.class_labels == label)
            out.append(
                replace(
                    self,
                    traces=self.traces[idx],
                    plaintexts=self.plaintexts[idx],
                    ciphertexts=self.ciphertexts[idx],
                    class_labels=self.class_labels[idx],
                )
            )
        return out[0], out[1]


# ------------------------------------------------------------ synthesis ----

_FIXED_PT_CACHE: dict[bytes, bytes] = {}


def select_fixed_plaintext(key: bytes) -> bytes:
    """Pick the fixed-class plaintext for leakage assessment.

    Scans the 4096 plaintexts whose big-endian integer value is below
    2**12 and keeps the one whose last-round Hamming distance sits
    farthest from the random-plaintext mean of 64, so the two classes
    separate as strongly as the leak allows.  Ties break toward the
    numerically smallest candidate.
    """
    key = bytes(key)
    cached = _FIXED_PT_CACHE.get(key)
    if cached is not None:
        return cached
    pts = np.zeros((4096, 16), dtype=np.uint8)
    values = np.arange(4096)
    pts[:, 14] = values >> 8
    pts[:, 15] = values & 0xFF
    cts, state9 = encrypt_batch(key, pts)
    gap = np.abs(hd_last_round(state9, cts).astype(np.int64) - 64)
    best = pts[int(np.argmax(gap))].tobytes()
    _FIXED_PT_CACHE[key] = best
    return best


def _segment_indices(n_samples: int, dt: float, interval: float) -> np.ndarray:
    """Map each sample to its re-selection segment.

    Uses exact integer division when the interval spans a whole number
    of samples; otherwise falls back to floats with a guard against
    boundary samples landing one segment early.
    """
    per_seg = interval / dt
    rounded = round(per_seg)
    if rounded >= 1 and abs(per_seg - rounded) < 1e-6:
        return np.arange(n_samples) // rounded
    t = np.arange(n_samples) * dt
    return np.floor(t / interval * (1.0 + 1e-12)).astype(np.int64)


def synthesize_traces(
    scenario: Scenario,
    n_traces: int,
    mode: str,
    tvla_classes: bool = False,
    seed: int | None = None,
) -> TraceSet:
    """Generate power traces for one hiding mode.

    mode "pro-off" leaves the oscillator out entirely, "pro-fixed" runs
    it at the scenario's fixed configuration, and "pro-random" re-draws
    the configuration every hiding interval.  With tvla_classes, traces
    alternate fixed-plaintext (even indices, label 0) and random-
    plaintext (odd indices, label 1).
    """
    if mode not in MODES:
        raise InputError(f"unknown hiding mode {mode!r}; expected one of {MODES}")
    if n_traces < 1:
        raise InputError("n_traces must be at least 1")
    if seed is None:
        seed = scenario.master_seed

    s = scenario.sca
    aes = scenario.aes
    design = scenario.design
    n_samples = s.samples_per_trace
    dt = 1.0 / s.sample_rate
    t = np.arange(n_samples) * dt

    # victim activity: half-sine rounds, leak during the last one
    round_idx = np.floor(t / aes.round_duration + 1e-9).astype(np.int64)
    in_span = round_idx < aes.N_ROUNDS
    envelope = aes.i_round_peak * np.sin(np.pi * t / aes.round_duration) ** 2
    envelope = np.where(in_span, envelope, 0.0)
    leak_window = in_span & (round_idx == aes.N_ROUNDS - 1)

    fixed_pt = s.fixed_plaintext or select_fixed_plaintext(aes.key)
    fixed_arr = np.frombuffer(fixed_pt, dtype=np.uint8)
    plaintexts = np.empty((n_traces, 16), dtype=np.uint8)
    labels = None
    if tvla_classes:
        labels = (np.arange(n_traces) % 2).astype(np.uint8)
    for i in range(n_traces):
        if tvla_classes and i % 2 == 0:
            plaintexts[i] = fixed_arr
        else:
            plaintexts[i] = substream(seed, "plaintexts", i).integers(
                0, 256, size=16, dtype=np.uint8
            )
    ciphertexts, state9 = encrypt_batch(aes.key, plaintexts)
    hd = hd_last_round(state9, ciphertexts).astype(np.float64)

    gain = scenario.hiding.io_gain if scenario.hiding.drive_io else 1.0
    n_cells = len(design.cells)
    if mode == "pro-fixed":
        sel = sel_from_id(s.fixed_sel)
        f_fixed = 1.0 / (2.0 * nominal_delay(design, sel))
        amp_fixed = design.switch_charge * f_fixed * active_inverters(design, sel) * gain
    elif mode == "pro-random":
        interval = scenario.hiding.interval
        seg_of = _segment_indices(n_samples, dt, interval)
        n_seg = int(seg_of[-1]) + 1
        seg_start = np.arange(n_seg) * interval
        t_in_seg = t - seg_start[seg_of]
        # frequency and amplitude for each of the 2**n_cells configurations
        f_table = np.empty(1 << n_cells)
        amp_table = np.empty(1 << n_cells)
        for v in range(1 << n_cells):
            bits = tuple(bool(v >> i & 1) for i in range(n_cells))
            sel_v = SelConfig(bits, enabled=True)
            f_table[v] = 1.0 / (2.0 * nominal_delay(design, sel_v))
            amp_table[v] = design.switch_charge * f_table[v] * active_inverters(design, sel_v) * gain

    traces = np.empty((n_traces, n_samples), dtype=np.float64)
    for i in range(n_traces):
        total = envelope + np.where(leak_window, aes.leak_scale * hd[i], 0.0)
        if mode == "pro-fixed":
            theta0 = substream(seed, "hiding", i).uniform(0.0, 2.0 * np.pi)
            total = total + amp_fixed * (1.0 + np.sin(theta0 + 2.0 * np.pi * f_fixed * t))
        elif mode == "pro-random":
            rng_h = substream(seed, "hiding", i)
            theta0 = rng_h.uniform(0.0, 2.0 * np.pi)
            draws = rng_h.integers(0, 1 << n_cells, size=n_seg)
            f_seg = f_table[draws]
            # phase carries across re-selection so the tone never jumps
            phases = theta0 + np.concatenate(
                ([0.0], np.cumsum(2.0 * np.pi * f_seg[:-1] * interval))
            )
            total = total + amp_table[draws][seg_of] * (
                1.0 + np.sin(phases[seg_of] + 2.0 * np.pi * f_seg[seg_of] * t_in_seg)
            )
        total = s.shunt_gain * total
        if s.noise_sigma > 0:
            total = total + substream(seed, "measurement-noise", i).normal(
                0.0, s.noise_sigma, size=n_samples
            )
        traces[i] = total

    notes = []
    f_top = 1.0 / (2.0 * nominal_delay(design, all_shorting(design)))
    if s.sample_rate < 2.0 * f_top:
        notes.append(
            f"sample rate {s.sample_rate:.6g} Hz is below the Nyquist rate "
            f"{2.0 * f_top:.6g} Hz for the fastest oscillator configuration; "
            "tones will alias"
        )
    return TraceSet(
        sample_rate=s.sample_rate,
        traces=traces.astype(np.float32),
        plaintexts=plaintexts,
        ciphertexts=ciphertexts,
        class_labels=labels,
        seed=seed,
        notes=tuple(notes),
    )


# -------------------------------------------------------------- welch_t ----


@dataclass(frozen=True)
class TvlaResult:
    t_values: np.ndarray
    max_abs_t: float
    threshold: float

    @property
    def leaking(self) -> bool:
        return self.max_abs_t > self.threshold


def _as_samples(x) -> np.ndarray:
    if isinstance(x, TraceSet):
        x = x.traces
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError("expected a 2-D array of traces")
    return arr


def welch_t(group_a, group_b, threshold: float = 4.5) -> TvlaResult:
    """Per-sample Welch's t statistic between two trace populations.

    Samples where both groups have zero variance report t = 0 when the
    means agree and signed infinity when they differ, so a constant
    column never hides a genuine systematic difference.
    """
    a = _as_samples(group_a)
    b = _as_samples(group_b)
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise InputError("both groups need at least one trace")
    if a.shape[1] != b.shape[1]:
        raise InputError("trace groups differ in samples per trace")
    na, nb = a.shape[0], b.shape[0]
    mean_gap = a.mean(axis=0) - b.mean(axis=0)
    va = a.var(axis=0, ddof=1) if na > 1 else np.zeros(a.shape[1])
    vb = b.var(axis=0, ddof=1) if nb > 1 else np.zeros(b.shape[1])
    denom = np.sqrt(va / na + vb / nb)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = mean_gap / denom
    degenerate = denom == 0.0
    t[degenerate & (mean_gap == 0.0)] = 0.0
    t[degenerate & (mean_gap > 0.0)] = np.inf
    t[degenerate & (mean_gap < 0.0)] = -np.inf
    return TvlaResult(t_values=t, max_abs_t=float(np.max(np.abs(t))), threshold=threshold)


# ----------------------------------------------------------------- CPA -----


@dataclass(frozen=True)
class CpaResult:
    correlations: np.ndarray          # float32, (16, 256, samples)
    recovered_key: bytes              # best-guess final round key
    rank_of_true_key: tuple[int, ...] | None = None


def cpa_attack(trace_set: TraceSet, true_key: bytes | None = None) -> CpaResult:
    """Correlation attack on the final round key.

    The power model is the Hamming distance between each ciphertext byte
    and the pre-ShiftRows state byte it overwrote in the last round, as
    predicted per key-byte guess from the ciphertext alone.  When
    true_key (the full cipher key) is given, each byte's guess list is
    ranked by peak absolute correlation and the derived final round key
    byte's position in that ordering is reported, 0 meaning best.
    """
    ct = trace_set.ciphertexts
    x = trace_set.traces.astype(np.float64)
    n, n_samples = x.shape
    if n < 3:
        raise InputError("CPA needs at least 3 traces")
    xc = x - x.mean(axis=0)
    x_norm = np.sqrt(np.sum(xc * xc, axis=0))
    guesses = np.arange(256, dtype=np.uint8)

    correlations = np.empty((16, 256, n_samples), dtype=np.float32)
    recovered = bytearray(16)
    ranks = []
    true_last = key_expansion(true_key)[10] if true_key is not None else None
    for byte in range(16):
        prior = ct[:, SHIFT_ROWS_SRC[byte]][:, None]
        hyp = POPCOUNT[INV_SBOX[ct[:, byte][:, None] ^ guesses[None, :]] ^ prior]
        hyp = hyp.astype(np.float64)
        hc = hyp - hyp.mean(axis=0)
        h_norm = np.sqrt(np.sum(hc * hc, axis=0))
        num = hc.T @ xc
        denom = h_norm[:, None] * x_norm[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = np.where(denom > 0.0, num / np.where(denom == 0.0, 1.0, denom), 0.0)
        correlations[byte] = rho.astype(np.float32)
        peaks = np.max(np.abs(rho), axis=1)
        recovered[byte] = int(np.argmax(peaks))
        if true_last is not None:
            ranks.append(int(np.sum(peaks > peaks[true_last[byte]])))
    return CpaResult(
        correlations=correlations,
        recovered_key=bytes(recovered),
        rank_of_true_key=tuple(ranks) if ranks else None,
    )


@dataclass(frozen=True)
class N0Search:
    """Outcome of a minimum-traces-to-disclosure ladder search."""

    n0: int | None
    attempts: tuple[tuple[int, int], ...]   # (traces used, key bytes correct)
    mode: str
    seed: int


def find_n0(
    scenario: Scenario,
    mode: str = "pro-off",
    seed: int | None = None,
    ladder: tuple[int, ...] | None = None,
) -> N0Search:
    """Smallest ladder rung at which CPA recovers the full final round key.

    Synthesizes the largest rung once and attacks prefixes, which keeps
    every rung's traces identical to what a standalone synthesis of that
    size would produce.
    """
    if seed is None:
        seed = scenario.master_seed
    rungs = tuple(ladder) if ladder is not None else scenario.sca.n0_ladder
    if not rungs:
        raise InputError("n0 ladder must not be empty")
    target = bytes(key_expansion(scenario.aes.key)[10])
    full = synthesize_traces(scenario, max(rungs), mode, seed=seed)
    attempts = []
    n0 = None
    for n in rungs:
        res = cpa_attack(full.subset(n))
        correct = sum(a == b for a, b in zip(res.recovered_key, target))
        attempts.append((n, correct))
        if correct == 16:
            n0 = n
            break
    return N0Search(n0=n0, attempts=tuple(attempts), mode=mode, seed=seed)


# ------------------------------------------------------------- spectrum ----


@dataclass(frozen=True)
class Spectrum:
    bin_frequencies: np.ndarray
    magnitudes: np.ndarray    # (bins,) when averaged, else (n_traces, bins)


def power_spectrum(trace_set: TraceSet, averaging: bool = True) -> Spectrum:
    """One-sided magnitude spectrum of the traces, DC removed per trace.

    With averaging, per-trace magnitude spectra are averaged so tones
    with trace-to-trace random phase still accumulate instead of
    cancelling as they would in a mean-trace spectrum.
    """
    x = trace_set.traces.astype(np.float64)
    x = x - x.mean(axis=1, keepdims=True)
    mags = np.abs(np.fft.rfft(x, axis=1))
    freqs = np.fft.rfftfreq(trace_set.samples_per_trace, 1.0 / trace_set.sample_rate)
    if averaging:
        mags = mags.mean(axis=0)
    return Spectrum(bin_frequencies=freqs, magnitudes=mags)


def bandstop_filter(trace_set: TraceSet, f_center: float, width: float) -> TraceSet:
    """Zero every spectral bin within width/2 of f_center and rebuild.

    The whole stop band must sit below the Nyquist frequency; a band
    that touches it would fold back instead of disappearing.
    """
    if f_center <= 0 or width <= 0:
        raise InputError("band-stop centre and width must be positive")
    nyquist = trace_set.sample_rate / 2.0
    if f_center + width / 2.0 >= nyquist:
        raise InputError(
            f"stop band reaches {f_center + width / 2.0:.6g} Hz, "
            f"at or beyond the Nyquist frequency {nyquist:.6g} Hz"
        )
    x = trace_set.traces.astype(np.float64)
    spectrum = np.fft.rfft(x, axis=1)
    freqs = np.fft.rfftfreq(trace_set.samples_per_trace, 1.0 / trace_set.sample_rate)
    spectrum[:, np.abs(freqs - f_center) <= width / 2.0] = 0.0
    filtered = np.fft.irfft(spectrum, n=trace_set.samples_per_trace, axis=1)
    note = f"bandstop {f_center:.6g} Hz +/- {width / 2.0:.6g} Hz applied"
    return replace(trace_set, traces=filtered.astype(np.float32), notes=trace_set.notes + (note,))


# --------------------------------------------------- hiding orchestration --


@dataclass(frozen=True)
class ModeEvaluation:
    """One hiding mode's full evaluation at one seed."""

    mode: str
    seed: int
    n_traces: int
    tvla_max_abs_t: float
    tvla_leaking: bool
    cpa_bytes_correct: int
    n0: int | None                       # minimum-disclosure rung; pro-off only
    peak_frequency_hz: float             # dominant non-clock spectral peak
    peak_band_fraction: float            # its energy share of the oscillator band
    filtered_cpa_bytes_correct: int | None   # CPA after band-stop at the peak


@dataclass(frozen=True)
class HidingReport:
    budget: int
    seeds: tuple[int, ...]
    tvla_threshold: float
    coverage: CoverageReport             # for the scenario's clock under test
    entries: tuple[ModeEvaluation, ...]


def _dominant_nonclock_bin(spectrum: Spectrum, clock_hz: float) -> int:
    bin_hz = float(spectrum.bin_frequencies[1] - spectrum.bin_frequencies[0])
    mags = np.asarray(spectrum.magnitudes, dtype=float).copy()
    clock_bin = round(clock_hz / bin_hz)
    for b in (0, 1, clock_bin - 1, clock_bin, clock_bin + 1):
        if 0 <= b < mags.size:
            mags[b] = 0.0
    return int(np.argmax(mags))


def evaluate_hiding(
    scenario: Scenario, budget: int, seeds: tuple[int, ...] | None = None
) -> HidingReport:
    """Run the full countermeasure comparison across all hiding modes.

    For every (mode, seed) pair: synthesize a fixed-vs-random set of
    budget traces for the t-test, a random-plaintext set of the same
    size for CPA and spectra, search the disclosure ladder in pro-off
    mode, and re-attack after a band-stop at the strongest non-clock
    spectral line.  Entries are grouped by mode, seeds in given order.
    """
    if budget < 2:
        raise InputError("trace budget must cover both plaintext classes (>= 2 traces)")
    if seeds is None:
        seeds = (scenario.master_seed,)
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise InputError("at least one seed is required")

    design = scenario.design
    target = bytes(key_expansion(scenario.aes.key)[10])
    clock_hz = 1.0 / scenario.aes.round_duration
    band_lo = 1.0 / (2.0 * nominal_delay(design, all_delay(design)))
    band_hi = 1.0 / (2.0 * nominal_delay(design, all_shorting(design)))
    ladder = tuple(n for n in scenario.sca.n0_ladder if n <= budget) or (budget,)

    entries = []
    for mode in MODES:
        for seed in seeds:
            tvla_set = synthesize_traces(scenario, budget, mode, tvla_classes=True, seed=seed)
            tvla = welch_t(*tvla_set.split_by_class(), threshold=scenario.sca.tvla_threshold)

            attack_set = synthesize_traces(scenario, budget, mode, seed=seed)
            cpa = cpa_attack(attack_set)
            correct = sum(a == b for a, b in zip(cpa.recovered_key, target))

            n0 = None
            if mode == "pro-off":
                n0 = find_n0(scenario, mode, seed=seed, ladder=ladder).n0

            spectrum = power_spectrum(attack_set, averaging=True)
            peak_bin = _dominant_nonclock_bin(spectrum, clock_hz)
            peak_hz = float(spectrum.bin_frequencies[peak_bin])
            energy = np.asarray(spectrum.magnitudes, dtype=float) ** 2
            in_band = (spectrum.bin_frequencies >= band_lo) & (
                spectrum.bin_frequencies <= band_hi
            )
            band_energy = float(energy[in_band].sum())
            peak_fraction = float(energy[peak_bin] / band_energy) if band_energy > 0 else 0.0

            filtered_correct = None
            if mode != "pro-off":
                half_width = scenario.sca.bandstop_width / 2.0
                centre = min(peak_hz, attack_set.sample_rate / 2.0 - half_width * 1.001)
                filtered = bandstop_filter(
                    attack_set, f_center=centre, width=scenario.sca.bandstop_width
                )
                fres = cpa_attack(filtered)
                filtered_correct = sum(a == b for a, b in zip(fres.recovered_key, target))

            entries.append(
                ModeEvaluation(
                    mode=mode,
                    seed=seed,
                    n_traces=budget,
                    tvla_max_abs_t=float(tvla.max_abs_t),
                    tvla_leaking=tvla.leaking,
                    cpa_bytes_correct=correct,
                    n0=n0,
                    peak_frequency_hz=peak_hz,
                    peak_band_fraction=peak_fraction,
                    filtered_cpa_bytes_correct=filtered_correct,
                )
            )
    return HidingReport(
        budget=budget,
        seeds=seeds,
        tvla_threshold=scenario.sca.tvla_threshold,
        coverage=check_frequency_coverage(scenario.measurement.f_clk, design),
        entries=tuple(entries),
    )
