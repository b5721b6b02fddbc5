"""Acceptance gate: the thirteen headline behaviors, one verdict line each.

Run with -v to get a per-criterion pass/fail line from the test names;
each test also prints a [criterion NN] PASS/FAIL line with the measured
numbers so a tee'd log carries the evidence.
"""

import time
from functools import lru_cache

import numpy as np

from pro_sim import cli, sca
from pro_sim.aes import key_expansion
from pro_sim.detect import drop_ratio
from pro_sim.engine import (
    build_sensors,
    measure_drop_matrix,
    run_detection,
    run_localization_monte_carlo,
    run_waster_sweep,
    fit_drop_line,
)
from pro_sim.pdn import CurrentMap, GridSpec, solve_dc
from pro_sim.pro import (
    MeasurementPlan,
    ProInstance,
    SelConfig,
    achievable_inverter_counts,
    active_inverters,
    all_delay,
    all_shorting,
    calibrate_delays,
    check_frequency_coverage,
    count_over_interval,
    instantaneous_frequency,
    nominal_delay,
    sel_from_id,
)
from pro_sim.scenario import scenario_from_dict
from pro_sim.stimuli import nodes_within_radius


def _verdict(num: int, ok: bool, detail: str) -> None:
    line = f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    assert ok, line


@lru_cache(maxsize=None)
def _n0_for_seed(seed: int) -> int:
    return sca.find_n0(scenario_from_dict({}), "pro-off", seed=seed).n0


def test_criterion_01_configuration_space():
    t0 = time.monotonic()
    design = scenario_from_dict({}).design
    counts = achievable_inverter_counts(design)
    expected = frozenset(range(1, 58, 4))
    n_cells = len(design.cells)
    mapped = {
        active_inverters(design, SelConfig(tuple(bool(m >> i & 1) for i in range(n_cells))))
        for m in range(1 << n_cells)
    }
    ok = counts == expected and mapped == expected and len(counts) == 15
    elapsed = time.monotonic() - t0
    _verdict(1, ok and elapsed < 1.0,
             f"{len(counts)} inverter counts, 64-assignment map closed [{elapsed:.2f}s]")


def test_criterion_02_frequency_anchors():
    t0 = time.monotonic()
    base = scenario_from_dict({}).design
    design = calibrate_delays(22e6, 123.44e6, base)
    f_slow = 1.0 / (2.0 * nominal_delay(design, all_delay(design)))
    f_fast = 1.0 / (2.0 * nominal_delay(design, all_shorting(design)))
    rel_slow = abs(f_slow - 22e6) / 22e6
    rel_fast = abs(f_fast - 123.44e6) / 123.44e6
    ok = rel_slow <= 1e-9 and rel_fast <= 1e-9
    elapsed = time.monotonic() - t0
    _verdict(2, ok and elapsed < 1.0,
             f"anchors rel err {rel_slow:.2e} / {rel_fast:.2e} [{elapsed:.2f}s]")


def test_criterion_03_counter_identity():
    t0 = time.monotonic()
    design = scenario_from_dict({}).design
    instance = ProInstance(design=design, location=(0, 0), variation_factor=1.0, pro_id="pro-00")
    sel = all_shorting(design)
    resp = design.response
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        f_target = 10 ** rng.uniform(np.log10(2e6), np.log10(1.5e8))
        duration = 10 ** rng.uniform(-5, -3)
        # invert the delay-stretch law for the voltage giving f_target
        f_nom = instantaneous_frequency(instance, sel, resp.v_nominal)
        v = resp.v_threshold + (resp.v_nominal - resp.v_threshold) * (
            f_target / f_nom
        ) ** (1.0 / resp.alpha)
        f_true = instantaneous_frequency(instance, sel, v)
        plan = MeasurementPlan(duration=duration)
        reading = count_over_interval(
            instance, sel, np.array([v]), plan, durations=np.array([duration])
        )
        worst = max(worst, abs(reading.c_pro - f_true * duration))
    ok = worst <= 1.0
    elapsed = time.monotonic() - t0
    _verdict(3, ok and elapsed < 1.0,
             f"1000 (f, T) pairs, worst count error {worst:.3f} [{elapsed:.2f}s]")


def test_criterion_04_waster_linearity():
    t0 = time.monotonic()
    scenario = scenario_from_dict({})
    fit = fit_drop_line(run_waster_sweep(scenario))
    ok = (
        abs(fit.slope - 3.1e-4) <= 0.2 * 3.1e-4
        and abs(fit.intercept - 0.247) <= 0.1 * 0.247
        and fit.r_squared >= 0.98
    )
    elapsed = time.monotonic() - t0
    _verdict(4, ok and elapsed < 30.0,
             f"slope {fit.slope:.3e}, intercept {fit.intercept:.4f}, "
             f"R^2 {fit.r_squared:.4f} [{elapsed:.1f}s]")


def test_criterion_05_locality_gradient():
    t0 = time.monotonic()
    worst_good = 9
    for seed in range(20):
        scenario = scenario_from_dict({
            "seeds": {"master": 500 + seed},
            "wasters": {"region_rows": [7, 8], "region_cols": [0, 1, 2, 3]},
        })
        sensors = build_sensors(scenario)
        matrix, _ = measure_drop_matrix(scenario, sensors, scenario.wasters)
        means = matrix.ratios.mean(axis=1)
        # rows count as ordered when their step toward the loaded end does
        # not decrease; the terminal row has no step to violate
        good = 1 + sum(means[i] <= means[i + 1] + 1e-12 for i in range(8))
        worst_good = min(worst_good, good)
    ok = worst_good >= 8
    elapsed = time.monotonic() - t0
    _verdict(5, ok and elapsed < 60.0,
             f"20 seeds, worst ordered-row count {worst_good}/9 [{elapsed:.1f}s]")


def test_criterion_06_fault_localization_monte_carlo():
    t0 = time.monotonic()
    placements = (
        ([1, 2], [0, 1, 2, 3], "left"),
        ([4, 5], [0, 1, 2, 3], "left"),
        ([1, 2], [4, 5, 6, 7], "right"),
    )
    rates = []
    for rows, cols, want_region in placements:
        scenario = scenario_from_dict(
            {"wasters": {"region_rows": rows, "region_cols": cols}}
        )
        runs = run_localization_monte_carlo(scenario, 100)
        lo, hi = min(rows) - 1, max(rows) + 1
        hits = sum(
            1
            for r in runs
            if r.report.region == want_region and lo <= r.report.inferred_row <= hi
        )
        rates.append(hits)
    ok = all(h >= 95 for h in rates)
    elapsed = time.monotonic() - t0
    _verdict(6, ok and elapsed < 300.0,
             f"hit rates {rates[0]}/{rates[1]}/{rates[2]} per 100 runs [{elapsed:.1f}s]")


def test_criterion_07_em_detection():
    t0 = time.monotonic()
    false_corrupts = 0
    missing_corrupts = 0
    for seed in range(100):
        scenario = scenario_from_dict({
            "seeds": {"master": 900 + seed},
            "em": {"pulses": [{"amplitude": 1.6}]},
        })
        pulse = scenario.em.pulses[0]
        pulse_interval = int(pulse.t_start // scenario.measurement.duration)
        corrupts = [
            ev for ev in run_detection(scenario).events if ev.kind == "counter-corrupt"
        ]
        if not corrupts:
            missing_corrupts += 1
        false_corrupts += sum(ev.interval_index != pulse_interval for ev in corrupts)

    shift_mismatches = 0
    for seed in range(20):
        scenario = scenario_from_dict({"seeds": {"master": 1300 + seed}})
        pulse = scenario.em.pulses[0]
        in_radius = {tuple(n) for n in nodes_within_radius(pulse, scenario.grid)}
        expected = {
            pid for pid, node in scenario.sensor_nodes().items() if node in in_radius
        }
        events = run_detection(scenario).events
        shifted = {ev.pro_id for ev in events if ev.kind == "em-shift"}
        if shifted != expected or any(ev.kind == "counter-corrupt" for ev in events):
            shift_mismatches += 1
    ok = missing_corrupts == 0 and false_corrupts == 0 and shift_mismatches == 0
    elapsed = time.monotonic() - t0
    _verdict(7, ok and elapsed < 120.0,
             f"100 super-threshold seeds: {missing_corrupts} missed, {false_corrupts} false; "
             f"20 sub-threshold seeds: {shift_mismatches} radius mismatches [{elapsed:.1f}s]")


def test_criterion_08_tvla_hiding():
    t0 = time.monotonic()
    scenario = scenario_from_dict({})
    pairs = []
    ok = True
    for seed in (1, 2, 3, 4, 5):
        off = sca.synthesize_traces(scenario, 10_000, "pro-off", tvla_classes=True, seed=seed)
        rnd = sca.synthesize_traces(scenario, 10_000, "pro-random", tvla_classes=True, seed=seed)
        t_off = sca.welch_t(*off.split_by_class()).max_abs_t
        t_rnd = sca.welch_t(*rnd.split_by_class()).max_abs_t
        pairs.append((t_off, t_rnd))
        ok = ok and t_off > 4.5 and t_rnd < t_off / 5.0
    elapsed = time.monotonic() - t0
    shown = " ".join(f"{a:.0f}/{b:.1f}" for a, b in pairs)
    _verdict(8, ok and elapsed < 600.0,
             f"max|t| off/random per seed: {shown} [{elapsed:.1f}s]")


def test_criterion_09_cpa_n0_and_hiding():
    t0 = time.monotonic()
    scenario = scenario_from_dict({})
    target = bytes(key_expansion(scenario.aes.key)[10])
    n0s, wrongs = [], []
    ok = True
    for seed in (1, 2, 3):
        n0 = _n0_for_seed(seed)
        ok = ok and n0 is not None
        n0s.append(n0)
        hidden = sca.synthesize_traces(scenario, 10 * n0, "pro-random", seed=seed)
        res = sca.cpa_attack(hidden)
        wrong = sum(a != b for a, b in zip(res.recovered_key, target))
        wrongs.append(wrong)
        ok = ok and wrong >= 4
    elapsed = time.monotonic() - t0
    _verdict(9, ok and elapsed < 900.0,
             f"n0 {n0s}, wrong bytes at 10x n0 {wrongs} [{elapsed:.1f}s]")


def test_criterion_10_spectrum_and_filter_attack():
    t0 = time.monotonic()
    scenario = scenario_from_dict({})
    target = bytes(key_expansion(scenario.aes.key)[10])
    n0 = _n0_for_seed(1)
    bin_hz = scenario.sca.sample_rate / scenario.sca.samples_per_trace
    clock_bin = round((1.0 / scenario.aes.round_duration) / bin_hz)
    f_cfg = 1.0 / (2.0 * nominal_delay(scenario.design, sel_from_id(scenario.sca.fixed_sel)))

    fixed = sca.synthesize_traces(scenario, 2 * n0, "pro-fixed", seed=1)
    spectrum = sca.power_spectrum(fixed, averaging=True)
    mags = spectrum.magnitudes.copy()
    for b in (0, 1, clock_bin - 1, clock_bin, clock_bin + 1):
        mags[b] = 0.0
    peak_bin = int(np.argmax(mags))
    peak_ok = abs(peak_bin - round(f_cfg / bin_hz)) <= 1

    filtered = sca.bandstop_filter(
        fixed, f_center=float(spectrum.bin_frequencies[peak_bin]),
        width=scenario.sca.bandstop_width,
    )
    filtered_n = None
    for rung in [n for n in scenario.sca.n0_ladder if n <= 2 * n0]:
        res = sca.cpa_attack(filtered.subset(rung))
        if res.recovered_key == target:
            filtered_n = rung
            break
    filter_ok = filtered_n is not None and filtered_n <= 2 * n0

    hidden = sca.synthesize_traces(scenario, 10 * n0, "pro-random", seed=1)
    rspec = sca.power_spectrum(hidden.subset(2000), averaging=True)
    freqs = rspec.bin_frequencies
    in_band = (freqs >= 22e6) & (freqs <= 123.44e6)
    energy = rspec.magnitudes**2
    band_frac = float(energy[in_band].max() / energy[in_band].sum())
    flat_ok = band_frac < 0.20

    strongest = int(np.argmax(np.where(in_band, energy, 0.0)))
    refiltered = sca.bandstop_filter(
        hidden, f_center=float(freqs[strongest]), width=scenario.sca.bandstop_width
    )
    res = sca.cpa_attack(refiltered)
    wrong = sum(a != b for a, b in zip(res.recovered_key, target))
    still_fails = wrong >= 4

    ok = peak_ok and filter_ok and flat_ok and still_fails
    elapsed = time.monotonic() - t0
    _verdict(10, ok and elapsed < 900.0,
             f"tone bin {peak_bin} (cfg {round(f_cfg / bin_hz)}), filtered recovery at "
             f"{filtered_n} <= {2 * n0}, band peak {band_frac:.3f}, "
             f"{wrong} wrong bytes after single-band filter [{elapsed:.1f}s]")


def test_criterion_11_coverage_rule():
    t0 = time.monotonic()
    design = scenario_from_dict({}).design
    report = check_frequency_coverage(24e6, design)
    ok = report.ok and 5.0 <= report.multiple <= 5.3
    elapsed = time.monotonic() - t0
    _verdict(11, ok and elapsed < 1.0,
             f"coverage multiple {report.multiple:.3f} [{elapsed:.2f}s]")


def _dense_oracle(grid: GridSpec, loads: np.ndarray) -> np.ndarray:
    # straight dense nodal solve, sharing no code with the iterative path
    rows, cols = grid.rows, grid.cols
    n = rows * cols
    g_mesh = 1.0 / grid.r_mesh
    g_sup = 1.0 / grid.r_supply
    G = np.zeros((n, n))
    b = np.zeros(n)
    for i in range(rows):
        for j in range(cols):
            k = i * cols + j
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ni, nj = i + di, j + dj
                if 0 <= ni < rows and 0 <= nj < cols:
                    G[k, k] += g_mesh
                    G[k, ni * cols + nj] -= g_mesh
            if i == 0 or i == rows - 1 or j == 0 or j == cols - 1:
                G[k, k] += g_sup
                b[k] += g_sup * grid.v_supply
            b[k] -= loads[i, j]
    return np.linalg.solve(G, b).reshape(rows, cols)


def test_criterion_12_pdn_oracle():
    t0 = time.monotonic()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        rows = int(rng.integers(1, 6))
        cols = int(rng.integers(1, 6))
        grid = GridSpec(rows=rows, cols=cols)
        loads = rng.uniform(0.0, 1.0, size=(rows, cols))
        got = solve_dc(grid, CurrentMap(loads)).voltages
        want = _dense_oracle(grid, loads)
        worst = max(worst, float(np.max(np.abs(got - want) / np.abs(want))))
    ok = worst <= 1e-9
    elapsed = time.monotonic() - t0
    _verdict(12, ok and elapsed < 10.0,
             f"100 grids up to 5x5, worst relative error {worst:.2e} [{elapsed:.1f}s]")


def test_criterion_13_determinism(tmp_path):
    t0 = time.monotonic()
    commands = (
        ("sweep-voltage", []),
        ("locate-fault", []),
        ("detect", []),
        ("sca", ["--traces", "64"]),
        ("configs", []),
    )
    mismatches = []
    for name, extra in commands:
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{name}-{tag}"
            rc = cli.main([name, *extra, "--out", str(out)])
            assert rc == 0, f"{name} exited {rc}"
            outs.append(out)
        files_a = sorted(p.name for p in outs[0].iterdir())
        files_b = sorted(p.name for p in outs[1].iterdir())
        if files_a != files_b:
            mismatches.append(f"{name}: file lists differ")
            continue
        for fname in files_a:
            if fname == "manifest.json":
                continue  # wall-clock field, exempt by design
            if (outs[0] / fname).read_bytes() != (outs[1] / fname).read_bytes():
                mismatches.append(f"{name}/{fname}")
    ok = not mismatches
    elapsed = time.monotonic() - t0
    _verdict(13, ok and elapsed < 300.0,
             f"5 commands re-run bit-identical"
             f"{'' if ok else ': ' + ', '.join(mismatches)} [{elapsed:.1f}s]")
