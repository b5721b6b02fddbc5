"""Measurement orchestration on top of the mesh solver and oscillator model.

This module owns the glue: it places sensor instances on the grid, runs gated
counter measurements segment by segment through EM pulse windows, and packages
the sweep, localization, and detection procedures the command line exposes.

Randomness discipline: every noise draw comes from a named substream keyed by
(replica, phase, measurement index, segment index), so repeating a run with
the same scenario and replica reproduces every counter bit for bit, no matter
how the work is scheduled across threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .detect import (
    AnomalyEvent,
    BaselineProfile,
    DropRatioMatrix,
    LocalizationReport,
    characterize,
    detect_anomalies,
    drop_ratio,
    locate_fault,
)
from .errors import CalibrationError, InputError
from .pdn import CurrentMap, solve_dc
from .pro import (
    CounterReading,
    ProInstance,
    count_over_interval,
    frequencies_for_voltages,
    frequency_from_counters,
    sel_from_id,
)
from .rng import substream
from .scenario import Scenario
from .stimuli import (
    PowerWasterBank,
    em_pulse_currents,
    nodes_within_radius,
    pulse_footprint,
    waster_currents,
)

# process variation draws are clipped here; the instance model rejects more
_VARIATION_CLIP = 0.1

# a scrambled counter reads this many oscillator edges per reference edge
_CORRUPT_RATIO = 1.7e6

# noise phase tags; they keep the per-purpose noise streams disjoint within
# one replica without any shared counter
PHASE_BASELINE = 0
PHASE_MONITOR = 1
PHASE_DROP_OFF = 2
PHASE_DROP_ON = 3
PHASE_SUPPLY = 4
PHASE_SWEEP_OFF = 5
PHASE_SWEEP_ON = 6


def thread_cap() -> int:
    """Worker limit for parallel sections, from PRO_SIM_THREADS if set."""
    raw = os.environ.get("PRO_SIM_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"PRO_SIM_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"PRO_SIM_THREADS must be >= 1, got {n}")
    return n


@dataclass(frozen=True)
class SensorArray:
    """The instantiated on-die sensors: oscillator instances and their nodes."""

    instances: dict[str, ProInstance]
    nodes: dict[str, tuple[int, int]]


def build_sensors(scenario: Scenario) -> SensorArray:
    """Instantiate every sensor with its per-chip process variation factor.

    Variation is drawn per sensor index from the process-variation stream, so
    the same scenario always yields the same chip.
    """
    nodes = scenario.sensor_nodes()
    sigma = scenario.layout.variation_sigma
    instances: dict[str, ProInstance] = {}
    for i, pro_id in enumerate(sorted(nodes)):
        draw = substream(scenario.master_seed, "process-variation", i).normal(0.0, sigma)
        factor = 1.0 + float(np.clip(draw, -_VARIATION_CLIP, _VARIATION_CLIP))
        instances[pro_id] = ProInstance(
            scenario.design, nodes[pro_id], variation_factor=factor, pro_id=pro_id
        )
    return SensorArray(instances=instances, nodes=nodes)


def enabled(bank: PowerWasterBank) -> PowerWasterBank:
    return replace(bank, enabled=True)


def interval_segments(
    t0: float, duration: float, pulses
) -> list[tuple[float, float]]:
    """Split one gate window into spans with piecewise-constant conditions.

    Cuts at every pulse start, end, and rebound end that falls inside the
    window; times are relative to the window start.
    """
    if duration <= 0:
        raise InputError("interval duration must be positive")
    edges = {0.0, duration}
    for pulse in pulses:
        for t in (pulse.t_start, pulse.t_end, pulse.rebound_end):
            rel = t - t0
            if 0.0 < rel < duration:
                edges.add(rel)
    cut = sorted(edges)
    return list(zip(cut[:-1], cut[1:]))


def measure_interval(
    scenario: Scenario,
    sensors: SensorArray,
    static_loads: np.ndarray,
    *,
    pulses=(),
    t0: float = 0.0,
    noise_indices: tuple[int, int] = (0, 0),
    replica: int = 0,
) -> dict[str, CounterReading]:
    """One gated count per sensor over [t0, t0 + duration).

    The window is split at pulse edges; each segment gets its own DC solve of
    the mesh under the loads active then, plus an independent measurement
    noise draw per node.  A rebound segment lifts in-footprint voltages by
    the pulse's overshoot; a pulse over the corruption threshold replaces the
    counters of every sensor inside its radius with scrambled values.
    """
    grid = scenario.grid
    meas = scenario.measurement
    phase, meas_idx = noise_indices
    segments = interval_segments(t0, meas.duration, pulses)
    widths = np.array([b - a for a, b in segments])
    volts = {pro_id: np.empty(len(segments)) for pro_id in sensors.nodes}
    corrupt_nodes: set[tuple[int, int]] = set()
    for si, (a, b) in enumerate(segments):
        t_mid = t0 + 0.5 * (a + b)
        loads = np.array(static_loads, dtype=float, copy=True)
        boost = np.zeros(grid.shape)
        for pulse in pulses:
            if pulse.active(t_mid):
                loads += em_pulse_currents(pulse, grid, t_mid).currents
                if pulse.amplitude > pulse.corrupt_threshold:
                    corrupt_nodes.update(nodes_within_radius(pulse, grid))
            elif pulse.rebounding(t_mid):
                boost += (
                    pulse.rebound_fraction
                    * pulse.amplitude
                    * scenario.em.coupling
                    * pulse_footprint(pulse, grid)
                )
        v = solve_dc(grid, CurrentMap(loads)).voltages + boost
        if meas.noise_sigma_v > 0:
            rng = substream(
                scenario.master_seed, "pdn-noise", replica, phase, meas_idx, si
            )
            v = v + rng.normal(0.0, meas.noise_sigma_v, size=grid.shape)
        for pro_id, node in sensors.nodes.items():
            volts[pro_id][si] = v[node]
    sel = scenario.monitor_sel()
    plan = meas.plan()
    c_clk = int(np.floor(meas.duration * meas.f_clk))
    wrap = 1 << scenario.design.counter_width
    out: dict[str, CounterReading] = {}
    for pro_id, instance in sensors.instances.items():
        if sensors.nodes[pro_id] in corrupt_nodes:
            out[pro_id] = CounterReading(
                c_pro=int(round(c_clk * _CORRUPT_RATIO)) % wrap,
                c_clk=c_clk,
                f_clk=meas.f_clk,
                corrupted=True,
            )
        else:
            out[pro_id] = count_over_interval(
                instance, sel, volts[pro_id], plan, f_clk=meas.f_clk, durations=widths
            )
    return out


def characterize_baseline(
    scenario: Scenario, sensors: SensorArray, replica: int = 0
) -> BaselineProfile:
    """Repeated quiet measurements folded into per-sensor mean and spread."""
    zeros = np.zeros(scenario.grid.shape)
    per_sensor: dict[str, list[CounterReading]] = {p: [] for p in sensors.instances}
    for rep in range(scenario.measurement.repetitions):
        readings = measure_interval(
            scenario, sensors, zeros, noise_indices=(PHASE_BASELINE, rep), replica=replica
        )
        for pro_id, reading in readings.items():
            per_sensor[pro_id].append(reading)
    return characterize(per_sensor)


@dataclass(frozen=True)
class DropDetail:
    """Per-sensor numbers behind one cell of a drop-ratio matrix."""

    sensor_id: str
    row: int
    col: int
    f_off: float
    f_on: float
    ratio: float


def measure_drop_matrix(
    scenario: Scenario,
    sensors: SensorArray,
    bank: PowerWasterBank,
    replica: int = 0,
) -> tuple[DropRatioMatrix, list[DropDetail]]:
    """Frequency drop of every sensor when the waster bank switches on.

    Off and on conditions are each measured ``repetitions`` times; the ratio
    is taken between the per-sensor means.
    """
    grid = scenario.grid
    zeros = np.zeros(grid.shape)
    on_loads = waster_currents(enabled(bank), grid).currents
    reps = scenario.measurement.repetitions
    f_off: dict[str, list[float]] = {p: [] for p in sensors.instances}
    f_on: dict[str, list[float]] = {p: [] for p in sensors.instances}
    for rep in range(reps):
        off = measure_interval(
            scenario, sensors, zeros, noise_indices=(PHASE_DROP_OFF, rep), replica=replica
        )
        on = measure_interval(
            scenario, sensors, on_loads, noise_indices=(PHASE_DROP_ON, rep), replica=replica
        )
        for pro_id in sensors.instances:
            f_off[pro_id].append(frequency_from_counters(off[pro_id]))
            f_on[pro_id].append(frequency_from_counters(on[pro_id]))
    layout = scenario.layout
    ratios = np.zeros((layout.rows, layout.cols))
    details: list[DropDetail] = []
    for pro_id in sensors.instances:
        index = int(pro_id[4:])
        row, col = divmod(index, layout.cols)
        off_mean = float(np.mean(f_off[pro_id]))
        on_mean = float(np.mean(f_on[pro_id]))
        ratio = drop_ratio(off_mean, on_mean)
        ratios[row, col] = ratio
        details.append(DropDetail(pro_id, row, col, off_mean, on_mean, ratio))
    return DropRatioMatrix(ratios), details


@dataclass(frozen=True)
class LocalizationRun:
    matrix: DropRatioMatrix
    details: tuple[DropDetail, ...]
    report: LocalizationReport


def run_localization(scenario: Scenario, replica: int = 0) -> LocalizationRun:
    """Measure the drop matrix for the scenario's waster bank and locate it."""
    sensors = build_sensors(scenario)
    matrix, details = measure_drop_matrix(scenario, sensors, scenario.wasters, replica=replica)
    return LocalizationRun(matrix=matrix, details=tuple(details), report=locate_fault(matrix))


def run_localization_monte_carlo(
    scenario: Scenario, replicas: int, workers: int | None = None
) -> list[LocalizationRun]:
    """Independent localization replicas, threaded but order-insensitive.

    Replica r always consumes noise substream r, so the result list is
    identical whether it was computed serially or on a pool.
    """
    if replicas < 1:
        raise InputError("need at least one replica")
    cap = min(workers if workers is not None else thread_cap(), replicas)
    if cap <= 1:
        return [run_localization(scenario, replica=r) for r in range(replicas)]
    with ThreadPoolExecutor(max_workers=cap) as pool:
        return list(pool.map(lambda r: run_localization(scenario, replica=r), range(replicas)))


def _frequency_at(instance: ProInstance, sel, v: float) -> float:
    f, _ = frequencies_for_voltages(instance, sel, np.array([v]))
    return float(f[0])


def _noiseless_sweep(
    scenario: Scenario, sensors: SensorArray, i_per: float, i_base: float
) -> list[tuple[int, float]]:
    # idealized sweep for calibration: instantaneous frequencies, no counters
    grid = scenario.grid
    sel = scenario.monitor_sel()
    f_off = {
        pro_id: _frequency_at(instance, sel, grid.v_supply)
        for pro_id, instance in sensors.instances.items()
    }
    points = []
    for count in scenario.waster_sweep.counts:
        bank = PowerWasterBank(
            count=count,
            region=scenario.waster_sweep.region,
            i_per_waster=i_per,
            i_base=i_base,
            f_waster=scenario.wasters.f_waster,
            enabled=True,
        )
        field = solve_dc(grid, waster_currents(bank, grid))
        ratios = [
            drop_ratio(
                f_off[pro_id],
                _frequency_at(sensors.instances[pro_id], sel, field.voltages[node]),
            )
            for pro_id, node in sensors.nodes.items()
        ]
        points.append((count, float(np.mean(ratios))))
    return points


def run_waster_sweep(
    scenario: Scenario, noiseless: bool = False, replica: int = 0
) -> list[tuple[int, float]]:
    """Mean drop ratio across all sensors at each waster count.

    The noiseless variant skips counters and measurement noise; it is the
    calibration target and a convenient oracle.
    """
    sensors = build_sensors(scenario)
    if noiseless:
        return _noiseless_sweep(
            scenario, sensors, scenario.wasters.i_per_waster, scenario.wasters.i_base
        )
    grid = scenario.grid
    zeros = np.zeros(grid.shape)
    reps = scenario.waster_sweep.repetitions
    points = []
    for idx, count in enumerate(scenario.waster_sweep.counts):
        bank = PowerWasterBank(
            count=count,
            region=scenario.waster_sweep.region,
            i_per_waster=scenario.wasters.i_per_waster,
            i_base=scenario.wasters.i_base,
            f_waster=scenario.wasters.f_waster,
            enabled=True,
        )
        on_loads = waster_currents(bank, grid).currents
        f_off = {p: [] for p in sensors.instances}
        f_on = {p: [] for p in sensors.instances}
        for rep in range(reps):
            m = idx * reps + rep
            off = measure_interval(
                scenario, sensors, zeros, noise_indices=(PHASE_SWEEP_OFF, m), replica=replica
            )
            on = measure_interval(
                scenario, sensors, on_loads, noise_indices=(PHASE_SWEEP_ON, m), replica=replica
            )
            for pro_id in sensors.instances:
                f_off[pro_id].append(frequency_from_counters(off[pro_id]))
                f_on[pro_id].append(frequency_from_counters(on[pro_id]))
        ratios = [
            drop_ratio(float(np.mean(f_off[p])), float(np.mean(f_on[p])))
            for p in sensors.instances
        ]
        points.append((count, float(np.mean(ratios))))
    return points


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    r_squared: float


def fit_drop_line(points) -> LineFit:
    """Least-squares line through (count, ratio) sweep points."""
    if len(points) < 2:
        raise InputError("need at least two sweep points to fit a line")
    x = np.array([p[0] for p in points], dtype=float)
    y = np.array([p[1] for p in points], dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    ss_res = float(residual @ residual)
    centered = y - y.mean()
    ss_tot = float(centered @ centered)
    r_squared = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return LineFit(float(slope), float(intercept), r_squared)


@dataclass(frozen=True)
class WasterCalibration:
    i_per_waster: float
    i_base: float
    fit: LineFit
    iterations: int


def calibrate_wasters(
    scenario: Scenario,
    target_slope: float = 3.1e-4,
    target_intercept: float = 0.247,
    tol: float = 1e-3,
    max_iter: int = 60,
    i_per_start: float | None = None,
    i_base_start: float | None = None,
) -> WasterCalibration:
    """Find waster currents whose sweep line matches the reference hardware.

    Alternates multiplicative corrections on the per-waster draw (driving the
    slope) and the enable-infrastructure draw (driving the intercept) against
    noiseless sweeps until both land within ``tol`` relative error.
    """
    if target_slope <= 0 or target_intercept <= 0:
        raise InputError("calibration targets must be positive")
    sensors = build_sensors(scenario)
    i_per = i_per_start if i_per_start is not None else scenario.wasters.i_per_waster
    i_base = i_base_start if i_base_start is not None else scenario.wasters.i_base
    if i_per <= 0 or i_base <= 0:
        raise InputError("calibration starting currents must be positive")
    for iteration in range(1, max_iter + 1):
        fit = fit_drop_line(_noiseless_sweep(scenario, sensors, i_per, i_base))
        slope_err = fit.slope / target_slope - 1.0
        intercept_err = fit.intercept / target_intercept - 1.0
        if abs(slope_err) < tol and abs(intercept_err) < tol:
            return WasterCalibration(i_per, i_base, fit, iteration)
        if fit.slope <= 0 or fit.intercept <= 0:
            raise CalibrationError(
                "waster sweep response is not increasing; loads may be stalling "
                f"the sensors (slope {fit.slope:.3e}, intercept {fit.intercept:.3e})"
            )
        i_per *= target_slope / fit.slope
        i_base *= target_intercept / fit.intercept
    raise CalibrationError(f"waster calibration did not converge in {max_iter} iterations")


@dataclass(frozen=True)
class DetectionRun:
    profile: BaselineProfile
    intervals: tuple[dict, ...]
    events: list[AnomalyEvent]


def run_detection(scenario: Scenario, replica: int = 0) -> DetectionRun:
    """Baseline characterization followed by monitored intervals with pulses."""
    sensors = build_sensors(scenario)
    profile = characterize_baseline(scenario, sensors, replica=replica)
    zeros = np.zeros(scenario.grid.shape)
    intervals = []
    for k in range(scenario.em.monitoring_intervals):
        intervals.append(
            measure_interval(
                scenario,
                sensors,
                zeros,
                pulses=scenario.em.pulses,
                t0=k * scenario.measurement.duration,
                noise_indices=(PHASE_MONITOR, k),
                replica=replica,
            )
        )
    events = detect_anomalies(intervals, profile, scenario.design)
    return DetectionRun(profile=profile, intervals=tuple(intervals), events=events)


@dataclass(frozen=True)
class SupplyPoint:
    supply_voltage: float
    sel_config_id: str
    mean_frequency: float
    sigma: float


def run_supply_sweep(scenario: Scenario, replica: int = 0) -> list[SupplyPoint]:
    """Measured frequency of one sensor across supply voltages and configs.

    With no load on the mesh every node sits at the supply rail, so the sweep
    reduces to repeated counter measurements at shifted rail voltages.
    """
    sensors = build_sensors(scenario)
    sensor_id = scenario.supply_sweep.sensor
    instance = sensors.instances[sensor_id]
    node = sensors.nodes[sensor_id]
    meas = scenario.measurement
    plan = meas.plan()
    reps = scenario.supply_sweep.repetitions
    points = []
    m = 0
    for v_supply in scenario.supply_sweep.sweep.voltages:
        for config_id in scenario.supply_sweep.configs:
            sel = sel_from_id(config_id)
            freqs = []
            for _ in range(reps):
                v_node = v_supply
                if meas.noise_sigma_v > 0:
                    rng = substream(
                        scenario.master_seed, "pdn-noise", replica, PHASE_SUPPLY, m, 0
                    )
                    v_node += float(
                        rng.normal(0.0, meas.noise_sigma_v, size=scenario.grid.shape)[node]
                    )
                reading = count_over_interval(
                    instance, sel, np.array([v_node]), plan, f_clk=meas.f_clk
                )
                freqs.append(frequency_from_counters(reading))
                m += 1
            sigma = float(np.std(freqs, ddof=1)) if reps > 1 else 0.0
            points.append(SupplyPoint(v_supply, config_id, float(np.mean(freqs)), sigma))
    return points
