"""Programmable ring oscillator model.

A chain of delay cells closes through one fixed inverter.  Each cell routes
the signal either through its own inverters (the delay path) or around them
(the shorting path), selected per cell.  Oscillation frequency is the
reciprocal of twice the round-trip propagation delay, and frequency is read
out by counting oscillator edges against a known reference clock.

Supply-voltage dependence uses a single stretch law applied to the whole
chain: delay grows as ((v_nominal - v_threshold) / (v - v_threshold))**alpha,
so the factor is exactly 1 at nominal supply, and the oscillator stalls at or
below the threshold.  A stall is a distinct state, never reported as 0 Hz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CalibrationError, InputError, OscillatorStalled

DEFAULT_F_CLK = 24e6

# Charge moved per inverter per oscillator period; sets the oscillator's own
# supply-current draw (current = charge * frequency * active inverters).
DEFAULT_SWITCH_CHARGE = 1.35e-10


@dataclass(frozen=True)
class VoltageResponse:
    """Constants of the delay stretch law."""

    v_nominal: float = 1.33
    v_threshold: float = 0.5
    alpha: float = 1.3

    def __post_init__(self):
        if not (0 <= self.v_threshold < self.v_nominal):
            raise InputError("need 0 <= v_threshold < v_nominal")
        if self.alpha <= 0:
            raise InputError("alpha must be positive")

    def stretch(self, v_local: float) -> float:
        """Delay multiplier at the given local supply voltage."""
        if v_local <= self.v_threshold:
            raise OscillatorStalled(
                f"supply {v_local:.4f} V at or below stall threshold "
                f"{self.v_threshold:.4f} V"
            )
        return ((self.v_nominal - self.v_threshold) / (v_local - self.v_threshold)) ** self.alpha


@dataclass(frozen=True)
class DelayCellSpec:
    """One selectable delay cell: inverter chain plus bypass."""

    n_inverters: int
    t_delay_path: float
    t_short_path: float

    def __post_init__(self):
        if self.n_inverters < 2 or self.n_inverters % 2 != 0:
            raise InputError(
                f"cell inverter count must be even and >= 2, got {self.n_inverters}"
            )
        if not (0 < self.t_short_path < self.t_delay_path):
            raise InputError("need 0 < t_short_path < t_delay_path")


@dataclass(frozen=True)
class ProDesign:
    """A full oscillator design shared by all instances of it on a chip."""

    cells: tuple[DelayCellSpec, ...]
    t_fixed: float
    t_inverter_nominal: float
    counter_width: int = 32
    response: VoltageResponse = field(default_factory=VoltageResponse)
    switch_charge: float = DEFAULT_SWITCH_CHARGE

    def __post_init__(self):
        if not self.cells:
            raise InputError("design needs at least one delay cell")
        if self.t_fixed <= 0 or self.t_inverter_nominal <= 0:
            raise InputError("delays must be positive")
        if self.counter_width < 1:
            raise InputError("counter width must be positive")
        if self.switch_charge <= 0:
            raise InputError("switch_charge must be positive")

    @property
    def n_switchable(self) -> int:
        return sum(c.n_inverters for c in self.cells)


@dataclass(frozen=True)
class SelConfig:
    """Per-cell path selection (True = delay path) plus the enable bit."""

    bits: tuple[bool, ...]
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))

    @property
    def config_id(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)


def sel_from_id(config_id: str, enabled: bool = True) -> SelConfig:
    if not config_id or set(config_id) - {"0", "1"}:
        raise InputError(f"selector id must be a non-empty 0/1 string, got {config_id!r}")
    return SelConfig(tuple(c == "1" for c in config_id), enabled=enabled)


def all_shorting(design: ProDesign, enabled: bool = True) -> SelConfig:
    return SelConfig((False,) * len(design.cells), enabled=enabled)


def all_delay(design: ProDesign, enabled: bool = True) -> SelConfig:
    return SelConfig((True,) * len(design.cells), enabled=enabled)


@dataclass(frozen=True)
class ProInstance:
    """One placed oscillator with its process-variation factor."""

    design: ProDesign
    location: tuple[int, int]
    variation_factor: float = 1.0
    pro_id: str = ""

    def __post_init__(self):
        if not (0.9 <= self.variation_factor <= 1.1):
            raise InputError(
                f"variation factor {self.variation_factor} outside [0.9, 1.1]"
            )


@dataclass(frozen=True)
class CounterReading:
    """One gated count pair: oscillator edges against reference-clock edges."""

    c_pro: int
    c_clk: int
    f_clk: float
    corrupted: bool = False
    stalled: bool = False

    def __post_init__(self):
        if self.c_pro < 0 or self.c_clk < 0:
            raise InputError("counter values cannot be negative")
        if self.f_clk <= 0:
            raise InputError("reference clock frequency must be positive")


@dataclass(frozen=True)
class MeasurementPlan:
    """How one frequency measurement is taken."""

    duration: float
    repetitions: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise InputError("measurement duration must be positive")
        if self.repetitions < 1:
            raise InputError("repetitions must be >= 1")


def build_design(
    cell_inverters,
    f_min: float,
    f_max: float,
    short_fraction: float = 0.05,
    counter_width: int = 32,
    response: VoltageResponse | None = None,
    switch_charge: float = DEFAULT_SWITCH_CHARGE,
) -> ProDesign:
    """Construct a design from cell sizes and calibrate it to two anchors."""
    if not cell_inverters:
        raise InputError("need at least one cell size")
    skeleton = ProDesign(
        cells=tuple(
            # placeholder delays, replaced by calibration below
            DelayCellSpec(n_inverters=int(n), t_delay_path=2.0, t_short_path=1.0)
            for n in cell_inverters
        ),
        t_fixed=1.0,
        t_inverter_nominal=1.0,
        counter_width=counter_width,
        response=response if response is not None else VoltageResponse(),
        switch_charge=switch_charge,
    )
    return calibrate_delays(f_min, f_max, skeleton, short_fraction=short_fraction)


def calibrate_delays(
    f_min: float,
    f_max: float,
    design: ProDesign,
    short_fraction: float = 0.05,
) -> ProDesign:
    """Fit per-cell delays so the all-delay and all-shorting configurations
    oscillate at f_min and f_max at nominal supply.

    The shorting path of a cell takes ``short_fraction`` of its delay path,
    and the delay path is the cell's inverters plus one multiplexer hop equal
    to the shorting-path delay.  Anchors that would leave no room for the
    fixed inverter and routing raise a calibration error.
    """
    if not (0 < f_min < f_max):
        raise InputError(f"need 0 < f_min < f_max, got {f_min} and {f_max}")
    if not (0 < short_fraction < 1):
        raise InputError("short_fraction must lie in (0, 1)")
    n_sw = design.n_switchable
    t_inv = (1 / (2 * f_min) - 1 / (2 * f_max)) / n_sw
    if t_inv <= 0:
        raise CalibrationError("anchors imply a non-positive inverter delay")
    ratio = short_fraction / (1 - short_fraction)
    cells = []
    for cell in design.cells:
        t_short = cell.n_inverters * t_inv * ratio
        cells.append(
            DelayCellSpec(
                n_inverters=cell.n_inverters,
                t_delay_path=cell.n_inverters * t_inv + t_short,
                t_short_path=t_short,
            )
        )
    t_fixed = 1 / (2 * f_max) - sum(c.t_short_path for c in cells)
    if t_fixed < t_inv:
        raise CalibrationError(
            f"anchors leave {t_fixed:.3e} s for the fixed path, less than one "
            f"inverter delay {t_inv:.3e} s; f_max is infeasibly high for this chain"
        )
    return replace(design, cells=tuple(cells), t_fixed=t_fixed, t_inverter_nominal=t_inv)


def _check_sel(design: ProDesign, sel: SelConfig) -> None:
    if len(sel.bits) != len(design.cells):
        raise InputError(
            f"selector has {len(sel.bits)} bits for {len(design.cells)} cells"
        )


def active_inverters(design: ProDesign, sel: SelConfig) -> int:
    """Inverters in the oscillation loop: the fixed one plus selected cells."""
    _check_sel(design, sel)
    return 1 + sum(c.n_inverters for c, b in zip(design.cells, sel.bits) if b)


def achievable_inverter_counts(design: ProDesign) -> frozenset[int]:
    """All active-inverter totals reachable over the 2^cells selector space."""
    sums = {0}
    for cell in design.cells:
        sums |= {s + cell.n_inverters for s in sums}
    return frozenset(1 + s for s in sums)


def nominal_delay(design: ProDesign, sel: SelConfig) -> float:
    """Round-trip propagation delay at nominal supply, no process variation."""
    _check_sel(design, sel)
    t = design.t_fixed
    for cell, bit in zip(design.cells, sel.bits):
        t += cell.t_delay_path if bit else cell.t_short_path
    return t


def propagation_delay(instance: ProInstance, sel: SelConfig, v_local: float) -> float:
    """Round-trip delay of one instance at its local supply voltage."""
    if v_local <= 0:
        raise InputError("v_local must be positive")
    stretch = instance.design.response.stretch(v_local)
    return nominal_delay(instance.design, sel) * instance.variation_factor * stretch


def instantaneous_frequency(instance: ProInstance, sel: SelConfig, v_local: float) -> float:
    """Oscillation frequency 1 / (2 * delay); 0.0 when the enable bit is off."""
    if not sel.enabled:
        _check_sel(instance.design, sel)
        return 0.0
    return 1.0 / (2.0 * propagation_delay(instance, sel, v_local))


def frequencies_for_voltages(
    instance: ProInstance, sel: SelConfig, v_local: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vector form of the frequency law over a voltage trace.

    Returns (frequencies, stalled_mask).  Stalled samples report 0 Hz here so
    integration can proceed; callers must propagate the mask, not the zeros.
    """
    v = np.asarray(v_local, dtype=float)
    resp = instance.design.response
    stalled = v <= resp.v_threshold
    if not sel.enabled:
        _check_sel(instance.design, sel)
        return np.zeros_like(v), stalled
    base = nominal_delay(instance.design, sel) * instance.variation_factor
    span = resp.v_nominal - resp.v_threshold
    with np.errstate(divide="ignore", invalid="ignore"):
        stretch = (span / (v - resp.v_threshold)) ** resp.alpha
        f = 1.0 / (2.0 * base * stretch)
    f = np.where(stalled, 0.0, f)
    return f, stalled


def count_over_interval(
    instance: ProInstance,
    sel: SelConfig,
    v_samples: np.ndarray,
    plan: MeasurementPlan,
    f_clk: float = DEFAULT_F_CLK,
    durations: np.ndarray | None = None,
) -> CounterReading:
    """Integrate oscillator edges over one gate interval.

    ``v_samples`` is a time-ordered trace of the local supply voltage; each
    sample is held constant over its sub-interval (uniform slices of the plan
    duration unless explicit ``durations`` are given).  The oscillator count
    is floor of the integrated frequency, wrapped to the counter width; the
    reference count is floor(duration * f_clk).
    """
    v = np.atleast_1d(np.asarray(v_samples, dtype=float))
    if v.size == 0:
        raise InputError("voltage trace is empty")
    if f_clk <= 0:
        raise InputError("f_clk must be positive")
    if durations is None:
        w = np.full(v.size, plan.duration / v.size)
    else:
        w = np.asarray(durations, dtype=float)
        if w.shape != v.shape:
            raise InputError("durations must match the voltage trace sample for sample")
        if np.any(w <= 0):
            raise InputError("sample durations must be positive")
        if not math.isclose(w.sum(), plan.duration, rel_tol=1e-9):
            raise InputError(
                f"sample durations sum to {w.sum():.6e}, plan says {plan.duration:.6e}"
            )
    f, stalled_mask = frequencies_for_voltages(instance, sel, v)
    edges = float(np.dot(f, w))
    # guard the floor against accumulated rounding in the quadrature sum:
    # a few ulps short of a whole period still counts the edge
    c_raw = int(np.floor(edges * (1 + 4e-12) + 1e-9))
    c_pro = c_raw % (1 << instance.design.counter_width)
    c_clk = int(np.floor(plan.duration * f_clk))
    return CounterReading(
        c_pro=c_pro,
        c_clk=c_clk,
        f_clk=f_clk,
        corrupted=False,
        stalled=bool(stalled_mask.any()),
    )


def frequency_from_counters(reading: CounterReading) -> float:
    """Reconstruct frequency as (c_pro / c_clk) * f_clk.

    Corrupted readings still reconstruct (to whatever absurd value the
    scrambled count implies); the corrupted flag travels with the reading.
    """
    if reading.c_clk <= 0:
        raise InputError("reference count must be positive to reconstruct frequency")
    return reading.c_pro / reading.c_clk * reading.f_clk


@dataclass(frozen=True)
class CoverageReport:
    """Whether the fastest configuration outruns a target clock."""

    ok: bool
    multiple: float
    f_max_achievable: float
    f_clock: float


def check_frequency_coverage(
    f_clock: float, design: ProDesign, minimum_multiple: float = 3.0
) -> CoverageReport:
    """Compare the fastest achievable frequency against a clock under scrutiny.

    Evaluated at nominal supply with no process variation; a ratio exactly at
    the minimum passes.
    """
    if f_clock <= 0:
        raise InputError("f_clock must be positive")
    f_max = 1.0 / (2.0 * nominal_delay(design, all_shorting(design)))
    multiple = f_max / f_clock
    return CoverageReport(
        ok=multiple >= minimum_multiple,
        multiple=multiple,
        f_max_achievable=f_max,
        f_clock=f_clock,
    )


def config_table(design: ProDesign) -> list[tuple[int, str, float]]:
    """One canonical selector per achievable inverter count, with its nominal
    frequency, sorted fastest first."""
    best: dict[int, SelConfig] = {}
    # enumerate lexicographically so the canonical pick is stable
    for mask in range(1 << len(design.cells)):
        bits = tuple(bool(mask >> i & 1) for i in range(len(design.cells)))
        sel = SelConfig(bits)
        count = active_inverters(design, sel)
        if count not in best:
            best[count] = sel
    rows = []
    for count in sorted(best):
        sel = best[count]
        rows.append((count, sel.config_id, 1.0 / (2.0 * nominal_delay(design, sel))))
    return rows
