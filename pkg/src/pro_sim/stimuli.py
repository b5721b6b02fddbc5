"""Everything that draws or injects current on the mesh.

Four source families: power-waster banks (the fault-injection attacker),
electromagnetic pulses (probe over the die), the AES victim's round activity,
and the oscillators' own switching draw when used as a hiding noise source.
All of them produce CurrentMap snapshots for a given instant; time-stepping
policy belongs to the measurement engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import aes
from .errors import InputError
from .pdn import CurrentMap, GridSpec
from .pro import ProInstance, SelConfig, active_inverters, instantaneous_frequency
from .errors import OscillatorStalled
from .rng import substream


def _check_region(region, grid: GridSpec, what: str) -> None:
    for r, c in region:
        if not (0 <= r < grid.rows and 0 <= c < grid.cols):
            raise InputError(f"{what} node ({r}, {c}) outside grid {grid.shape}")


@dataclass(frozen=True)
class PowerWasterBank:
    """A bank of ring-oscillator power wasters plus its enable infrastructure.

    ``i_base`` is the draw of the always-running enable fan-out and control
    logic whenever the bank is switched on; it is what keeps the measured
    frequency-drop line from passing through the origin.
    """

    count: int
    region: tuple[tuple[int, int], ...]
    i_per_waster: float = 0.8e-3
    i_base: float = 0.0
    f_waster: float = 245e6
    enabled: bool = False

    def __post_init__(self):
        if self.count < 0:
            raise InputError("waster count cannot be negative")
        if not self.region:
            raise InputError("waster bank needs a non-empty region")
        if self.i_per_waster < 0 or self.i_base < 0:
            raise InputError("waster currents cannot be negative")
        object.__setattr__(self, "region", tuple((int(r), int(c)) for r, c in self.region))


def waster_currents(bank: PowerWasterBank, grid: GridSpec, t: float = 0.0) -> CurrentMap:
    """Bank draw at time t, spread uniformly over the bank's region nodes."""
    _check_region(bank.region, grid, "waster region")
    out = np.zeros(grid.shape)
    if bank.enabled:
        per_node = (bank.i_base + bank.count * bank.i_per_waster) / len(bank.region)
        for r, c in bank.region:
            out[r, c] += per_node
    return CurrentMap(out)


@dataclass(frozen=True)
class EmPulse:
    """One probe discharge over the die.

    Injected current falls off linearly to zero at ``radius`` (grid-distance
    units).  After the pulse window the return overshoot lifts local supply
    voltages by ``rebound_fraction`` of the dip the pulse caused, for
    ``rebound_duration`` seconds (ten pulse widths unless set explicitly).
    Amplitudes above ``corrupt_threshold`` scramble the counters of
    oscillators within the radius instead of merely shifting them.
    """

    center: tuple[int, int]
    radius: float
    amplitude: float
    t_start: float
    t_width: float
    corrupt_threshold: float
    rebound_fraction: float = 0.3
    rebound_duration: float | None = None

    def __post_init__(self):
        if self.radius < 0:
            raise InputError("pulse radius cannot be negative")
        if self.amplitude < 0:
            raise InputError("pulse amplitude cannot be negative")
        if self.t_width <= 0:
            raise InputError("pulse width must be positive")
        if self.t_start < 0:
            raise InputError("pulse start cannot be negative")
        if self.rebound_fraction < 0:
            raise InputError("rebound fraction cannot be negative")
        if self.rebound_duration is not None and self.rebound_duration < 0:
            raise InputError("rebound duration cannot be negative")

    @property
    def t_end(self) -> float:
        return self.t_start + self.t_width

    @property
    def rebound_end(self) -> float:
        dur = self.rebound_duration if self.rebound_duration is not None else 10 * self.t_width
        return self.t_end + dur

    def active(self, t: float) -> bool:
        return self.t_start <= t < self.t_end

    def rebounding(self, t: float) -> bool:
        return self.t_end <= t < self.rebound_end


def pulse_footprint(pulse: EmPulse, grid: GridSpec) -> np.ndarray:
    """Linear falloff weights, 1 at the centre down to 0 at the radius."""
    rr, cc = np.indices(grid.shape)
    d = np.hypot(rr - pulse.center[0], cc - pulse.center[1])
    if pulse.radius == 0:
        return np.where(d == 0, 1.0, 0.0)
    return np.clip(1.0 - d / pulse.radius, 0.0, None)


def nodes_within_radius(pulse: EmPulse, grid: GridSpec) -> list[tuple[int, int]]:
    rr, cc = np.indices(grid.shape)
    d = np.hypot(rr - pulse.center[0], cc - pulse.center[1])
    return [tuple(x) for x in np.argwhere(d <= pulse.radius)]


def em_pulse_currents(pulse: EmPulse, grid: GridSpec, t: float) -> CurrentMap:
    """Injected current map at time t; zero outside the pulse window."""
    if not pulse.active(t):
        return CurrentMap(np.zeros(grid.shape))
    return CurrentMap(pulse.amplitude * pulse_footprint(pulse, grid))


@dataclass(frozen=True)
class AesActivity:
    """The victim block's activity profile on the mesh."""

    key: bytes
    region: tuple[tuple[int, int], ...]
    i_round_peak: float
    round_duration: float
    leak_scale: float

    N_ROUNDS = 10

    def __post_init__(self):
        if len(self.key) != 16:
            raise InputError("AES-128 key must be 16 bytes")
        if not self.region:
            raise InputError("AES activity needs a non-empty region")
        if self.i_round_peak < 0 or self.leak_scale < 0:
            raise InputError("activity currents cannot be negative")
        if self.round_duration <= 0:
            raise InputError("round duration must be positive")
        object.__setattr__(self, "region", tuple((int(r), int(c)) for r, c in self.region))

    @property
    def span(self) -> float:
        return self.N_ROUNDS * self.round_duration


def round_envelope(phase: np.ndarray) -> np.ndarray:
    """Within-round current shape on [0, 1): a raised bump peaking mid-round."""
    return np.sin(np.pi * np.asarray(phase)) ** 2


def aes_power(
    activity: AesActivity, plaintext: bytes, t: float, grid: GridSpec
) -> tuple[CurrentMap, bytes]:
    """Current map of one encryption at instant t, plus its ciphertext.

    Rounds run back to back, each carrying the baseline envelope; the final
    round adds the state-register rewrite term, leak_scale per flipped bit.
    """
    if len(plaintext) != 16:
        raise InputError("plaintext must be 16 bytes")
    if not (0 <= t < activity.span):
        raise InputError(
            f"t = {t:.3e} outside the encryption span [0, {activity.span:.3e})"
        )
    _check_region(activity.region, grid, "AES region")
    pts = np.frombuffer(plaintext, dtype=np.uint8)[None, :]
    ct, state9 = aes.encrypt_batch(activity.key, pts)
    rnd = int(t // activity.round_duration)
    phase = t / activity.round_duration - rnd
    total = activity.i_round_peak * float(round_envelope(phase))
    if rnd == activity.N_ROUNDS - 1:
        total += activity.leak_scale * float(aes.hd_last_round(state9, ct)[0])
    out = np.zeros(grid.shape)
    per_node = total / len(activity.region)
    for r, c in activity.region:
        out[r, c] += per_node
    return CurrentMap(out), bytes(ct[0])


@dataclass(frozen=True)
class HidingSchedule:
    """Random re-selection of the oscillator configuration over time."""

    interval: float
    seed: int = 0
    drive_io: bool = True
    io_gain: float = 20.0

    def __post_init__(self):
        if self.interval <= 0:
            raise InputError("schedule interval must be positive")
        if self.io_gain < 1.0:
            raise InputError("io_gain must be at least 1")


def interval_index(schedule: HidingSchedule, t: float) -> int:
    if t < 0:
        raise InputError("schedule time cannot be negative")
    return int(t // schedule.interval)


def next_sel(schedule: HidingSchedule, design, t: float) -> SelConfig:
    """Selector for the schedule slot containing t.

    Uniform over the full 2^cells selector space, deterministic in
    (seed, slot index) and independent of evaluation order.
    """
    idx = interval_index(schedule, t)
    rng = substream(schedule.seed, "hiding", idx)
    draw = int(rng.integers(0, 1 << len(design.cells)))
    bits = tuple(bool(draw >> i & 1) for i in range(len(design.cells)))
    return SelConfig(bits, enabled=True)


def pro_self_current(
    instance: ProInstance, sel: SelConfig, v_local: float, schedule: HidingSchedule
) -> float:
    """Supply draw of one oscillator: charge per period times frequency times
    active inverters, amplified by the IO driver when it is switched in.

    Disabled or stalled oscillators draw nothing.
    """
    if not sel.enabled:
        return 0.0
    try:
        f = instantaneous_frequency(instance, sel, v_local)
    except OscillatorStalled:
        return 0.0
    gain = schedule.io_gain if schedule.drive_io else 1.0
    return instance.design.switch_charge * f * active_inverters(instance.design, sel) * gain


@dataclass(frozen=True)
class SupplySweep:
    """Externally applied supply levels, strictly descending."""

    voltages: tuple[float, ...]

    def __post_init__(self):
        if not self.voltages:
            raise InputError("sweep needs at least one voltage")
        if any(v <= 0 for v in self.voltages):
            raise InputError("sweep voltages must be positive")
        if any(b >= a for a, b in zip(self.voltages, self.voltages[1:])):
            raise InputError("sweep voltages must be strictly descending")
