"""Turn frequency readings into verdicts.

Three consumers sit on top of the oscillator layer: baseline
characterization (per-sensor mean and spread under quiet conditions),
fault localization from a grid of frequency-drop ratios, and the
interval-by-interval anomaly classifier.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError
from .pro import CounterReading, ProDesign, all_shorting, frequency_from_counters, nominal_delay

# Alarm threshold in units of baseline spread, and the floor that keeps a
# zero-variance baseline from alarming on quantization jitter.
DEFAULT_ALARM_K = 6.0
DEFAULT_SIGMA_FLOOR_FRACTION = 5e-4

# A reading this far past the design maximum cannot be a real oscillation.
_CORRUPT_FREQUENCY_MULTIPLE = 10.0

_EVENT_KINDS = frozenset({"power-anomaly", "counter-corrupt", "em-shift", "stall"})

# Drop ratios are (f_off - f_on) / f_off; small negatives happen when noise
# nudges the loaded measurement above the unloaded one.
_RATIO_NOISE_FLOOR = -0.05


@dataclass(frozen=True)
class BaselineProfile:
    """Per-sensor (mean, sample std) of quiet-condition frequency."""

    stats: Mapping[str, tuple[float, float]]


@dataclass(frozen=True)
class AnomalyEvent:
    interval_index: int
    pro_id: str
    kind: str
    observed: float
    expected_low: float
    expected_high: float

    def __post_init__(self):
        if self.kind not in _EVENT_KINDS:
            raise InputError(f"unknown anomaly kind: {self.kind!r}")


@dataclass(frozen=True)
class DropRatioMatrix:
    """Relative frequency drops on the sensor grid, rows x columns."""

    ratios: np.ndarray

    def __post_init__(self):
        ratios = np.asarray(self.ratios, dtype=float)
        if ratios.ndim != 2 or ratios.size == 0:
            raise InputError("drop-ratio matrix must be a non-empty 2-D array")
        if not np.all(np.isfinite(ratios)):
            raise InputError("drop-ratio matrix contains non-finite entries")
        if np.any(ratios < _RATIO_NOISE_FLOOR):
            raise InputError("drop-ratio matrix has entries too negative to be noise")
        object.__setattr__(self, "ratios", ratios)


@dataclass(frozen=True)
class LocalizationReport:
    inferred_row: int
    region: str
    confidence: float
    row_means: np.ndarray
    region_means: tuple[float, float]


def drop_ratio(f_off: float, f_on: float) -> float:
    """Relative slowdown of a sensor when the disturbance is switched on."""
    if f_off <= 0:
        raise InputError("reference frequency must be positive")
    return (f_off - f_on) / f_off


def characterize(readings: Mapping[str, Sequence[CounterReading]]) -> BaselineProfile:
    """Baseline mean and sample std per sensor from repeated quiet readings.

    Every sensor needs at least two clean readings; a corrupted or stalled
    reading in the baseline set means the quiet-condition assumption was
    violated and the profile would be garbage.
    """
    stats: dict[str, tuple[float, float]] = {}
    for pro_id in sorted(readings):
        group = readings[pro_id]
        if len(group) < 2:
            raise InputError(f"sensor {pro_id!r} needs >= 2 baseline readings")
        if any(r.corrupted or r.stalled for r in group):
            raise InputError(f"sensor {pro_id!r} has corrupted or stalled baseline readings")
        freqs = np.array([frequency_from_counters(r) for r in group])
        stats[pro_id] = (float(freqs.mean()), float(freqs.std(ddof=1)))
    return BaselineProfile(stats=stats)


def detect_anomalies(
    intervals: Sequence[Mapping[str, CounterReading]],
    profile: BaselineProfile,
    design: ProDesign,
    alarm_k: float = DEFAULT_ALARM_K,
    sigma_floor_fraction: float = DEFAULT_SIGMA_FLOOR_FRACTION,
) -> list[AnomalyEvent]:
    """Classify each reading against the baseline band mean +- k*sigma.

    Classification precedence: a corrupted counter (flagged, or implying a
    frequency no oscillator in this design could reach) masks everything
    else, a stall masks band checks, and band violations split by sign:
    above band means something sped the ring up (field coupling), below
    band means its supply sagged.
    """
    if alarm_k <= 0 or sigma_floor_fraction <= 0:
        raise InputError("alarm parameters must be positive")
    f_ceiling = _CORRUPT_FREQUENCY_MULTIPLE / (2.0 * nominal_delay(design, all_shorting(design)))
    events: list[AnomalyEvent] = []
    for index, interval in enumerate(intervals):
        for pro_id in sorted(interval):
            if pro_id not in profile.stats:
                raise InputError(f"no baseline for sensor {pro_id!r}")
            mean, sigma = profile.stats[pro_id]
            band = alarm_k * max(sigma, sigma_floor_fraction * mean)
            low, high = mean - band, mean + band
            reading = interval[pro_id]
            observed = frequency_from_counters(reading)
            if reading.corrupted or observed > f_ceiling:
                kind = "counter-corrupt"
            elif reading.stalled:
                kind = "stall"
            elif observed > high:
                kind = "em-shift"
            elif observed < low:
                kind = "power-anomaly"
            else:
                continue
            events.append(AnomalyEvent(
                interval_index=index, pro_id=pro_id, kind=kind,
                observed=observed, expected_low=low, expected_high=high,
            ))
    return events


def locate_fault(matrix: DropRatioMatrix) -> LocalizationReport:
    """Point at the sensor row and column half that droop the most.

    Row scores are row means of the drop matrix; the winner is the argmax
    (lowest row on a tie). Left/right is decided by comparing the two
    column-half means, left winning ties; with an odd column count the
    middle column goes to the left half.
    """
    ratios = matrix.ratios
    row_means = ratios.mean(axis=1)
    inferred_row = int(np.argmax(row_means))
    ranked = np.sort(row_means)[::-1]
    confidence = float(ranked[0] - ranked[1]) if len(ranked) > 1 else float(ranked[0])
    half = (ratios.shape[1] + 1) // 2
    left = float(ratios[:, :half].mean())
    right = float(ratios[:, half:].mean()) if half < ratios.shape[1] else left
    region = "left" if left >= right else "right"
    return LocalizationReport(
        inferred_row=inferred_row,
        region=region,
        confidence=confidence,
        row_means=row_means,
        region_means=(left, right),
    )
