"""Scenario files: schema, defaults, strict validation, canonical hashing.

A scenario is a TOML file; every key has a default, unknown keys are
errors, and the fully merged configuration (the "canonical" dict) is what
gets hashed into run manifests. Two runs agree on physics if and only if
their canonical dicts agree.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import InputError
from .pdn import GridSpec
from .pro import MeasurementPlan, ProDesign, VoltageResponse, build_design, sel_from_id
from .stimuli import AesActivity, EmPulse, HidingSchedule, PowerWasterBank, SupplySweep

_ROUND_DURATION = 4.050550874918989e-08  # five 123.44 MHz periods
_AES_SPAN = 10 * _ROUND_DURATION

_PULSE_DEFAULTS = {
    "center_row": 4,
    "center_col": 3,
    "radius": 1.5,
    "amplitude": 0.5,
    "t_start": 2.81e-4,
    "t_width": 5e-7,
    "corrupt_threshold": 1.0,
    "rebound_duration": None,  # resolved to 10x t_width
}

_DEFAULTS = {
    "meta": {"name": "reference-9x8"},
    "seeds": {"master": 20220822},
    "grid": {
        "rows": 9,
        "cols": 8,
        "r_mesh": 0.05,
        "r_supply": 0.1,
        "l_node": 0.5e-9,
        "v_supply": 1.33,
    },
    "design": {
        "cell_inverters": [4, 4, 8, 8, 16, 16],
        "f_min": 22e6,
        "f_max": 123.44e6,
        "short_fraction": 0.05,
        "counter_width": 32,
        "switch_charge": 1.35e-10,
    },
    "response": {"v_nominal": 1.33, "v_threshold": 0.5, "alpha": 1.3},
    "floorplan": {
        "sensor_rows": 9,
        "sensor_cols": 4,
        "grid_columns": [1, 3, 5, 7],
        "variation_sigma": 0.01,
        "monitor_config": "000000",
    },
    "measurement": {
        "f_clk": 24e6,
        "duration": 4e-5,
        "repetitions": 16,
        "noise_sigma_v": 3e-4,
    },
    "wasters": {
        "count": 524,
        "region_rows": [1, 2],
        "region_cols": [0, 1, 2, 3],
        "i_per_waster": 0.0517,
        "i_base": 36.71,
        "f_waster": 245e6,
    },
    "waster_sweep": {
        "counts": [64, 128, 192, 256, 320, 384, 448, 512, 576],
        "region_rows": [1, 2],
        "region_cols": [0, 1, 2, 3, 4, 5, 6, 7],
        "repetitions": 4,
    },
    "supply_sweep": {
        "voltages": [1.33, 1.28, 1.23, 1.18, 1.13, 1.08, 1.03, 0.98, 0.93],
        "configs": ["000000", "110000", "111111"],
        "sensor": "pro-00",
        "repetitions": 8,
    },
    "em": {
        "rebound_fraction": 0.3,
        "coupling": 1.0,
        "monitoring_intervals": 12,
        "pulses": [dict(_PULSE_DEFAULTS, rebound_duration=5e-6)],
    },
    "aes": {
        "key": "2b7e151628aed2a6abf7158809cf4f3c",
        "region_rows": [3, 4, 5],
        "region_cols": [3, 4],
        "i_round_peak": 1.0,
        "round_duration": _ROUND_DURATION,
        "leak_scale": 0.002,
    },
    "hiding": {"interval": _ROUND_DURATION, "io_gain": 20.0, "drive_io": True},
    "sca": {
        "sample_rate": 987.52e6,
        "samples_per_trace": 400,
        "noise_sigma": 0.02,
        "shunt_gain": 1.0,
        "fixed_sel": "000000",
        "fixed_plaintext": "",
        "bandstop_width": 7.4064e6,
        "tvla_threshold": 4.5,
        "n0_ladder": [256, 512, 1024, 2048, 4096, 8192],
    },
}


def default_scenario_dict(rows: int = 9, cols: int = 8) -> dict:
    """Defaults for a rows x cols grid.

    Placement defaults (sensor columns, waster and victim regions, pulse
    centre) scale with the grid so that a scenario stating nothing but the
    grid dimensions still validates.
    """
    d = copy.deepcopy(_DEFAULTS)
    if rows == 9 and cols == 8:
        return d
    half = list(range(max(1, cols // 2)))
    low_rows = [r for r in (1, 2) if r < rows] or [0]
    sensor_cols = [c for c in (1, 3, 5, 7) if c < cols] or [0]
    mid_r, mid_c = rows // 2, cols // 2
    d["floorplan"]["sensor_rows"] = rows
    d["floorplan"]["sensor_cols"] = len(sensor_cols)
    d["floorplan"]["grid_columns"] = sensor_cols
    d["wasters"]["region_rows"] = low_rows
    d["wasters"]["region_cols"] = half
    d["waster_sweep"]["region_rows"] = low_rows
    d["waster_sweep"]["region_cols"] = list(range(cols))
    d["aes"]["region_rows"] = sorted({max(0, mid_r - 1), mid_r, min(rows - 1, mid_r + 1)})
    d["aes"]["region_cols"] = sorted({max(0, mid_c - 1), min(cols - 1, mid_c)})
    for pulse in d["em"]["pulses"]:
        pulse["center_row"] = mid_r
        pulse["center_col"] = max(0, mid_c - 1)
    return d


def _merge(base: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    if not isinstance(user, dict):
        raise InputError(f"scenario section {path or '<root>'} must be a table")
    for key, value in user.items():
        here = f"{path}{key}"
        if key not in base:
            raise InputError(f"unknown scenario key: {here}")
        if isinstance(base[key], dict):
            out[key] = _merge(base[key], value, here + ".")
        elif key == "pulses":
            if not isinstance(value, list):
                raise InputError("em.pulses must be an array of tables")
            out[key] = [_merge(_PULSE_DEFAULTS, p, here + ".") for p in value]
        else:
            out[key] = copy.deepcopy(value)
    return out


def _as_int(value, path, lo=None, hi=None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise InputError(f"{path} must be an integer, got {value!r}")
    if lo is not None and value < lo:
        raise InputError(f"{path} must be >= {lo}, got {value}")
    if hi is not None and value > hi:
        raise InputError(f"{path} must be <= {hi}, got {value}")
    return value


def _as_float(value, path, lo=None, strict_lo=False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InputError(f"{path} must be a number, got {value!r}")
    value = float(value)
    if lo is not None and (value <= lo if strict_lo else value < lo):
        op = ">" if strict_lo else ">="
        raise InputError(f"{path} must be {op} {lo}, got {value}")
    return value


def _as_bool(value, path) -> bool:
    if not isinstance(value, bool):
        raise InputError(f"{path} must be a boolean, got {value!r}")
    return value


def _as_str(value, path) -> str:
    if not isinstance(value, str):
        raise InputError(f"{path} must be a string, got {value!r}")
    return value


def _as_int_list(value, path, lo=None) -> list[int]:
    if not isinstance(value, list) or not value:
        raise InputError(f"{path} must be a non-empty list of integers")
    return [_as_int(v, path, lo=lo) for v in value]


def _as_float_list(value, path) -> list[float]:
    if not isinstance(value, list) or not value:
        raise InputError(f"{path} must be a non-empty list of numbers")
    return [_as_float(v, path) for v in value]


def _as_sel_id(value, path, n_cells: int) -> str:
    value = _as_str(value, path)
    if len(value) != n_cells or set(value) - {"0", "1"}:
        raise InputError(f"{path} must be a {n_cells}-character 0/1 string, got {value!r}")
    return value


def _as_key_hex(value, path, n_bytes) -> bytes:
    value = _as_str(value, path)
    try:
        raw = bytes.fromhex(value)
    except ValueError:
        raise InputError(f"{path} must be hex, got {value!r}") from None
    if len(raw) != n_bytes:
        raise InputError(f"{path} must be {n_bytes} bytes of hex, got {len(raw)}")
    return raw


def _region(rows, cols, grid: GridSpec, path: str) -> tuple[tuple[int, int], ...]:
    rows = _as_int_list(rows, path + ".region_rows", lo=0)
    cols = _as_int_list(cols, path + ".region_cols", lo=0)
    if max(rows) >= grid.rows or max(cols) >= grid.cols:
        raise InputError(
            f"{path} region rows {rows} x cols {cols} falls outside the "
            f"{grid.rows}x{grid.cols} grid"
        )
    return tuple(itertools.product(rows, cols))


@dataclass(frozen=True)
class SensorLayout:
    rows: int
    cols: int
    grid_columns: tuple[int, ...]
    variation_sigma: float
    monitor_config: str


@dataclass(frozen=True)
class MeasurementSettings:
    f_clk: float
    duration: float
    repetitions: int
    noise_sigma_v: float

    def plan(self, seed: int = 0) -> MeasurementPlan:
        return MeasurementPlan(self.duration, repetitions=self.repetitions, seed=seed)


@dataclass(frozen=True)
class WasterSweepSettings:
    counts: tuple[int, ...]
    region: tuple[tuple[int, int], ...]
    repetitions: int


@dataclass(frozen=True)
class SupplySweepSettings:
    sweep: SupplySweep
    configs: tuple[str, ...]
    sensor: str
    repetitions: int


@dataclass(frozen=True)
class EmSettings:
    pulses: tuple[EmPulse, ...]
    coupling: float
    monitoring_intervals: int


@dataclass(frozen=True)
class ScaSettings:
    sample_rate: float
    samples_per_trace: int
    noise_sigma: float
    shunt_gain: float
    fixed_sel: str
    fixed_plaintext: bytes | None
    bandstop_width: float
    tvla_threshold: float
    n0_ladder: tuple[int, ...]


@dataclass(frozen=True)
class Scenario:
    name: str
    master_seed: int
    grid: GridSpec
    design: ProDesign
    layout: SensorLayout
    measurement: MeasurementSettings
    wasters: PowerWasterBank
    waster_sweep: WasterSweepSettings
    supply_sweep: SupplySweepSettings
    em: EmSettings
    aes: AesActivity
    hiding: HidingSchedule
    sca: ScaSettings
    canonical: dict

    @property
    def digest(self) -> str:
        blob = json.dumps(self.canonical, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def sensor_nodes(self) -> dict[str, tuple[int, int]]:
        """Sensor id -> grid node, row-major over the sensor layout."""
        nodes = {}
        for r in range(self.layout.rows):
            for c in range(self.layout.cols):
                nodes[f"pro-{r * self.layout.cols + c:02d}"] = (r, self.layout.grid_columns[c])
        return nodes

    def monitor_sel(self):
        return sel_from_id(self.layout.monitor_config)


def scenario_from_dict(user: dict) -> Scenario:
    if not isinstance(user, dict):
        raise InputError("scenario root must be a table")
    grid_over = user.get("grid", {})
    if not isinstance(grid_over, dict):
        raise InputError("scenario section grid must be a table")
    base = default_scenario_dict(
        rows=_as_int(grid_over.get("rows", _DEFAULTS["grid"]["rows"]), "grid.rows", lo=1),
        cols=_as_int(grid_over.get("cols", _DEFAULTS["grid"]["cols"]), "grid.cols", lo=1),
    )
    merged = _merge(base, user)

    g = merged["grid"]
    grid = GridSpec(
        rows=_as_int(g["rows"], "grid.rows", lo=1),
        cols=_as_int(g["cols"], "grid.cols", lo=1),
        r_mesh=_as_float(g["r_mesh"], "grid.r_mesh", lo=0, strict_lo=True),
        r_supply=_as_float(g["r_supply"], "grid.r_supply", lo=0, strict_lo=True),
        l_node=_as_float(g["l_node"], "grid.l_node", lo=0),
        v_supply=_as_float(g["v_supply"], "grid.v_supply", lo=0, strict_lo=True),
    )

    r = merged["response"]
    response = VoltageResponse(
        v_nominal=_as_float(r["v_nominal"], "response.v_nominal", lo=0, strict_lo=True),
        v_threshold=_as_float(r["v_threshold"], "response.v_threshold", lo=0),
        alpha=_as_float(r["alpha"], "response.alpha", lo=0, strict_lo=True),
    )

    d = merged["design"]
    design = build_design(
        _as_int_list(d["cell_inverters"], "design.cell_inverters", lo=2),
        f_min=_as_float(d["f_min"], "design.f_min", lo=0, strict_lo=True),
        f_max=_as_float(d["f_max"], "design.f_max", lo=0, strict_lo=True),
        short_fraction=_as_float(d["short_fraction"], "design.short_fraction", lo=0, strict_lo=True),
        counter_width=_as_int(d["counter_width"], "design.counter_width", lo=16),
        response=response,
        switch_charge=_as_float(d["switch_charge"], "design.switch_charge", lo=0),
    )
    n_cells = len(design.cells)

    fp = merged["floorplan"]
    sensor_rows = _as_int(fp["sensor_rows"], "floorplan.sensor_rows", lo=1)
    sensor_cols = _as_int(fp["sensor_cols"], "floorplan.sensor_cols", lo=1)
    grid_columns = _as_int_list(fp["grid_columns"], "floorplan.grid_columns", lo=0)
    if sensor_rows > grid.rows:
        raise InputError(
            f"floorplan.sensor_rows = {sensor_rows} does not fit a {grid.rows}-row grid"
        )
    if len(grid_columns) != sensor_cols:
        raise InputError(
            f"floorplan.grid_columns needs {sensor_cols} entries, got {len(grid_columns)}"
        )
    if any(b <= a for a, b in zip(grid_columns, grid_columns[1:])):
        raise InputError("floorplan.grid_columns must be strictly increasing")
    if grid_columns[-1] >= grid.cols:
        raise InputError(
            f"floorplan.grid_columns {grid_columns} falls outside a {grid.cols}-column grid"
        )
    layout = SensorLayout(
        rows=sensor_rows,
        cols=sensor_cols,
        grid_columns=tuple(grid_columns),
        variation_sigma=_as_float(fp["variation_sigma"], "floorplan.variation_sigma", lo=0),
        monitor_config=_as_sel_id(fp["monitor_config"], "floorplan.monitor_config", n_cells),
    )

    m = merged["measurement"]
    measurement = MeasurementSettings(
        f_clk=_as_float(m["f_clk"], "measurement.f_clk", lo=0, strict_lo=True),
        duration=_as_float(m["duration"], "measurement.duration", lo=0, strict_lo=True),
        repetitions=_as_int(m["repetitions"], "measurement.repetitions", lo=2),
        noise_sigma_v=_as_float(m["noise_sigma_v"], "measurement.noise_sigma_v", lo=0),
    )

    w = merged["wasters"]
    wasters = PowerWasterBank(
        count=_as_int(w["count"], "wasters.count", lo=0),
        region=_region(w["region_rows"], w["region_cols"], grid, "wasters"),
        i_per_waster=_as_float(w["i_per_waster"], "wasters.i_per_waster", lo=0, strict_lo=True),
        i_base=_as_float(w["i_base"], "wasters.i_base", lo=0),
        f_waster=_as_float(w["f_waster"], "wasters.f_waster", lo=0, strict_lo=True),
        enabled=False,
    )

    ws = merged["waster_sweep"]
    sweep_counts = _as_int_list(ws["counts"], "waster_sweep.counts", lo=1)
    if len(sweep_counts) < 2:
        raise InputError("waster_sweep.counts needs at least two points to fit a line")
    waster_sweep = WasterSweepSettings(
        counts=tuple(sweep_counts),
        region=_region(ws["region_rows"], ws["region_cols"], grid, "waster_sweep"),
        repetitions=_as_int(ws["repetitions"], "waster_sweep.repetitions", lo=1),
    )

    sv = merged["supply_sweep"]
    supply_sweep = SupplySweepSettings(
        sweep=SupplySweep(tuple(_as_float_list(sv["voltages"], "supply_sweep.voltages"))),
        configs=tuple(
            _as_sel_id(c, "supply_sweep.configs", n_cells) for c in sv["configs"]
        ),
        sensor=_as_str(sv["sensor"], "supply_sweep.sensor"),
        repetitions=_as_int(sv["repetitions"], "supply_sweep.repetitions", lo=1),
    )

    e = merged["em"]
    rebound_fraction = _as_float(e["rebound_fraction"], "em.rebound_fraction", lo=0)
    pulses = []
    for i, p in enumerate(e["pulses"]):
        path = f"em.pulses[{i}]"
        row = _as_int(p["center_row"], path + ".center_row", lo=0, hi=grid.rows - 1)
        col = _as_int(p["center_col"], path + ".center_col", lo=0, hi=grid.cols - 1)
        t_width = _as_float(p["t_width"], path + ".t_width", lo=0, strict_lo=True)
        rebound = p["rebound_duration"]
        if rebound is None:
            rebound = 10 * t_width
        else:
            rebound = _as_float(rebound, path + ".rebound_duration", lo=0)
        p["rebound_duration"] = rebound  # resolved into the canonical dict
        pulses.append(
            EmPulse(
                center=(row, col),
                radius=_as_float(p["radius"], path + ".radius", lo=0),
                amplitude=_as_float(p["amplitude"], path + ".amplitude", lo=0),
                t_start=_as_float(p["t_start"], path + ".t_start", lo=0),
                t_width=t_width,
                corrupt_threshold=_as_float(p["corrupt_threshold"], path + ".corrupt_threshold", lo=0),
                rebound_fraction=rebound_fraction,
                rebound_duration=rebound,
            )
        )
    em = EmSettings(
        pulses=tuple(pulses),
        coupling=_as_float(e["coupling"], "em.coupling", lo=0),
        monitoring_intervals=_as_int(e["monitoring_intervals"], "em.monitoring_intervals", lo=1),
    )

    a = merged["aes"]
    aes = AesActivity(
        key=_as_key_hex(a["key"], "aes.key", 16),
        region=_region(a["region_rows"], a["region_cols"], grid, "aes"),
        i_round_peak=_as_float(a["i_round_peak"], "aes.i_round_peak", lo=0),
        round_duration=_as_float(a["round_duration"], "aes.round_duration", lo=0, strict_lo=True),
        leak_scale=_as_float(a["leak_scale"], "aes.leak_scale", lo=0),
    )

    seeds = merged["seeds"]
    master_seed = _as_int(seeds["master"], "seeds.master", lo=0)

    h = merged["hiding"]
    hiding = HidingSchedule(
        interval=_as_float(h["interval"], "hiding.interval", lo=0, strict_lo=True),
        seed=master_seed,
        drive_io=_as_bool(h["drive_io"], "hiding.drive_io"),
        io_gain=_as_float(h["io_gain"], "hiding.io_gain", lo=1.0),
    )

    s = merged["sca"]
    samples = _as_int(s["samples_per_trace"], "sca.samples_per_trace", lo=20)
    if samples % 10 != 0:
        raise InputError("sca.samples_per_trace must divide evenly into the ten rounds")
    fixed_pt = _as_str(s["fixed_plaintext"], "sca.fixed_plaintext")
    ladder = _as_int_list(s["n0_ladder"], "sca.n0_ladder", lo=1)
    if any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise InputError("sca.n0_ladder must be strictly increasing")
    sca = ScaSettings(
        sample_rate=_as_float(s["sample_rate"], "sca.sample_rate", lo=0, strict_lo=True),
        samples_per_trace=samples,
        noise_sigma=_as_float(s["noise_sigma"], "sca.noise_sigma", lo=0),
        shunt_gain=_as_float(s["shunt_gain"], "sca.shunt_gain", lo=0, strict_lo=True),
        fixed_sel=_as_sel_id(s["fixed_sel"], "sca.fixed_sel", n_cells),
        fixed_plaintext=_as_key_hex(fixed_pt, "sca.fixed_plaintext", 16) if fixed_pt else None,
        bandstop_width=_as_float(s["bandstop_width"], "sca.bandstop_width", lo=0, strict_lo=True),
        tvla_threshold=_as_float(s["tvla_threshold"], "sca.tvla_threshold", lo=0, strict_lo=True),
        n0_ladder=tuple(ladder),
    )

    scenario = Scenario(
        name=_as_str(merged["meta"]["name"], "meta.name"),
        master_seed=master_seed,
        grid=grid,
        design=design,
        layout=layout,
        measurement=measurement,
        wasters=wasters,
        waster_sweep=waster_sweep,
        supply_sweep=supply_sweep,
        em=em,
        aes=aes,
        hiding=hiding,
        sca=sca,
        canonical=merged,
    )
    if supply_sweep.sensor not in scenario.sensor_nodes():
        raise InputError(f"supply_sweep.sensor {supply_sweep.sensor!r} is not a placed sensor")
    return scenario


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such scenario file: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"could not parse scenario {path}: {exc}") from None
    return scenario_from_dict(raw)


def packaged_scenario_path() -> Path:
    return Path(str(resources.files("pro_sim").joinpath("data/reference.toml")))
