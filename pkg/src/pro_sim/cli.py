"""Command-line surface: scenario loading, experiments, persistent reports.

Subcommands map one-to-one onto the orchestration entry points:
sweep-voltage, locate-fault, detect, sca, configs, validate.  Every
report is CSV with a fixed header; parse(emit(x)) == x holds for each
emitter here, and identical (scenario, seed) invocations rewrite every
output byte-for-byte.  The manifest.json carries the scenario digest and
wall-clock time and is the one file exempt from bit-identity.

Exit codes: 0 success, 2 input or validation problems, 3 convergence or
calibration failures, 4 internal invariants.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
import traceback
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__, sca
from .detect import AnomalyEvent, LocalizationReport
from .engine import (
    DropDetail,
    SupplyPoint,
    run_detection,
    run_localization,
    run_supply_sweep,
)
from .errors import InputError, InternalError, ProSimError
from .pro import config_table
from .scenario import Scenario, packaged_scenario_path, scenario_from_dict
from .trace_io import write_traces

_DEFAULT_OUT = "pro-sim-out"


# ----------------------------------------------------------- CSV helpers ---


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))    # round-trips exactly through float()
    return str(value)


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise InputError(f"expected 'true' or 'false' in CSV, got {text!r}")


def _emit(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _parse(text: str, header: list[str]) -> list[list[str]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != header:
        raise InputError(f"CSV header mismatch: expected {','.join(header)}")
    return rows[1:]


_SUPPLY_HEADER = ["supply_voltage", "sel_config_id", "mean_frequency", "sigma"]


def emit_supply_csv(points: list[SupplyPoint]) -> str:
    rows = [[p.supply_voltage, p.sel_config_id, p.mean_frequency, p.sigma] for p in points]
    return _emit(_SUPPLY_HEADER, rows)


def parse_supply_csv(text: str) -> list[SupplyPoint]:
    return [
        SupplyPoint(float(r[0]), r[1], float(r[2]), float(r[3]))
        for r in _parse(text, _SUPPLY_HEADER)
    ]


_DETECTION_HEADER = [
    "interval_index", "pro_id", "kind", "observed", "expected_low", "expected_high",
]


def emit_detection_csv(events: list[AnomalyEvent]) -> str:
    rows = [
        [e.interval_index, e.pro_id, e.kind, e.observed, e.expected_low, e.expected_high]
        for e in events
    ]
    return _emit(_DETECTION_HEADER, rows)


def parse_detection_csv(text: str) -> list[AnomalyEvent]:
    return [
        AnomalyEvent(int(r[0]), r[1], r[2], float(r[3]), float(r[4]), float(r[5]))
        for r in _parse(text, _DETECTION_HEADER)
    ]


_DETAILS_HEADER = ["pro_id", "row", "col", "f_off", "f_on", "drop_ratio"]


def emit_drop_details_csv(details) -> str:
    rows = [[d.sensor_id, d.row, d.col, d.f_off, d.f_on, d.ratio] for d in details]
    return _emit(_DETAILS_HEADER, rows)


def parse_drop_details_csv(text: str) -> list[DropDetail]:
    return [
        DropDetail(r[0], int(r[1]), int(r[2]), float(r[3]), float(r[4]), float(r[5]))
        for r in _parse(text, _DETAILS_HEADER)
    ]


_LOCALIZATION_HEADER = ["field", "value"]


def emit_localization_csv(report: LocalizationReport) -> str:
    rows = [
        ["inferred_row", report.inferred_row],
        ["region", report.region],
        ["confidence", report.confidence],
        ["region_left", report.region_means[0]],
        ["region_right", report.region_means[1]],
    ]
    for i, mean in enumerate(report.row_means):
        rows.append([f"row_mean_{i}", float(mean)])
    return _emit(_LOCALIZATION_HEADER, rows)


def parse_localization_csv(text: str) -> LocalizationReport:
    fields = dict(_parse(text, _LOCALIZATION_HEADER))
    row_means = []
    while f"row_mean_{len(row_means)}" in fields:
        row_means.append(float(fields[f"row_mean_{len(row_means)}"]))
    return LocalizationReport(
        inferred_row=int(fields["inferred_row"]),
        region=fields["region"],
        confidence=float(fields["confidence"]),
        row_means=np.array(row_means),
        region_means=(float(fields["region_left"]), float(fields["region_right"])),
    )


_HIDING_HEADER = [
    "mode", "seed", "n_traces", "tvla_max_abs_t", "tvla_leaking",
    "cpa_bytes_correct", "n0", "peak_frequency_hz", "peak_band_fraction",
    "filtered_cpa_bytes_correct", "tvla_threshold", "coverage_ok",
    "coverage_multiple", "coverage_f_max_hz", "coverage_f_clock_hz",
]


def emit_hiding_csv(report: sca.HidingReport) -> str:
    rows = []
    cov = report.coverage
    for e in report.entries:
        rows.append([
            e.mode, e.seed, e.n_traces, e.tvla_max_abs_t, e.tvla_leaking,
            e.cpa_bytes_correct, e.n0, e.peak_frequency_hz, e.peak_band_fraction,
            e.filtered_cpa_bytes_correct, report.tvla_threshold, cov.ok,
            cov.multiple, cov.f_max_achievable, cov.f_clock,
        ])
    return _emit(_HIDING_HEADER, rows)


def parse_hiding_csv(text: str) -> sca.HidingReport:
    from .pro import CoverageReport

    raw = _parse(text, _HIDING_HEADER)
    if not raw:
        raise InputError("hiding report CSV has no data rows")
    entries = tuple(
        sca.ModeEvaluation(
            mode=r[0],
            seed=int(r[1]),
            n_traces=int(r[2]),
            tvla_max_abs_t=float(r[3]),
            tvla_leaking=_parse_bool(r[4]),
            cpa_bytes_correct=int(r[5]),
            n0=int(r[6]) if r[6] else None,
            peak_frequency_hz=float(r[7]),
            peak_band_fraction=float(r[8]),
            filtered_cpa_bytes_correct=int(r[9]) if r[9] else None,
        )
        for r in raw
    )
    first = raw[0]
    coverage = CoverageReport(
        ok=_parse_bool(first[11]),
        multiple=float(first[12]),
        f_max_achievable=float(first[13]),
        f_clock=float(first[14]),
    )
    first_mode = entries[0].mode
    seeds = tuple(e.seed for e in entries if e.mode == first_mode)
    return sca.HidingReport(
        budget=entries[0].n_traces,
        seeds=seeds,
        tvla_threshold=float(first[10]),
        coverage=coverage,
        entries=entries,
    )


_CONFIGS_HEADER = ["inverter_count", "sel_config_id", "frequency_hz"]


def emit_configs_csv(table: list[tuple[int, str, float]]) -> str:
    return _emit(_CONFIGS_HEADER, [list(row) for row in table])


def parse_configs_csv(text: str) -> list[tuple[int, str, float]]:
    return [(int(r[0]), r[1], float(r[2])) for r in _parse(text, _CONFIGS_HEADER)]


# -------------------------------------------------------------- plumbing ---


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def _load(args) -> Scenario:
    path = Path(args.scenario) if args.scenario else packaged_scenario_path()
    if not path.is_file():
        raise InputError(f"no such scenario file: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"could not parse scenario {path}: {exc}") from None
    if getattr(args, "seed", None) is not None:
        raw.setdefault("seeds", {})["master"] = args.seed
    return scenario_from_dict(raw)


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path(_DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(out: Path, scenario: Scenario, outputs: dict[str, str | bytes], t0: float) -> None:
    for name, payload in outputs.items():
        data = payload.encode() if isinstance(payload, str) else payload
        _atomic_write(out / name, data)
    manifest = {
        "scenario_digest": scenario.digest,
        "tool_version": __version__,
        "master_seed": scenario.master_seed,
        "wall_clock_seconds": round(time.monotonic() - t0, 3),
        "outputs": sorted(outputs),
    }
    _atomic_write(out / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


# -------------------------------------------------------------- commands ---


def cmd_sweep_voltage(args) -> int:
    t0 = time.monotonic()
    scenario = _load(args)
    points = run_supply_sweep(scenario)
    out = _out_dir(args)
    _finish(out, scenario, {"supply_sweep.csv": emit_supply_csv(points)}, t0)
    volts = sorted({p.supply_voltage for p in points}, reverse=True)
    print(f"swept {len(volts)} supply voltages x {len(points) // max(len(volts), 1)} configs "
          f"-> {out / 'supply_sweep.csv'}")
    return 0


def cmd_locate_fault(args) -> int:
    t0 = time.monotonic()
    scenario = _load(args)
    run = run_localization(scenario)
    out = _out_dir(args)
    _finish(out, scenario, {
        "drop_matrix.csv": emit_drop_details_csv(run.details),
        "localization.csv": emit_localization_csv(run.report),
    }, t0)
    print(f"fault located: row {run.report.inferred_row}, {run.report.region} region "
          f"(confidence {run.report.confidence:.3f}) -> {out}")
    return 0


def cmd_detect(args) -> int:
    t0 = time.monotonic()
    scenario = _load(args)
    run = run_detection(scenario)
    out = _out_dir(args)
    _finish(out, scenario, {"detection_events.csv": emit_detection_csv(run.events)}, t0)
    kinds = {}
    for event in run.events:
        kinds[event.kind] = kinds.get(event.kind, 0) + 1
    summary = ", ".join(f"{k}: {v}" for k, v in sorted(kinds.items())) or "none"
    print(f"{len(run.events)} anomaly events over {len(run.intervals)} intervals "
          f"({summary}) -> {out / 'detection_events.csv'}")
    return 0


def cmd_sca(args) -> int:
    t0 = time.monotonic()
    scenario = _load(args)
    report = sca.evaluate_hiding(scenario, budget=args.traces)
    outputs: dict[str, str | bytes] = {"hiding_report.csv": emit_hiding_csv(report)}
    out = _out_dir(args)
    for mode in sca.MODES:
        ts = sca.synthesize_traces(
            scenario, args.traces, mode, tvla_classes=True, seed=scenario.master_seed
        )
        name = f"traces_{mode.replace('-', '_')}.prot"
        write_traces(out / name, ts)
        outputs[name] = (out / name).read_bytes()
    _finish(out, scenario, outputs, t0)
    for e in report.entries:
        n0 = f", n0={e.n0}" if e.n0 is not None else ""
        print(f"{e.mode:>10} seed {e.seed}: max|t|={e.tvla_max_abs_t:8.2f} "
              f"cpa {e.cpa_bytes_correct}/16{n0}")
    cov = report.coverage
    print(f"coverage: fastest config {cov.f_max_achievable / 1e6:.2f} MHz = "
          f"{cov.multiple:.2f}x clock ({'ok' if cov.ok else 'INSUFFICIENT'}) -> {out}")
    return 0


def cmd_configs(args) -> int:
    scenario = _load(args)
    table = config_table(scenario.design)
    print(f"{'inverters':>9}  {'sel':>8}  {'frequency_hz':>14}")
    for count, config_id, freq in table:
        print(f"{count:>9}  {config_id:>8}  {freq:>14.0f}")
    if args.out:
        out = _out_dir(args)
        _finish(out, scenario, {"configs.csv": emit_configs_csv(table)}, time.monotonic())
    return 0


def cmd_validate(args) -> int:
    scenario = _load(args)
    rows, cols = scenario.grid.shape
    print(f"scenario '{scenario.name}' OK: {rows}x{cols} grid, "
          f"{len(scenario.sensor_nodes())} sensors, digest {scenario.digest}")
    return 0


# --------------------------------------------------------------- parser ----


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pro-sim",
        description="Programmable ring-oscillator sensing and hiding simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", help="scenario TOML (default: packaged reference scenario)")
        p.add_argument("--seed", type=int, help="override the scenario's master seed")
        p.add_argument("--out", help=f"output directory (default: ./{_DEFAULT_OUT})")
        p.add_argument("--format", choices=["csv"], default="csv",
                       help="report format (csv only)")

    common(sub.add_parser("sweep-voltage", help="frequency vs supply voltage per config"))
    common(sub.add_parser("locate-fault", help="drop-ratio matrix and fault localization"))
    common(sub.add_parser("detect", help="baseline plus monitored intervals with EM pulses"))
    p_sca = sub.add_parser("sca", help="hiding evaluation: TVLA, CPA, spectra, filter attack")
    common(p_sca)
    p_sca.add_argument("--traces", type=int, default=1000, help="trace budget per mode")
    common(sub.add_parser("configs", help="print the achievable frequency table"))
    common(sub.add_parser("validate", help="parse and validate a scenario file"))
    return parser


_DISPATCH = {
    "sweep-voltage": cmd_sweep_voltage,
    "locate-fault": cmd_locate_fault,
    "detect": cmd_detect,
    "sca": cmd_sca,
    "configs": cmd_configs,
    "validate": cmd_validate,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        code = exc.code if exc.code is not None else 0
        return int(code) if isinstance(code, int) else 2
    try:
        return _DISPATCH[args.command](args)
    except ProSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception:
        traceback.print_exc()
        return InternalError.exit_code


if __name__ == "__main__":
    sys.exit(main())
