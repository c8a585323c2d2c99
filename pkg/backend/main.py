"""
SSPD QKD Simulator
Batch command line: load a configuration, dispatch a subcommand, write and
validate its reports
"""

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from analysis_io import (
    DEFAULT_BIN_WIDTH_PS,
    DEFAULT_SYNC_RATE_HZ,
    SWEEP_COLUMNS,
    ComparisonRow,
    bias_sweep,
    comparison_row_from_device,
    comparison_table,
    device_set_stats,
    jitter_summary,
    system_de_measurement,
    tcspc_histogram,
    tcspc_run,
    write_gnuplot_script,
    write_json,
    write_table,
)
from batch_runner import BatchRunner, JobStatus
from config import DEFAULT_CONFIG, SimulatorConfig, load_config
from detector_model import (
    critical_current_density,
    dark_rate_at_bias,
    efficiency_at_bias,
    max_count_rate,
    recovery_time_constant_ns,
    resistivity_20k,
    sheet_resistance,
)
from errors import ConfigError, OutputError, SimulatorError
from sim_engine import CHUNK_SLOTS, rng_stream

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("characterize", "jitter", "bb84", "bbm92", "report")
LOG_FORMAT = "%(asctime)s [%(levelname)s] [%(name)s] %(message)s"
DEFAULT_SEED = 1
SWEEP_POINTS = 101
FLUX_CPS = 1e7


@dataclass
class RunManifest:
    """Everything needed to rerun a job exactly"""
    config_path: str
    subcommand: str
    seed: int
    output_dir: str
    overrides: Dict[str, Any] = field(default_factory=dict)
    chunk_slots: int = CHUNK_SLOTS
    resolved_defaults: Optional[Dict[str, Any]] = None

    def write(self) -> Path:
        return write_json(asdict(self), Path(self.output_dir) / "manifest.json")


def _profile_summary(config: SimulatorConfig, device_id: str, seed: int) -> Dict[str, Any]:
    profile = config.device(device_id)
    bias = profile.bias_ratio_star
    sheet = sheet_resistance(profile.r_20k_ohm, profile.area_um, profile.wire_width_nm, profile.pitch_nm)
    measured = system_de_measurement(profile, FLUX_CPS, 0.01, rng_stream(seed, f"characterize/{device_id}"))
    return {
        "id": profile.id,
        "bias_ratio_star": bias,
        "de_at_operating_point": {f"{w:g}": efficiency_at_bias(profile, bias, w) for w in profile.wavelengths},
        "dark_rate_cps": dark_rate_at_bias(profile, bias),
        "jitter_fwhm_ps": profile.jitter_fwhm_ps,
        "recovery_time_constant_ns": recovery_time_constant_ns(profile),
        "max_count_rate_hz": max_count_rate(profile),
        "critical_current_density_A_per_m2": critical_current_density(
            profile.i_c_uA, profile.wire_width_nm, profile.thickness_nm
        ),
        "sheet_resistance_ohm_per_sq": sheet,
        "resistivity_20k_ohm_m": resistivity_20k(sheet, profile.thickness_nm),
        "simulated_system_de": measured.model_dump(mode="json"),
        "notes": profile.notes,
    }


def run_characterize(config: SimulatorConfig, manifest: RunManifest, args) -> List[Path]:
    out = Path(manifest.output_dir)
    device_id = args.preset or "A"
    profile = config.device(device_id)
    logger.info(f"Step 1: Bias sweep of device {device_id} at {args.wavelength:g} nm")
    sweep = bias_sweep(profile, np.linspace(0.0, 1.0, SWEEP_POINTS), args.wavelength)
    paths = [write_table(sweep, out / "sweep.csv")]
    paths.append(write_gnuplot_script(
        out / "sweep.csv", out / "sweep.gp", "bias_ratio", ["de", "dark_cps"],
        title=f"Device {device_id}: system DE and dark count rate", logscale_y=True, columns=SWEEP_COLUMNS,
    ))

    logger.info("Step 2: Device constants and simulated system DE")
    paths.append(write_json(_profile_summary(config, device_id, manifest.seed), out / "device.json"))

    if config.document.device_set:
        logger.info("Step 3: Device-set statistics")
        spec, profiles = config.device_set()
        summary = device_set_stats(profiles, spec.de_floor, spec.wavelength_nm)
        paths.append(write_json(summary, out / "device_set.json"))
    return paths


def run_jitter(config: SimulatorConfig, manifest: RunManifest, args) -> List[Path]:
    out = Path(manifest.output_dir)
    profile = config.device(args.preset or "B")
    logger.info(f"Step 1: TCSPC acquisition of {args.clicks} clicks on {profile.id}")
    times = tcspc_run(profile, args.clicks, rng_stream(manifest.seed, f"jitter/{profile.id}"), DEFAULT_SYNC_RATE_HZ)
    logger.info("Step 2: Histogram and FWHM")
    histogram = tcspc_histogram(times, DEFAULT_SYNC_RATE_HZ, DEFAULT_BIN_WIDTH_PS)
    summary = jitter_summary(profile, histogram, int(times.size), DEFAULT_SYNC_RATE_HZ)
    occupied = histogram.to_frame()
    occupied = occupied[occupied["counts"] > 0]
    paths = [
        write_table(occupied, out / "histogram.csv"),
        write_json(summary, out / "jitter.json"),
    ]
    print(summary.summary)
    return paths


def _session_outputs(out: Path, result) -> List[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_json(result.report, out / "report.json"), write_json(result.log.summary(), out / "summary.json")]
    events = out / "events.csv"
    try:
        result.log.write_csv(events)
    except OSError as e:
        raise OutputError(f"cannot write {events}: {e.strerror or e}") from e
    paths.append(events)
    return paths


def _run_protocol(protocol: str) -> Callable:
    def handler(config: SimulatorConfig, manifest: RunManifest, args) -> List[Path]:
        session = config.session(args.session, protocol)
        detector = config.device(args.preset) if args.preset else None
        session = session.with_overrides(slots=args.slots, detector=detector)
        logger.info(f"Step 1: Simulating {protocol} session {session.id} ({session.slots} slots)")
        runner = BatchRunner(workers=args.workers)
        results = runner.run(session, manifest.seed, args.runs)

        logger.info("Step 2: Writing reports")
        out = Path(manifest.output_dir)
        failed = [r for r in results if r.status == JobStatus.FAILED]
        if args.runs == 1:
            if failed:
                raise failed[0].exception
            paths = _session_outputs(out, results[0])
            report = results[0].report
            print(
                f"{protocol} {session.id}: sifted {report.sifted_rate_bps:.4g} bps "
                f"(model {report.model.sifted_rate_bps:.4g}), QBER "
                f"{'n/a' if report.qber is None else f'{report.qber:.4f}'} (model {report.model.qber:.4f}), "
                f"secure {report.secure_rate_bps:.4g} bps (model {report.model.secure_rate_bps:.4g})"
            )
            return paths
        paths = []
        for result in results:
            if result.report is not None:
                paths.extend(_session_outputs(out / f"run_{result.run_index:03d}", result))
        paths.append(write_json(runner.summary(results), out / "runs.json"))
        if failed:
            raise SimulatorError(f"{len(failed)} of {len(results)} runs failed")
        return paths

    return handler


def comparison_rows(config: SimulatorConfig) -> List[ComparisonRow]:
    rows = []
    for entry in config.document.comparison:
        if entry.device is not None:
            rows.append(comparison_row_from_device(
                config.device(entry.device), entry.name, entry.operation_mode, entry.printed_index, reference=entry.reference
            ))
        else:
            rows.append(ComparisonRow(
                detector=entry.name, de_percent=entry.de_percent, dark_cps=entry.dark_cps, jitter_ps=entry.jitter_ps,
                after_pulse=entry.after_pulse, count_rate_hz=entry.count_rate_hz, operation_mode=entry.operation_mode,
                printed_index_e6=entry.printed_index, reference=entry.reference,
            ))
    if not rows:
        raise ConfigError("configuration defines no comparison rows")
    return rows


def run_report(config: SimulatorConfig, manifest: RunManifest, args) -> List[Path]:
    out = Path(manifest.output_dir)
    logger.info("Step 1: Performance index comparison table")
    table, notes = comparison_table(comparison_rows(config))
    paths = [write_table(table, out / "comparison.csv")]
    notes_path = out / "notes.txt"
    try:
        notes_path.write_text("".join(f"* {n}\n" for n in notes))
    except OSError as e:
        raise OutputError(f"cannot write {notes_path}: {e.strerror or e}") from e
    paths.append(notes_path)
    with pd.option_context("display.width", 160, "display.max_columns", 20):
        print(table[["detector", "de_percent", "dark_cps", "jitter_ps", "performance_index_e6", "printed_index_e6"]]
              .to_string(index=False))
    for note in notes:
        print(f"* {note}")
    return paths


HANDLERS: Dict[str, Callable] = {
    "characterize": run_characterize,
    "jitter": run_jitter,
    "bb84": _run_protocol("bb84"),
    "bbm92": _run_protocol("bbm92"),
    "report": run_report,
}


def validate_outputs(paths: List[Path]) -> None:
    """Re-read every written file; a file that does not parse fails the run"""
    for path in paths:
        if not path.exists():
            raise OutputError(f"expected output {path} was not written")
        try:
            if path.suffix == ".json":
                json.loads(path.read_text())
            elif path.suffix == ".csv":
                pd.read_csv(path)
            elif path.stat().st_size == 0 and path.suffix != ".txt":
                raise OutputError(f"output {path} is empty")
        except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise OutputError(f"output {path} failed validation: {e}") from e


def dispatch(subcommand: str, manifest: RunManifest, config: SimulatorConfig, args) -> int:
    handler = HANDLERS.get(subcommand)
    if handler is None:
        raise ConfigError(f"unknown subcommand {subcommand!r}; expected one of {list(SUBCOMMANDS)}")
    start = time.perf_counter()
    paths = handler(config, manifest, args)
    validate_outputs(paths)
    logger.info(
        f"{subcommand} finished in {time.perf_counter() - start:.2f}s: {len(paths)} output(s) in {manifest.output_dir}"
    )
    return 0


class CliParser(argparse.ArgumentParser):
    """Argument parser whose usage errors travel the JSON error path"""

    def error(self, message: str):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", default=str(DEFAULT_CONFIG), help="TOML configuration document")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help="master seed (non-negative integer)")
    common.add_argument("--out", default=None, help="output directory (default results/<subcommand>)")
    common.add_argument("--preset", default=None, help="device preset id")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = CliParser(description="SSPD detector and QKD link simulator")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    characterize = sub.add_parser("characterize", parents=[common], help="bias sweep and device constants")
    characterize.add_argument("--wavelength", type=float, default=1550.0)

    jitter = sub.add_parser("jitter", parents=[common], help="TCSPC jitter histogram and FWHM")
    jitter.add_argument("--clicks", type=int, default=1_000_000)

    for protocol in ("bb84", "bbm92"):
        session = sub.add_parser(protocol, parents=[common], help=f"{protocol} session report")
        session.add_argument("--session", default=None, help="session id (default: first of this protocol)")
        session.add_argument("--slots", type=int, default=None, help="override the session's slot count")
        session.add_argument("--runs", type=int, default=1, help="independent seeds to simulate")
        session.add_argument("--workers", type=int, default=1, help="process pool size")

    sub.add_parser("report", parents=[common], help="detector comparison table")
    return parser


def _overrides(args) -> Dict[str, Any]:
    keys = ("preset", "slots", "session", "runs", "workers", "clicks", "wavelength")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _fail(error: SimulatorError, out: Optional[Path]) -> int:
    payload = error.to_dict()
    if out is not None:
        try:
            write_json(payload, out / "error.json")
        except OutputError:
            pass
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return error.exit_status


def _requested_out(argv: Optional[List[str]]) -> Optional[Path]:
    """--out from a command line that failed to parse, if one can be read"""
    scan = CliParser(add_help=False)
    scan.add_argument("--out", default=None)
    try:
        known, _ = scan.parse_known_args(sys.argv[1:] if argv is None else argv)
    except ConfigError:
        return None
    if known.out is None:
        return None
    out = Path(known.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError:
        return None
    return out


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        logger.error(f"invalid command line: {e}")
        return _fail(e, _requested_out(argv))
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    out = Path(args.out or Path("results") / args.subcommand)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        return _fail(OutputError(f"cannot create {out}: {e.strerror or e}"), None)

    try:
        if args.seed < 0:
            raise ConfigError(f"--seed must be a non-negative integer, got {args.seed}")
        manifest = RunManifest(args.config, args.subcommand, args.seed, str(out), _overrides(args))
        manifest.write()
        config = load_config(args.config)
        manifest.resolved_defaults = config.resolved_defaults()
        manifest.write()
        return dispatch(args.subcommand, manifest, config, args)
    except SimulatorError as e:
        logger.error(f"{args.subcommand} failed: {e}")
        return _fail(e, out)
    except Exception as e:
        logger.exception(f"{args.subcommand} failed unexpectedly")
        error = SimulatorError(str(e))
        return _fail(error, out)


if __name__ == "__main__":
    sys.exit(main())
