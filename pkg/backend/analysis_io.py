"""
Characterization and Reporting
Performance index, TCSPC histograms with FWHM extraction, bias sweeps,
device-set statistics and CSV/JSON/gnuplot export
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy import optimize, stats

from detector_model import (
    AFTER_PULSE_PROBABILITY,
    FWHM_PER_SIGMA,
    DetectionEvent,
    DetectorChannel,
    DeviceProfile,
    critical_current_density,
    dark_rate_at_bias,
    dark_times,
    efficiency_at_bias,
    max_count_rate,
    sample_jitter_ns,
)
from errors import DomainError, EmptyInputError, IllDefinedPeakError, OutputError

logger = logging.getLogger(__name__)

DEFAULT_BIN_WIDTH_PS = 4.0
DEFAULT_SYNC_RATE_HZ = 33e6
# Printed and recomputed indices disagreeing by more than this get a footnote
INDEX_TOLERANCE = 0.02
SWEEP_COLUMNS = ["bias_ratio", "de", "dark_cps"]
COMPARISON_COLUMNS = [
    "detector", "de_percent", "dark_cps", "jitter_ps", "after_pulse", "count_rate_hz",
    "performance_index", "performance_index_e6", "printed_index_e6", "operation_mode",
]


def performance_index(de_percent: float, dark_cps: float, jitter_ps: float) -> float:
    """DE(%) / (dark count rate in c/s * jitter in ps)"""
    if de_percent == 0:
        return 0.0
    if dark_cps <= 0 or jitter_ps <= 0:
        raise DomainError(f"performance index needs dark_cps > 0 and jitter_ps > 0 (got {dark_cps}, {jitter_ps})")
    return de_percent / (dark_cps * jitter_ps)


@dataclass(frozen=True)
class Histogram:
    bin_width_ps: float
    origin_ps: float
    counts: np.ndarray

    def __post_init__(self):
        if self.bin_width_ps <= 0:
            raise DomainError("bin_width_ps must be > 0")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def centres_ps(self) -> np.ndarray:
        return self.origin_ps + (np.arange(self.counts.size) + 0.5) * self.bin_width_ps

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"time_ps": self.centres_ps, "counts": self.counts})


def _times_ns(events: Union[Sequence[DetectionEvent], np.ndarray]) -> np.ndarray:
    if isinstance(events, np.ndarray):
        return events.astype(float)
    return np.fromiter((e.time_ns for e in events), dtype=float, count=len(events))


def tcspc_histogram(events: Union[Sequence[DetectionEvent], np.ndarray], sync_rate_hz: float = DEFAULT_SYNC_RATE_HZ,
                    bin_width_ps: float = DEFAULT_BIN_WIDTH_PS, origin_ps: Optional[float] = None) -> Histogram:
    """Fold click times modulo the sync period and bin them.

    The histogram spans one period starting at origin_ps, by default centred
    on sync phase zero.
    """
    if sync_rate_hz <= 0:
        raise DomainError(f"sync_rate_hz must be > 0, got {sync_rate_hz}")
    if bin_width_ps <= 0:
        raise DomainError(f"bin_width_ps must be > 0, got {bin_width_ps}")
    times_ps = _times_ns(events) * 1e3
    if times_ps.size == 0:
        raise EmptyInputError("tcspc_histogram needs at least one event")
    period_ps = 1e12 / sync_rate_hz
    if origin_ps is None:
        origin_ps = -period_ps / 2.0
    phase = np.mod(times_ps - origin_ps, period_ps)
    n_bins = int(math.ceil(period_ps / bin_width_ps))
    index = np.minimum((phase // bin_width_ps).astype(np.int64), n_bins - 1)
    return Histogram(bin_width_ps, origin_ps, np.bincount(index, minlength=n_bins))


def _half_max_crossing(counts: np.ndarray, start: int, step: int, half: float) -> float:
    """Offset in bins from `start` to the half-maximum crossing walking in `step` direction"""
    k = start
    while 0 <= k + step < counts.size and counts[k + step] > half:
        k += step
    outside = k + step
    if not 0 <= outside < counts.size:
        raise IllDefinedPeakError("peak does not fall below half maximum inside the histogram")
    inner, outer = counts[k], counts[outside]
    fraction = (inner - half) / (inner - outer)
    return (k - start) + fraction


def fwhm(histogram: Histogram) -> float:
    """Full width at half maximum by linear interpolation between bin centres"""
    counts = np.asarray(histogram.counts, dtype=float)
    if counts.size == 0 or counts.max() <= 0:
        raise IllDefinedPeakError("histogram is empty")
    peak = counts.max()
    if counts.min() == peak:
        raise IllDefinedPeakError("histogram is flat")
    half = peak / 2.0
    top = np.flatnonzero(counts == peak)
    # Maximal bins must share one contiguous run above half maximum
    if np.any(counts[top[0]:top[-1] + 1] <= half):
        raise IllDefinedPeakError("histogram has separate maximal regions")
    left = _half_max_crossing(counts, int(top[0]), -1, half)
    right = _half_max_crossing(counts, int(top[-1]), +1, half)
    return (left + right + (top[-1] - top[0])) * histogram.bin_width_ps


def _gaussian(x, amplitude, mean, sigma, background):
    return amplitude * np.exp(-0.5 * ((x - mean) / sigma) ** 2) + background


def gaussian_fwhm(histogram: Histogram) -> Tuple[float, Optional[float]]:
    """FWHM and its standard error from a Gaussian-plus-background fit"""
    centres = histogram.centres_ps
    counts = np.asarray(histogram.counts, dtype=float)
    rough = fwhm(histogram)
    peak = centres[int(np.argmax(counts))]
    near = np.abs(centres - peak) <= 4.0 * max(rough, histogram.bin_width_ps)
    x, y = centres[near], counts[near]
    guess = [y.max(), peak, max(rough / FWHM_PER_SIGMA, histogram.bin_width_ps / 2.0), float(np.median(counts))]
    popt, pcov = optimize.curve_fit(_gaussian, x, y, p0=guess, sigma=np.sqrt(np.maximum(y, 1.0)), maxfev=10000)
    sigma = abs(popt[2])
    if not np.isfinite(pcov[2, 2]):
        return FWHM_PER_SIGMA * sigma, None
    return FWHM_PER_SIGMA * sigma, FWHM_PER_SIGMA * float(np.sqrt(pcov[2, 2]))


def tcspc_run(profile: DeviceProfile, n_clicks: int, rng: np.random.Generator,
              sync_rate_hz: float = DEFAULT_SYNC_RATE_HZ, click_probability: float = 0.01,
              bias_ratio: Optional[float] = None) -> np.ndarray:
    """Simulated TCSPC acquisition: sorted click times (ns) of a pulse train plus dark background.

    Clicked pulses follow a Bernoulli process with the given per-pulse click
    probability, kept low so pile-up stays negligible.
    """
    if n_clicks <= 0:
        raise DomainError("n_clicks must be > 0")
    if not 0.0 < click_probability <= 1.0:
        raise DomainError("click_probability must lie in (0, 1]")
    period_ns = 1e9 / sync_rate_hz
    pulses = np.cumsum(rng.geometric(click_probability, n_clicks)) - 1
    photon_times = pulses * period_ns + sample_jitter_ns(profile, n_clicks, rng)
    bias = profile.bias_ratio_star if bias_ratio is None else bias_ratio
    span = (0.0, float(pulses[-1] + 1) * period_ns)
    dark = dark_times(profile, bias, span, rng)
    logger.info(f"TCSPC run: {n_clicks} photon clicks over {span[1] * 1e-9:.3f} s, {dark.size} dark counts")
    return np.sort(np.concatenate([photon_times, dark]))


class JitterSummary(BaseModel):
    device: str
    clicks: int
    sync_rate_hz: float
    bin_width_ps: float
    nominal_fwhm_ps: float
    fwhm_ps: float
    fit_fwhm_ps: float
    fit_fwhm_error_ps: Optional[float]
    tolerance_ps: float
    within_tolerance: bool
    summary: str


def jitter_summary(profile: DeviceProfile, histogram: Histogram, clicks: int, sync_rate_hz: float,
                   tolerance: float = 0.05) -> JitterSummary:
    width = fwhm(histogram)
    fitted, fit_error = gaussian_fwhm(histogram)
    allowed = tolerance * profile.jitter_fwhm_ps
    within = abs(width - profile.jitter_fwhm_ps) <= allowed
    return JitterSummary(
        device=profile.id,
        clicks=clicks,
        sync_rate_hz=sync_rate_hz,
        bin_width_ps=histogram.bin_width_ps,
        nominal_fwhm_ps=profile.jitter_fwhm_ps,
        fwhm_ps=width,
        fit_fwhm_ps=fitted,
        fit_fwhm_error_ps=fit_error,
        tolerance_ps=allowed,
        within_tolerance=within,
        summary=f"{profile.id}: timing jitter FWHM {fitted:.0f} ± {tolerance * fitted:.0f} ps "
                f"(half-max interpolation {width:.1f} ps, {histogram.bin_width_ps:g} ps bins)",
    )


def bias_sweep(profile: DeviceProfile, grid: Iterable[float], wavelength_nm: float = 1550.0) -> pd.DataFrame:
    rows = [
        (b, efficiency_at_bias(profile, b, wavelength_nm), dark_rate_at_bias(profile, b))
        for b in (float(x) for x in grid)
    ]
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


class DeMeasurement(BaseModel):
    device: str
    flux_cps: float
    duration_s: float
    photons: int
    clicks: int
    dark_clicks: int
    count_rate_hz: float
    expected_dark_rate_cps: float
    system_de: float


def system_de_measurement(profile: DeviceProfile, flux_cps: float, duration_s: float, rng: np.random.Generator,
                          bias_ratio: Optional[float] = None, wavelength_nm: float = 1550.0) -> DeMeasurement:
    """Count rate minus dark rate over the input photon flux, with CW Poisson photons"""
    if flux_cps <= 0 or duration_s <= 0:
        raise DomainError("flux_cps and duration_s must be > 0")
    end_ns = duration_s * 1e9
    n_photons = int(rng.poisson(flux_cps * duration_s))
    arrivals = np.sort(rng.uniform(0.0, end_ns, n_photons))
    channel = DetectorChannel(profile, profile.id, bias_ratio)
    dark = dark_times(profile, channel.state.bias_ratio_set, (0.0, end_ns), rng)
    events = channel.process(arrivals, np.ones(n_photons, dtype=np.int64), dark, wavelength_nm, rng)
    dark_rate = dark_rate_at_bias(profile, channel.state.bias_ratio_set)
    count_rate = len(events) / duration_s
    return DeMeasurement(
        device=profile.id,
        flux_cps=flux_cps,
        duration_s=duration_s,
        photons=n_photons,
        clicks=len(events),
        dark_clicks=channel.dark_clicks,
        count_rate_hz=count_rate,
        expected_dark_rate_cps=dark_rate,
        system_de=(count_rate - dark_rate) / flux_cps,
    )


class Spread(BaseModel):
    mean: float
    min: float
    max: float
    cv: float


class DeviceSetSummary(BaseModel):
    count: int
    wavelength_nm: float
    de: Spread
    j_c: Spread
    de_floor: float
    all_above_floor: bool
    j_c_tolerance: float
    j_c_within_tolerance: bool
    devices: List[Dict[str, Any]]


def _spread(values: np.ndarray) -> Spread:
    cv = float(stats.variation(values)) if values.size > 1 else 0.0
    return Spread(mean=float(values.mean()), min=float(values.min()), max=float(values.max()), cv=cv)


def device_set_stats(profiles: Sequence[DeviceProfile], de_floor: float = 0.01, wavelength_nm: float = 1550.0,
                     j_c_tolerance: float = 0.05) -> DeviceSetSummary:
    """Spread of operating-point DE and J_c across a set of like devices"""
    if not profiles:
        raise EmptyInputError("device_set_stats needs at least one device")
    de = np.array([efficiency_at_bias(p, p.bias_ratio_star, wavelength_nm) for p in profiles])
    j_c = np.array([critical_current_density(p.i_c_uA, p.wire_width_nm, p.thickness_nm) for p in profiles])
    j_c_spread = _spread(j_c)
    summary = DeviceSetSummary(
        count=len(profiles),
        wavelength_nm=wavelength_nm,
        de=_spread(de),
        j_c=j_c_spread,
        de_floor=de_floor,
        all_above_floor=bool(np.all(de > de_floor)),
        j_c_tolerance=j_c_tolerance,
        j_c_within_tolerance=j_c_spread.cv <= j_c_tolerance,
        devices=[{"id": p.id, "de": float(d), "j_c_A_per_m2": float(j)} for p, d, j in zip(profiles, de, j_c)],
    )
    if not summary.all_above_floor:
        below = [p.id for p, d in zip(profiles, de) if d <= de_floor]
        logger.warning(f"{len(below)} device(s) at or below the DE floor {de_floor:.3%}: {below}")
    return summary


@dataclass(frozen=True)
class ComparisonRow:
    detector: str
    de_percent: float
    dark_cps: float
    jitter_ps: float
    after_pulse: Optional[float] = None
    count_rate_hz: Optional[float] = None
    operation_mode: str = ""
    printed_index_e6: Optional[float] = None
    reference: str = ""

    @property
    def performance_index(self) -> float:
        return performance_index(self.de_percent, self.dark_cps, self.jitter_ps)


def comparison_row_from_device(profile: DeviceProfile, name: str, operation_mode: str = "",
                               printed_index_e6: Optional[float] = None, wavelength_nm: float = 1550.0,
                               reference: str = "") -> ComparisonRow:
    """Comparison row computed from a simulated device at its operating bias"""
    bias = profile.bias_ratio_star
    return ComparisonRow(
        detector=name,
        de_percent=100.0 * efficiency_at_bias(profile, bias, wavelength_nm),
        dark_cps=dark_rate_at_bias(profile, bias),
        jitter_ps=profile.jitter_fwhm_ps,
        after_pulse=AFTER_PULSE_PROBABILITY,
        count_rate_hz=max_count_rate(profile),
        operation_mode=operation_mode,
        printed_index_e6=printed_index_e6,
        reference=reference,
    )


def comparison_table(rows: Sequence[ComparisonRow]) -> Tuple[pd.DataFrame, List[str]]:
    """Detector comparison table plus footnotes for rows whose printed index disagrees"""
    if not rows:
        raise EmptyInputError("comparison_table needs at least one row")
    records, notes = [], []
    for row in rows:
        index = row.performance_index
        records.append({
            "detector": row.detector,
            "de_percent": row.de_percent,
            "dark_cps": row.dark_cps,
            "jitter_ps": row.jitter_ps,
            "after_pulse": row.after_pulse,
            "count_rate_hz": row.count_rate_hz,
            "performance_index": index,
            "performance_index_e6": index * 1e6,
            "printed_index_e6": row.printed_index_e6,
            "operation_mode": row.operation_mode,
        })
        printed = row.printed_index_e6
        if printed is not None and abs(index * 1e6 - printed) > INDEX_TOLERANCE * abs(printed):
            note = (
                f"{row.detector}{' ' + row.reference if row.reference else ''}: "
                f"DE {row.de_percent:g}% / ({row.dark_cps:g} c/s x {row.jitter_ps:g} ps) = "
                f"{index * 1e6:.1f} x 10^-6, printed as {printed:g} x 10^-6"
            )
            notes.append(note)
            logger.warning(f"Performance index discrepancy: {note}")
    return pd.DataFrame(records, columns=COMPARISON_COLUMNS), notes


def write_table(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        frame.to_csv(path, index=False, float_format="%.6g")
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e.strerror or e}") from e
    return path


def write_json(payload: Any, path: Union[str, Path]) -> Path:
    """Stable JSON (sorted keys, fixed indent) so reruns are byte-identical"""
    path = Path(path)
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")
    except (OSError, ValueError) as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    return path


def write_gnuplot_script(csv_path: Union[str, Path], script_path: Union[str, Path], x_column: str,
                         y_columns: Sequence[str], title: str = "", logscale_y: bool = False,
                         columns: Optional[Sequence[str]] = None) -> Path:
    """Gnuplot script plotting CSV columns against one another"""
    csv_path, script_path = Path(csv_path), Path(script_path)
    header = list(columns) if columns is not None else list(pd.read_csv(csv_path, nrows=0).columns)
    missing = [c for c in [x_column, *y_columns] if c not in header]
    if missing:
        raise DomainError(f"columns {missing} not in {csv_path.name} ({header})")
    x = header.index(x_column) + 1
    plots = ", \\\n     ".join(
        f"'{csv_path.name}' using {x}:{header.index(y) + 1} with linespoints title '{y}'" for y in y_columns
    )
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set title '{title}'" if title else "unset title",
        f"set xlabel '{x_column}'",
    ]
    if logscale_y:
        lines.append("set logscale y")
    lines.append(f"plot {plots}")
    try:
        script_path.write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise OutputError(f"cannot write {script_path}: {e.strerror or e}") from e
    return script_path
