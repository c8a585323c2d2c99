"""
SSPD Detector Model
Bias-dependent detection efficiency and dark count rate, Gaussian timing jitter,
kinetic-inductance limited bias recovery and stochastic click generation
"""

import bisect
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import CalibrationMissingError, DomainError, ParameterError, SequencingError

logger = logging.getLogger(__name__)

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
# Recovery criterion: the wire counts again after C_REC time constants
C_REC = 2.5
DEFAULT_BIAS_RATIO_STAR = 0.9
DEFAULT_DARK_SLOPE = math.log(10.0) / 0.05
AFTER_PULSE_PROBABILITY = 0.0
WAVELENGTH_MATCH_NM = 0.5


class ClickCause(str, Enum):
    PHOTON = "photon"
    DARK = "dark"


class ResetModel(str, Enum):
    EXPONENTIAL = "exponential"
    DEAD_TIME = "dead_time"


@dataclass(frozen=True)
class DarkAnchor:
    """Dark count rate at the operating bias and its exponential slope"""
    bias_ratio_star: float = DEFAULT_BIAS_RATIO_STAR
    rate_cps: float = 100.0
    slope: float = DEFAULT_DARK_SLOPE


@dataclass(frozen=True)
class DeviceProfile:
    """One SSPD device: geometry, dc parameters and calibration anchors"""
    id: str
    area_um: Tuple[float, float]
    wire_width_nm: float
    pitch_nm: float
    thickness_nm: float
    fill_factor: float
    t_c_K: float
    i_c_uA: float
    r_20k_ohm: float
    l_k_uH: float
    de_anchors: Tuple[Tuple[float, float, float], ...]
    dark_anchor: DarkAnchor
    jitter_fwhm_ps: float
    load_ohm: float = 50.0
    latching_enabled: bool = False
    shunt_ohm: Optional[float] = 50.0
    polarization_coupling: float = 1.0
    reset_model: ResetModel = ResetModel.EXPONENTIAL
    notes: str = ""
    _curves: Dict[float, Tuple[Tuple[float, ...], Tuple[float, ...]]] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )

    def __post_init__(self):
        problems = []
        for name in ("wire_width_nm", "pitch_nm", "thickness_nm", "i_c_uA", "l_k_uH", "load_ohm"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0 (got {getattr(self, name)})")
        if self.pitch_nm > 0 and abs(self.fill_factor - self.wire_width_nm / self.pitch_nm) > 1e-9:
            problems.append(
                f"fill_factor {self.fill_factor} != wire_width_nm/pitch_nm "
                f"{self.wire_width_nm / self.pitch_nm:.6g}"
            )
        if not self.de_anchors:
            problems.append("de_anchors must contain at least one calibration point")
        if self.jitter_fwhm_ps < 0:
            problems.append("jitter_fwhm_ps must be >= 0")
        if not 0.0 <= self.polarization_coupling <= 1.0:
            problems.append("polarization_coupling must lie in [0, 1]")
        if self.shunt_ohm is not None and self.shunt_ohm <= 0:
            problems.append("shunt_ohm must be > 0 when set")
        anchor = self.dark_anchor
        if not 0.0 < anchor.bias_ratio_star <= 1.0:
            problems.append("dark_anchor.bias_ratio_star must lie in (0, 1]")
        if anchor.rate_cps < 0 or anchor.slope <= 0:
            problems.append("dark_anchor needs rate_cps >= 0 and slope > 0")

        grouped: Dict[float, List[Tuple[float, float]]] = {}
        for bias, wavelength, de in self.de_anchors:
            if not 0.0 < de <= 1.0:
                problems.append(f"de_fraction {de} at {wavelength} nm outside (0, 1]")
            if not 0.0 < bias <= 1.0:
                problems.append(f"anchor bias_ratio {bias} outside (0, 1]")
            grouped.setdefault(float(wavelength), []).append((float(bias), float(de)))
        for wavelength, points in grouped.items():
            biases = [b for b, _ in points]
            des = [d for _, d in points]
            if any(b2 <= b1 for b1, b2 in zip(biases, biases[1:])):
                problems.append(f"de_anchors at {wavelength} nm not strictly increasing in bias_ratio")
            if any(d2 < d1 for d1, d2 in zip(des, des[1:])):
                problems.append(f"de_anchors at {wavelength} nm decrease with bias_ratio")
            self._curves[wavelength] = (tuple(biases), tuple(des))

        if problems:
            raise ParameterError(f"invalid device profile {self.id!r}: " + "; ".join(problems))

    @property
    def wavelengths(self) -> List[float]:
        return sorted(self._curves)

    @property
    def bias_ratio_star(self) -> float:
        return self.dark_anchor.bias_ratio_star

    def curve(self, wavelength_nm: float) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
        for wavelength, points in self._curves.items():
            if abs(wavelength - wavelength_nm) <= WAVELENGTH_MATCH_NM:
                return points
        raise CalibrationMissingError(
            f"device {self.id!r} has no DE calibration at {wavelength_nm} nm "
            f"(anchored at {self.wavelengths})"
        )


@dataclass
class DetectorState:
    """Mutable per-session state of one detector channel"""
    bias_ratio_set: float
    last_fire_time_ns: Optional[float] = None
    latched: bool = False
    last_event_time_ns: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.bias_ratio_set <= 1.0:
            raise DomainError(f"bias_ratio_set must lie in (0, 1], got {self.bias_ratio_set}")


@dataclass(frozen=True, slots=True)
class DetectionEvent:
    time_ns: float
    channel: str
    cause: ClickCause


def _check_bias(bias_ratio: float) -> None:
    if not 0.0 <= bias_ratio <= 1.0 or math.isnan(bias_ratio):
        raise DomainError(f"bias_ratio must lie in [0, 1], got {bias_ratio}")


def efficiency_at_bias(profile: DeviceProfile, bias_ratio: float, wavelength_nm: float) -> float:
    """System DE by log-linear interpolation through the calibration anchors.

    Zero at zero bias, clamped to the top anchor above it. Below the lowest
    anchor the first segment's log slope is extended.
    """
    _check_bias(bias_ratio)
    biases, des = profile.curve(wavelength_nm)
    if bias_ratio == 0.0:
        return 0.0
    if bias_ratio >= biases[-1]:
        return des[-1]
    if len(biases) == 1:
        return des[0] * bias_ratio / biases[0]
    if bias_ratio <= biases[0]:
        slope = (math.log(des[1]) - math.log(des[0])) / (biases[1] - biases[0])
        return des[0] * math.exp(slope * (bias_ratio - biases[0]))
    i = bisect.bisect_right(biases, bias_ratio)
    b0, b1 = biases[i - 1], biases[i]
    w = (bias_ratio - b0) / (b1 - b0)
    return math.exp((1.0 - w) * math.log(des[i - 1]) + w * math.log(des[i]))


def dark_rate_at_bias(profile: DeviceProfile, bias_ratio: float) -> float:
    """R_d(b) = rate_cps * exp(k * (b - b*)) in counts per second"""
    _check_bias(bias_ratio)
    anchor = profile.dark_anchor
    return anchor.rate_cps * math.exp(anchor.slope * (bias_ratio - anchor.bias_ratio_star))


def recovery_time_constant_ns(profile: DeviceProfile) -> float:
    # L_k [uH] / R [ohm] in ns
    return profile.l_k_uH * 1e3 / profile.load_ohm


def recovered_bias(profile: DeviceProfile, dt_ns: Optional[float], bias_ratio_set: Optional[float] = None) -> float:
    """Bias ratio reached dt_ns after the last fire; the set bias if never fired"""
    if bias_ratio_set is None:
        bias_ratio_set = profile.bias_ratio_star
    if dt_ns is None:
        return bias_ratio_set
    if dt_ns < 0:
        raise DomainError(f"dt_ns must be >= 0, got {dt_ns}")
    tau = recovery_time_constant_ns(profile)
    if profile.reset_model == ResetModel.DEAD_TIME:
        return bias_ratio_set if dt_ns >= C_REC * tau else 0.0
    return bias_ratio_set * (1.0 - math.exp(-dt_ns / tau))


def max_count_rate(profile: DeviceProfile) -> float:
    """Maximum count rate in Hz, 1 / (C_REC * L_k / R_load)"""
    tau_s = recovery_time_constant_ns(profile) * 1e-9
    return 1.0 / (C_REC * tau_s)


def jitter_sigma_ps(profile: DeviceProfile) -> float:
    return profile.jitter_fwhm_ps / FWHM_PER_SIGMA


def sample_jitter_ns(profile: DeviceProfile, size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, jitter_sigma_ps(profile) * 1e-3, size)


def critical_current_density(i_c_uA: float, wire_width_nm: float, thickness_nm: float) -> float:
    """J_c = I_c / (width * thickness) in A/m^2"""
    if min(i_c_uA, wire_width_nm, thickness_nm) <= 0:
        raise DomainError("critical_current_density needs positive inputs")
    return (i_c_uA * 1e-6) / ((wire_width_nm * 1e-9) * (thickness_nm * 1e-9))


def sheet_resistance(r_20k_ohm: float, area_um: Sequence[float], wire_width_nm: float, pitch_nm: float) -> float:
    """Sheet resistance at 20 K in ohm per square from the meander design geometry"""
    if r_20k_ohm <= 0 or wire_width_nm <= 0 or pitch_nm <= 0 or min(area_um) <= 0:
        raise DomainError("sheet_resistance needs positive inputs")
    length_um = area_um[0] * area_um[1] / (pitch_nm * 1e-3)
    squares = length_um / (wire_width_nm * 1e-3)
    return r_20k_ohm / squares


def resistivity_20k(sheet_ohm: float, thickness_nm: float) -> float:
    """Film resistivity in ohm*m"""
    return sheet_ohm * thickness_nm * 1e-9


def reset(state: DetectorState) -> None:
    """Recover a latched wire (bias cycled off and on)"""
    if state.latched:
        logger.info("Detector reset after latching")
    state.latched = False
    state.last_fire_time_ns = None


def _advance(state: DetectorState, time_ns: float) -> None:
    if not math.isfinite(time_ns):
        raise SequencingError(f"non-finite event time {time_ns}")
    if state.last_event_time_ns is not None and time_ns < state.last_event_time_ns:
        raise SequencingError(
            f"arrival at {time_ns} ns precedes previous event at {state.last_event_time_ns} ns"
        )
    state.last_event_time_ns = time_ns


def _fire(profile: DeviceProfile, state: DetectorState, time_ns: float) -> None:
    state.last_fire_time_ns = time_ns
    if profile.latching_enabled and profile.shunt_ohm is None:
        state.latched = True
        logger.warning(f"Detector {profile.id} latched at {time_ns:.3f} ns (no shunt)")


def _effective_efficiency(profile: DeviceProfile, state: DetectorState, time_ns: float, wavelength_nm: float) -> float:
    dt = None if state.last_fire_time_ns is None else time_ns - state.last_fire_time_ns
    bias = recovered_bias(profile, dt, state.bias_ratio_set)
    return efficiency_at_bias(profile, bias, wavelength_nm) * profile.polarization_coupling


def detect(profile: DeviceProfile, state: DetectorState, arrival, rng: np.random.Generator,
           channel: Optional[str] = None) -> Optional[DetectionEvent]:
    """Stochastic click for one optical pulse; updates the detector state"""
    _advance(state, arrival.time_ns)
    if state.latched or arrival.n_photons <= 0:
        return None
    eta = _effective_efficiency(profile, state, arrival.time_ns, arrival.wavelength_nm)
    eta *= 1.0 - arrival.polarization_mismatch
    p_click = 1.0 - (1.0 - eta) ** arrival.n_photons
    if rng.random() >= p_click:
        return None
    click_time = arrival.time_ns + rng.normal(0.0, jitter_sigma_ps(profile) * 1e-3)
    _fire(profile, state, arrival.time_ns)
    return DetectionEvent(click_time, channel or profile.id, ClickCause.PHOTON)


def register_dark(profile: DeviceProfile, state: DetectorState, time_ns: float, rng: np.random.Generator,
                  channel: Optional[str] = None) -> Optional[DetectionEvent]:
    """Dark count candidate at time_ns, thinned by the recovered-bias dark rate"""
    _advance(state, time_ns)
    if state.latched:
        return None
    if state.last_fire_time_ns is not None:
        bias = recovered_bias(profile, time_ns - state.last_fire_time_ns, state.bias_ratio_set)
        keep = math.exp(profile.dark_anchor.slope * (bias - state.bias_ratio_set))
        if rng.random() >= keep:
            return None
    _fire(profile, state, time_ns)
    return DetectionEvent(time_ns, channel or profile.id, ClickCause.DARK)


def dark_times(profile: DeviceProfile, bias_ratio: float, window: Tuple[float, float],
               rng: np.random.Generator) -> np.ndarray:
    """Sorted dark count times of a homogeneous Poisson process over the window"""
    t0, t1 = window
    if t1 < t0:
        raise DomainError(f"window end {t1} precedes start {t0}")
    expected = dark_rate_at_bias(profile, bias_ratio) * (t1 - t0) * 1e-9
    if expected <= 0:
        return np.empty(0)
    count = rng.poisson(expected)
    return np.sort(rng.uniform(t0, t1, count))


def dark_events(profile: DeviceProfile, bias_ratio: float, window: Tuple[float, float],
                rng: np.random.Generator, channel: Optional[str] = None) -> List[DetectionEvent]:
    name = channel or profile.id
    return [DetectionEvent(float(t), name, ClickCause.DARK) for t in dark_times(profile, bias_ratio, window, rng)]


def with_operating_de(profile: DeviceProfile, device_id: str, de_at_operating: float,
                      wavelength_nm: float = 1550.0, **overrides) -> DeviceProfile:
    """Copy of a design preset rescaled so its DE at b* equals a measured value"""
    reference = efficiency_at_bias(profile, profile.bias_ratio_star, wavelength_nm)
    factor = de_at_operating / reference
    anchors = tuple((b, w, min(1.0, de * factor)) for b, w, de in profile.de_anchors)
    return replace(profile, id=device_id, de_anchors=anchors, **overrides)


class DetectorChannel:
    """One detector wired into a session: profile, state and channel name"""

    def __init__(self, profile: DeviceProfile, name: str, bias_ratio_set: Optional[float] = None):
        self.profile = profile
        self.name = name
        self.state = DetectorState(bias_ratio_set or profile.bias_ratio_star)
        self.photon_clicks = 0
        self.dark_clicks = 0
        self.arrivals = 0

    def process(self, arrival_times: np.ndarray, photon_counts: np.ndarray, dark: np.ndarray,
                wavelength_nm: float, rng: np.random.Generator) -> List[DetectionEvent]:
        """Run a time-ordered merge of photon arrivals and dark candidates through the wire"""
        profile, state = self.profile, self.state
        n_arrivals = len(arrival_times)
        times = np.concatenate([np.asarray(arrival_times, dtype=float), np.asarray(dark, dtype=float)])
        order = np.argsort(times, kind="stable")
        counts = np.asarray(photon_counts).tolist()
        times_list = times.tolist()
        sigma_ns = jitter_sigma_ps(profile) * 1e-3
        coupling = profile.polarization_coupling
        steady_eta = efficiency_at_bias(profile, state.bias_ratio_set, wavelength_nm) * coupling
        events: List[DetectionEvent] = []
        self.arrivals += n_arrivals

        for idx in order.tolist():
            t = times_list[idx]
            if idx >= n_arrivals:
                event = register_dark(profile, state, t, rng, self.name)
                if event is not None:
                    events.append(event)
                    self.dark_clicks += 1
                continue
            _advance(state, t)
            if state.latched:
                continue
            if state.last_fire_time_ns is None:
                eta = steady_eta
            else:
                bias = recovered_bias(profile, t - state.last_fire_time_ns, state.bias_ratio_set)
                eta = steady_eta if bias == state.bias_ratio_set else (
                    efficiency_at_bias(profile, bias, wavelength_nm) * coupling
                )
            if rng.random() >= 1.0 - (1.0 - eta) ** counts[idx]:
                continue
            events.append(DetectionEvent(t + rng.normal(0.0, sigma_ns), self.name, ClickCause.PHOTON))
            _fire(profile, state, t)
            self.photon_clicks += 1
        return events
