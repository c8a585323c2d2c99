"""
QKD Protocols
BB84 with vacuum and weak decoy states and BBM92 with entangled pairs:
sifting, QBER estimation, decoy-state bounds and asymptotic key rates
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, model_validator
from scipy import special

from detector_model import FWHM_PER_SIGMA, dark_rate_at_bias, efficiency_at_bias
from errors import DomainError, ParameterError, UndefinedEstimateError
from optical_layer import IntensityLabel, fiber_transmittance
from sim_engine import (
    EventLog,
    RngRegistry,
    coincidence_indices,
    default_coincidence_window_ns,
    run_session,
    slot_period_ns,
)

logger = logging.getLogger(__name__)

E0 = 0.5
DEFAULT_F_EC = 1.1
DEFAULT_BASIS_FACTOR = 0.5


@dataclass(frozen=True)
class TransmitterRecord:
    """Per-slot bit, basis and intensity label of the sending side"""
    slots: np.ndarray
    bits: np.ndarray
    bases: np.ndarray
    intensity: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ReceiverRecord:
    """Detected slots with the measured bit and basis; a slot may repeat on double clicks"""
    slots: np.ndarray
    bits: np.ndarray
    bases: np.ndarray


@dataclass(frozen=True)
class SiftedKey:
    positions: np.ndarray
    bits: np.ndarray
    reference_bits: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.bits.size)

    @property
    def errors(self) -> int:
        return int(np.count_nonzero(self.bits != self.reference_bits))

    def partition(self, label: str) -> "SiftedKey":
        if self.intensity is None:
            raise ParameterError("sifted key carries no intensity labels")
        keep = self.intensity == label
        return SiftedKey(self.positions[keep], self.bits[keep], self.reference_bits[keep], self.intensity[keep])


def _resolve_double_clicks(slots: np.ndarray, bits: np.ndarray,
                           rng: Optional[np.random.Generator]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bit per slot; slots where both detectors fired get a fair random bit"""
    frame = pd.DataFrame({"slot": np.asarray(slots, dtype=np.int64), "bit": np.asarray(bits, dtype=np.int8)})
    grouped = frame.groupby("slot", sort=True)["bit"].agg(["min", "max"])
    conflict = (grouped["min"] != grouped["max"]).to_numpy()
    resolved = grouped["min"].to_numpy().astype(np.int8)
    if conflict.any():
        if rng is None:
            raise DomainError("double clicks present but no random stream supplied to resolve them")
        resolved[conflict] = rng.integers(0, 2, int(conflict.sum()), dtype=np.int8)
    return grouped.index.to_numpy(), resolved, conflict


def collapse_clicks(log: EventLog, rng: Optional[np.random.Generator] = None) -> pd.DataFrame:
    """Gated clicks of one party reduced to one (time, bit) per slot, indexed by slot"""
    gated = log.within_gate
    if not gated.any():
        return pd.DataFrame({"time_ns": [], "bit": [], "double": []},
                            index=pd.Index([], name="slot", dtype=np.int64)).astype(
            {"time_ns": float, "bit": np.int8, "double": bool})
    channels = [c for c, g in zip(log.channels, gated) if g]
    slots = log.slot_index[gated]
    bits = np.array([int(c.rsplit(":", 1)[1]) for c in channels], dtype=np.int8)
    first_time = pd.Series(log.times[gated]).groupby(slots, sort=True).min()
    resolved_slots, resolved, conflict = _resolve_double_clicks(slots, bits, rng)
    return pd.DataFrame(
        {"time_ns": first_time.to_numpy(), "bit": resolved, "double": conflict},
        index=pd.Index(resolved_slots, name="slot"),
    )


def sift(tx: TransmitterRecord, rx: ReceiverRecord, rng: Optional[np.random.Generator] = None) -> SiftedKey:
    """Keep detected slots whose measurement basis matches the sender's"""
    slots, bits, _ = _resolve_double_clicks(rx.slots, rx.bits, rng)
    bases_by_slot = pd.Series(np.asarray(rx.bases), index=np.asarray(rx.slots, dtype=np.int64))
    bases_by_slot = bases_by_slot[~bases_by_slot.index.duplicated()]
    rx_bases = bases_by_slot.reindex(slots).to_numpy()

    tx_index = pd.Index(np.asarray(tx.slots, dtype=np.int64))
    where = tx_index.get_indexer(slots)
    known = where >= 0
    slots, bits, rx_bases, where = slots[known], bits[known], rx_bases[known], where[known]
    matched = np.asarray(tx.bases)[where] == rx_bases
    where = where[matched]
    return SiftedKey(
        positions=slots[matched],
        bits=bits[matched],
        reference_bits=np.asarray(tx.bits, dtype=np.int8)[where],
        intensity=None if tx.intensity is None else np.asarray(tx.intensity)[where],
    )


def estimate_qber(sifted: SiftedKey, sample_fraction: Optional[float] = None,
                  rng: Optional[np.random.Generator] = None) -> float:
    """Disagreement fraction over the sifted key or over a random disclosed sample"""
    n = len(sifted)
    if n == 0:
        raise UndefinedEstimateError("QBER is undefined for an empty sifted key")
    if sample_fraction is None:
        return sifted.errors / n
    if not 0.0 < sample_fraction <= 1.0:
        raise DomainError(f"sample_fraction must lie in (0, 1], got {sample_fraction}")
    if rng is None:
        raise DomainError("sampled QBER estimation needs a random stream")
    k = max(1, int(round(sample_fraction * n)))
    picked = rng.choice(n, size=k, replace=False)
    return float(np.count_nonzero(sifted.bits[picked] != sifted.reference_bits[picked])) / k


def binary_entropy(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"binary_entropy needs p in [0, 1], got {p}")
    return float((special.entr(p) + special.entr(1.0 - p)) / math.log(2.0))


def analytic_gain(intensity: float, eta_total: float, y0: float, e_det: float, e0: float = E0) -> Tuple[float, float]:
    """Gain and error rate of a Poisson source of the given mean through a lossy link"""
    if not 0.0 <= eta_total <= 1.0 or not 0.0 <= y0 <= 1.0:
        raise DomainError("eta_total and y0 must lie in [0, 1]")
    if not 0.0 <= e_det <= 0.5:
        raise DomainError(f"e_det must lie in [0, 0.5], got {e_det}")
    detected = -math.expm1(-eta_total * intensity)
    gain = y0 + detected
    if gain == 0.0:
        return 0.0, e0
    return gain, (e0 * y0 + e_det * detected) / gain


class DecoyBounds(NamedTuple):
    y1_lower: float
    e1_upper: float
    insecure: bool


def decoy_bounds(q_mu: float, q_nu: float, e_nu: float, y0: float, mu: float, nu: float,
                 e0: float = E0) -> DecoyBounds:
    """Vacuum + weak decoy lower bound on Y1 and upper bound on e1"""
    if not mu > nu > 0:
        raise ParameterError(f"decoy bounds need mu > nu > 0 (mu={mu}, nu={nu})")
    for name, value in (("q_mu", q_mu), ("q_nu", q_nu), ("e_nu", e_nu), ("y0", y0)):
        if not 0.0 <= value <= 1.0:
            raise DomainError(f"{name} must lie in [0, 1], got {value}")
    y1 = (mu / (mu * nu - nu * nu)) * (
        q_nu * math.exp(nu) - q_mu * math.exp(mu) * nu * nu / (mu * mu) - (mu * mu - nu * nu) / (mu * mu) * y0
    )
    if y1 <= 0.0:
        logger.warning(f"Decoy bound Y1_lower = {y1:.3e} <= 0; channel flagged insecure")
        return DecoyBounds(0.0, 0.5, True)
    e1 = (e_nu * q_nu * math.exp(nu) - e0 * y0) / (y1 * nu)
    clamped_y1, clamped_e1 = min(max(y1, 0.0), 1.0), min(max(e1, 0.0), 1.0)
    insecure = clamped_y1 != y1 or clamped_e1 != e1 or clamped_e1 > 0.5
    if insecure:
        logger.warning(f"Decoy bounds clamped (Y1_lower={y1:.3e}, e1_upper={e1:.3e}); flagged insecure")
    return DecoyBounds(clamped_y1, clamped_e1, insecure)


class KeyRate(NamedTuple):
    rate: float
    insecure: bool


def secure_key_rate(q_mu: float, e_mu: float, q1_lower: float, e1_upper: float,
                    f_ec: float = DEFAULT_F_EC, q: float = DEFAULT_BASIS_FACTOR) -> KeyRate:
    """Asymptotic decoy-state key rate per signal pulse, floored at zero"""
    if f_ec < 1.0:
        raise ParameterError(f"error-correction efficiency must be >= 1, got {f_ec}")
    rate = q * (q1_lower * (1.0 - binary_entropy(min(e1_upper, 1.0))) - q_mu * f_ec * binary_entropy(e_mu))
    if rate <= 0.0:
        return KeyRate(0.0, True)
    return KeyRate(rate, False)


def bbm92_secure_rate(coincidence_gain: float, qber: float, f_ec: float = DEFAULT_F_EC,
                      q: float = DEFAULT_BASIS_FACTOR) -> KeyRate:
    rate = q * coincidence_gain * (1.0 - (1.0 + f_ec) * binary_entropy(qber))
    if rate <= 0.0:
        return KeyRate(0.0, True)
    return KeyRate(rate, False)


def gate_capture(jitter_fwhm_ps: float, gate_width_ns: float) -> float:
    """Probability that a jittered click stays inside a centred gate"""
    sigma_ns = jitter_fwhm_ps / FWHM_PER_SIGMA * 1e-3
    if sigma_ns == 0.0:
        return 1.0
    return float(special.erf(gate_width_ns / 2.0 / (sigma_ns * math.sqrt(2.0))))


def gated_dark_probability(dark_cps: float, gate_width_ns: float, detectors: int = 2) -> float:
    """Probability of at least one dark click among a party's detectors in one gate"""
    return -math.expm1(-detectors * dark_cps * gate_width_ns * 1e-9)


class ErrorBudget(BaseModel):
    visibility: float
    multi_pair: float
    dark: float


class Bbm92Model(BaseModel):
    p_alice: float
    p_bob: float
    p_coincidence: float
    qber: float
    error_budget: ErrorBudget
    sifted_per_window: float
    secure_per_window: float


def bbm92_model(mean_pairs: float, eta_a: float, eta_b: float, dark_a: float, dark_b: float,
                e_vis: float, f_ec: float = DEFAULT_F_EC, q: float = DEFAULT_BASIS_FACTOR) -> Bbm92Model:
    """Closed-form per-window click, coincidence and QBER model of an entangled pair link"""
    for name, value in (("eta_a", eta_a), ("eta_b", eta_b), ("dark_a", dark_a), ("dark_b", dark_b)):
        if not 0.0 <= value <= 1.0:
            raise DomainError(f"{name} must lie in [0, 1], got {value}")
    if mean_pairs < 0:
        raise DomainError("mean_pairs must be >= 0")
    photon_a = -math.expm1(-mean_pairs * eta_a)
    photon_b = -math.expm1(-mean_pairs * eta_b)
    p_a = 1.0 - (1.0 - dark_a) * (1.0 - photon_a)
    p_b = 1.0 - (1.0 - dark_b) * (1.0 - photon_b)
    neither = (1.0 - dark_a) * (1.0 - dark_b) * math.exp(-mean_pairs * (eta_a + eta_b - eta_a * eta_b))
    p_ab = p_a + p_b - 1.0 + neither
    if p_ab <= 0.0:
        raise UndefinedEstimateError("no coincidences are possible on this link")
    correlated = p_ab - p_a * p_b
    budget = ErrorBudget(
        visibility=e_vis * correlated / p_ab,
        multi_pair=0.5 * photon_a * photon_b / p_ab,
        dark=0.5 * (p_a * p_b - photon_a * photon_b) / p_ab,
    )
    qber = budget.visibility + budget.multi_pair + budget.dark
    sifted = q * p_ab
    return Bbm92Model(
        p_alice=p_a,
        p_bob=p_b,
        p_coincidence=p_ab,
        qber=qber,
        error_budget=budget,
        sifted_per_window=sifted,
        secure_per_window=bbm92_secure_rate(p_ab, min(qber, 1.0), f_ec, q).rate,
    )


class IntensityGain(BaseModel):
    label: str
    mean_photons: float
    gain: float
    error_rate: float


class Bb84Model(BaseModel):
    eta: float
    y0: float
    gains: List[IntensityGain]
    y1_true: float
    y1_lower: Optional[float] = None
    e1_upper: Optional[float] = None
    q1_lower: Optional[float] = None
    insecure: bool = False
    rate_per_signal_pulse: float = 0.0
    sifted_per_slot: float
    secure_per_slot: float
    qber: float


def _by_label(settings) -> Dict[str, Any]:
    return {s.label.value: s for s in settings}


def bb84_model(eta: float, y0: float, e_det: float, intensities, f_ec: float = DEFAULT_F_EC,
               q: float = DEFAULT_BASIS_FACTOR, e0: float = E0) -> Bb84Model:
    """Analytic gains, decoy bounds and rates for a decoy BB84 link (signal-only key)"""
    settings = _by_label(intensities)
    gains = []
    for s in intensities:
        gain, error = analytic_gain(s.mean_photons, eta, y0, e_det, e0)
        gains.append(IntensityGain(label=s.label.value, mean_photons=s.mean_photons, gain=gain, error_rate=error))
    by_label = {g.label: g for g in gains}
    signal = by_label[IntensityLabel.SIGNAL.value]
    p_signal = settings[IntensityLabel.SIGNAL.value].probability
    sifted = p_signal * q * signal.gain

    model = dict(eta=eta, y0=y0, gains=gains, y1_true=y0 + eta - y0 * eta, sifted_per_slot=sifted,
                 secure_per_slot=0.0, qber=signal.error_rate, insecure=True)
    decoy = by_label.get(IntensityLabel.DECOY.value)
    if decoy is not None:
        bounds = decoy_bounds(signal.gain, decoy.gain, decoy.error_rate, y0, signal.mean_photons,
                              decoy.mean_photons, e0)
        mu = signal.mean_photons
        q1 = min(bounds.y1_lower * mu * math.exp(-mu), signal.gain)
        rate = secure_key_rate(signal.gain, signal.error_rate, q1, bounds.e1_upper, f_ec, q)
        model.update(y1_lower=bounds.y1_lower, e1_upper=bounds.e1_upper, q1_lower=q1,
                     insecure=bounds.insecure or rate.insecure, rate_per_signal_pulse=rate.rate,
                     secure_per_slot=min(p_signal * rate.rate, sifted))
    return Bb84Model(**model)


class IntensityTally(BaseModel):
    label: str
    mean_photons: float
    probability: float
    sent: int
    clicks: int
    gain: Optional[float]
    gain_model: float
    gain_z: Optional[float]
    sifted: int
    errors: int
    error_rate: Optional[float]
    error_rate_model: float


class DecoyAnalysis(BaseModel):
    intensities: List[IntensityTally]
    y0: Optional[float] = None
    y1_lower: Optional[float] = None
    e1_upper: Optional[float] = None
    q1_lower: Optional[float] = None
    insecure: bool = True


class ScalingLedger(BaseModel):
    clock_rate_hz: float
    simulated_slots: int
    simulated_seconds: float
    per_slot_to_per_second: float
    real_duration_s: Optional[float] = None
    sifted_bits_over_real_duration: Optional[float] = None
    secure_bits_over_real_duration: Optional[float] = None
    model_sifted_bits_over_real_duration: Optional[float] = None
    model_secure_bits_over_real_duration: Optional[float] = None


class ModelPrediction(BaseModel):
    transmittance: List[float]
    eta: List[float]
    dark_probability: float
    qber: float
    sifted_rate_per_slot: float
    sifted_rate_bps: float
    secure_rate_per_slot: float
    secure_rate_bps: float
    bb84: Optional[Bb84Model] = None
    bbm92: Optional[Bbm92Model] = None


class SessionReport(BaseModel):
    session: str
    protocol: str
    seed: int
    slots: int
    clicks: int
    gated_clicks: int
    double_clicks: int
    coincidences: Optional[int] = None
    coincidence_window_ns: Optional[float] = None
    sifted_bits: int
    sifted_errors: int
    sifted_rate_per_slot: float
    sifted_rate_bps: float
    qber: Optional[float]
    qber_sigma: Optional[float]
    qber_sample_fraction: Optional[float] = None
    secure_rate_per_slot: float
    secure_rate_bps: float
    insecure: bool
    decoy: Optional[DecoyAnalysis] = None
    model: ModelPrediction
    scaling: ScalingLedger
    tallies: Dict[str, int]
    calibration: Dict[str, Any]

    @model_validator(mode="after")
    def _rates_ordered(self):
        if self.secure_rate_per_slot > self.sifted_rate_per_slot * (1.0 + 1e-12):
            raise ValueError("secure rate exceeds sifted rate")
        if self.sifted_rate_per_slot > (self.clicks / self.slots if self.slots else 0.0) + 1e-15:
            raise ValueError("sifted rate exceeds click rate")
        if self.qber is not None and not 0.0 <= self.qber <= 1.0:
            raise ValueError("qber outside [0, 1]")
        return self


def _scaling(config, log: EventLog, sifted_per_slot: float, secure_per_slot: float,
             model: ModelPrediction) -> ScalingLedger:
    per_second = config.clock_rate_hz
    duration = config.real_duration_s

    def bits(rate: float) -> Optional[float]:
        return None if duration is None else rate * per_second * duration

    return ScalingLedger(
        clock_rate_hz=config.clock_rate_hz,
        simulated_slots=log.slots,
        simulated_seconds=log.slots / config.clock_rate_hz,
        per_slot_to_per_second=per_second,
        real_duration_s=duration,
        sifted_bits_over_real_duration=bits(sifted_per_slot),
        secure_bits_over_real_duration=bits(secure_per_slot),
        model_sifted_bits_over_real_duration=bits(model.sifted_rate_per_slot),
        model_secure_bits_over_real_duration=bits(model.secure_rate_per_slot),
    )


def _detector_terms(config) -> Tuple[float, float, float]:
    """(efficiency at the operating bias, gated dark probability per party, gate width in ns)"""
    profile = config.detector
    gate_ns = config.gate_fraction * slot_period_ns(config.clock_rate_hz)
    de = efficiency_at_bias(profile, config.bias_ratio, config.wavelength_nm)
    de *= profile.polarization_coupling * gate_capture(profile.jitter_fwhm_ps, gate_ns)
    dark = gated_dark_probability(dark_rate_at_bias(profile, config.bias_ratio), gate_ns)
    return de, dark, gate_ns


def bb84_prediction(config) -> ModelPrediction:
    de, y0, _ = _detector_terms(config)
    transmittance = fiber_transmittance(config.channels[0])
    eta = transmittance * de
    model = bb84_model(eta, y0, config.e_det, config.intensities, config.f_ec, config.q)
    return ModelPrediction(
        transmittance=[transmittance], eta=[eta], dark_probability=y0, qber=model.qber,
        sifted_rate_per_slot=model.sifted_per_slot, sifted_rate_bps=model.sifted_per_slot * config.clock_rate_hz,
        secure_rate_per_slot=model.secure_per_slot, secure_rate_bps=model.secure_per_slot * config.clock_rate_hz,
        bb84=model,
    )


def bbm92_prediction(config) -> ModelPrediction:
    de, dark, _ = _detector_terms(config)
    transmittance = [fiber_transmittance(arm) for arm in config.channels[:2]]
    eta = [t * de for t in transmittance]
    model = bbm92_model(config.mean_pairs, eta[0], eta[1], dark, dark, config.e_det, config.f_ec, config.q)
    return ModelPrediction(
        transmittance=transmittance, eta=eta, dark_probability=dark, qber=model.qber,
        sifted_rate_per_slot=model.sifted_per_window, sifted_rate_bps=model.sifted_per_window * config.clock_rate_hz,
        secure_rate_per_slot=model.secure_per_window,
        secure_rate_bps=model.secure_per_window * config.clock_rate_hz,
        bbm92=model,
    )


def _qber_with_sigma(config, key: SiftedKey, rng: np.random.Generator) -> Tuple[Optional[float], Optional[float]]:
    if len(key) == 0:
        logger.warning("Sifted key is empty; QBER left undefined")
        return None, None
    qber = estimate_qber(key, config.qber_sample_fraction, rng)
    n = len(key) if config.qber_sample_fraction is None else max(1, round(config.qber_sample_fraction * len(key)))
    return qber, math.sqrt(qber * (1.0 - qber) / n)


def analyse_bb84(config, log: EventLog) -> SessionReport:
    """Sift, estimate and bound a simulated BB84 event log"""
    rngs = RngRegistry(log.seed, config.id)
    logger.info("Step 1: Collapsing receiver clicks to slots")
    bob = collapse_clicks(log.party("bob"), rngs.get("sift"))
    emissions = log.emissions
    rx_slots = bob.index.to_numpy()
    tx = TransmitterRecord(
        slots=emissions.index.to_numpy(),
        bits=emissions["bit"].to_numpy() if len(emissions) else np.empty(0, dtype=np.int8),
        bases=emissions["basis"].to_numpy() if len(emissions) else np.empty(0, dtype=np.int8),
        intensity=emissions["intensity"].to_numpy() if len(emissions) else np.empty(0, dtype=object),
    )
    rx = ReceiverRecord(
        slots=rx_slots,
        bits=bob["bit"].to_numpy(),
        bases=emissions["bob_basis"].reindex(rx_slots).to_numpy() if len(emissions) else np.empty(0),
    )

    logger.info("Step 2: Sifting")
    key = sift(tx, rx)
    prediction = bb84_prediction(config)
    model_gains = {g.label: g for g in prediction.bb84.gains}
    clicked_labels = emissions["intensity"].reindex(rx_slots).to_numpy() if len(emissions) else np.empty(0)

    logger.info("Step 3: Per-intensity gains and error rates")
    tallies = []
    for setting in config.intensities:
        label = setting.label.value
        sent = log.tallies.get(f"sent_{label}", 0)
        clicks = int(np.count_nonzero(clicked_labels == label))
        part = key.partition(label)
        expected = model_gains[label]
        gain = clicks / sent if sent else None
        sigma = math.sqrt(expected.gain * (1.0 - expected.gain) / sent) if sent else 0.0
        tallies.append(IntensityTally(
            label=label, mean_photons=setting.mean_photons, probability=setting.probability,
            sent=sent, clicks=clicks, gain=gain, gain_model=expected.gain,
            gain_z=(gain - expected.gain) / sigma if gain is not None and sigma > 0 else None,
            sifted=len(part), errors=part.errors, error_rate=part.errors / len(part) if len(part) else None,
            error_rate_model=expected.error_rate,
        ))

    logger.info("Step 4: Decoy-state bounds")
    by_label = {t.label: t for t in tallies}
    signal = by_label[IntensityLabel.SIGNAL.value]
    decoy = DecoyAnalysis(intensities=tallies)
    rate = KeyRate(0.0, True)
    weak = by_label.get(IntensityLabel.DECOY.value)
    vacuum = by_label.get(IntensityLabel.VACUUM.value)
    if weak and vacuum and signal.gain is not None and weak.error_rate is not None and vacuum.gain is not None:
        bounds = decoy_bounds(signal.gain, weak.gain, weak.error_rate, vacuum.gain, signal.mean_photons,
                              weak.mean_photons)
        mu = signal.mean_photons
        q1 = min(bounds.y1_lower * mu * math.exp(-mu), signal.gain)
        if signal.error_rate is not None:
            rate = secure_key_rate(signal.gain, signal.error_rate, q1, bounds.e1_upper, config.f_ec, config.q)
        decoy = DecoyAnalysis(intensities=tallies, y0=vacuum.gain, y1_lower=bounds.y1_lower,
                              e1_upper=bounds.e1_upper, q1_lower=q1, insecure=bounds.insecure or rate.insecure)
    else:
        logger.warning("Not enough decoy statistics for bounds; secure rate set to 0")

    logger.info("Step 5: QBER and key rates")
    signal_key = key.partition(IntensityLabel.SIGNAL.value)
    qber, qber_sigma = _qber_with_sigma(config, signal_key, rngs.get("qber"))
    sifted_per_slot = len(signal_key) / log.slots if log.slots else 0.0
    p_signal = signal.sent / log.slots if log.slots else 0.0
    secure_per_slot = min(p_signal * rate.rate, sifted_per_slot)
    return SessionReport(
        session=config.id, protocol="bb84", seed=log.seed, slots=log.slots, clicks=len(log),
        gated_clicks=int(log.within_gate.sum()), double_clicks=int(bob["double"].sum()),
        sifted_bits=len(signal_key), sifted_errors=signal_key.errors,
        sifted_rate_per_slot=sifted_per_slot, sifted_rate_bps=sifted_per_slot * config.clock_rate_hz,
        qber=qber, qber_sigma=qber_sigma, qber_sample_fraction=config.qber_sample_fraction,
        secure_rate_per_slot=secure_per_slot, secure_rate_bps=secure_per_slot * config.clock_rate_hz,
        insecure=rate.insecure, decoy=decoy, model=prediction,
        scaling=_scaling(config, log, sifted_per_slot, secure_per_slot, prediction),
        tallies=log.tallies, calibration=config.ledger(),
    )


def analyse_bbm92(config, log: EventLog) -> SessionReport:
    """Coincidence match, sift and estimate a simulated BBM92 event log"""
    rngs = RngRegistry(log.seed, config.id)
    sift_rng = rngs.get("sift")
    logger.info("Step 1: Collapsing each party's clicks to slots")
    alice = collapse_clicks(log.party("alice"), sift_rng)
    bob = collapse_clicks(log.party("bob"), sift_rng)

    window = config.coincidence_window_ns
    if window is None:
        window = default_coincidence_window_ns(config.detector.jitter_fwhm_ps)
    logger.info(f"Step 2: Coincidence matching with a {window:.3f} ns window")
    pairs = coincidence_indices(alice["time_ns"].to_numpy(), bob["time_ns"].to_numpy(), window)
    ia = np.array([i for i, _ in pairs], dtype=np.int64)
    ib = np.array([j for _, j in pairs], dtype=np.int64)
    a_slots = alice.index.to_numpy()[ia]
    b_slots = bob.index.to_numpy()[ib]
    emissions = log.emissions

    logger.info("Step 3: Basis sifting")
    if pairs:
        tx = TransmitterRecord(a_slots, alice["bit"].to_numpy()[ia], emissions["alice_basis"].reindex(a_slots).to_numpy())
        # Matched-basis outcomes are anticorrelated, so Bob inverts his bit
        rx = ReceiverRecord(a_slots, (1 - bob["bit"].to_numpy()[ib]).astype(np.int8),
                            emissions["bob_basis"].reindex(b_slots).to_numpy())
        key = sift(tx, rx)
    else:
        empty = np.empty(0, dtype=np.int8)
        key = SiftedKey(np.empty(0, dtype=np.int64), empty, empty)

    logger.info("Step 4: QBER and key rates")
    prediction = bbm92_prediction(config)
    qber, qber_sigma = _qber_with_sigma(config, key, rngs.get("qber"))
    sifted_per_slot = len(key) / log.slots if log.slots else 0.0
    coincidence_gain = len(pairs) / log.slots if log.slots else 0.0
    secure_per_slot = 0.0
    insecure = True
    if qber is not None:
        rate = bbm92_secure_rate(coincidence_gain, qber, config.f_ec, config.q)
        secure_per_slot = min(rate.rate, sifted_per_slot)
        insecure = rate.insecure
    return SessionReport(
        session=config.id, protocol="bbm92", seed=log.seed, slots=log.slots, clicks=len(log),
        gated_clicks=int(log.within_gate.sum()),
        double_clicks=int(alice["double"].sum() + bob["double"].sum()),
        coincidences=len(pairs), coincidence_window_ns=window,
        sifted_bits=len(key), sifted_errors=key.errors,
        sifted_rate_per_slot=sifted_per_slot, sifted_rate_bps=sifted_per_slot * config.clock_rate_hz,
        qber=qber, qber_sigma=qber_sigma, qber_sample_fraction=config.qber_sample_fraction,
        secure_rate_per_slot=secure_per_slot, secure_rate_bps=secure_per_slot * config.clock_rate_hz,
        insecure=insecure, model=prediction,
        scaling=_scaling(config, log, sifted_per_slot, secure_per_slot, prediction),
        tallies=log.tallies, calibration=config.ledger(),
    )


ANALYSES = {"bb84": analyse_bb84, "bbm92": analyse_bbm92}


def analyse_session(config, log: EventLog) -> SessionReport:
    return ANALYSES[config.protocol](config, log)


def bb84_session(config, seed: int) -> SessionReport:
    if config.protocol != "bb84":
        raise ParameterError(f"session {config.id!r} is {config.protocol}, not bb84")
    return analyse_bb84(config, run_session(config, seed))


def bbm92_session(config, seed: int) -> SessionReport:
    if config.protocol != "bbm92":
        raise ParameterError(f"session {config.id!r} is {config.protocol}, not bbm92")
    return analyse_bbm92(config, run_session(config, seed))
