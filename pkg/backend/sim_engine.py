"""
Simulation Engine
Deterministic seeded event timeline: clocked emission slots routed through
channel and detectors, time-bin assignment and coincidence matching
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from detector_model import ClickCause, DetectionEvent, DetectorChannel, dark_times
from errors import DomainError, ParameterError, SequencingError
from optical_layer import emit_photon_numbers, fiber_transmittance, pair_numbers, thin

logger = logging.getLogger(__name__)

# Slots simulated per vectorised step; determinism holds per (config, seed, CHUNK_SLOTS)
CHUNK_SLOTS = 1 << 22
EVENT_COLUMNS = ["time_ns", "channel", "cause", "slot"]


def role_key(role: str) -> int:
    return int.from_bytes(hashlib.sha256(role.encode("utf-8")).digest()[:8], "little")


def rng_stream(seed: int, role: str) -> np.random.Generator:
    """Counter-based stream for one named role, independent of every other role"""
    if seed < 0:
        raise DomainError(f"seed must be a non-negative integer, got {seed}")
    sequence = np.random.SeedSequence(seed, spawn_key=(role_key(role),))
    return np.random.Generator(np.random.Philox(sequence))


class RngRegistry:
    """Named random streams of one session, created on first use"""

    def __init__(self, seed: int, session_id: str = "session"):
        self.seed = seed
        self.session_id = session_id
        self._streams: Dict[str, np.random.Generator] = {}

    def get(self, role: str) -> np.random.Generator:
        if role not in self._streams:
            self._streams[role] = rng_stream(self.seed, f"{self.session_id}/{role}")
        return self._streams[role]

    @property
    def roles(self) -> List[str]:
        return sorted(self._streams)


@dataclass(frozen=True)
class TimeBin:
    slot_index: int
    within_gate: bool


def slot_period_ns(clock_rate_hz: float) -> float:
    if clock_rate_hz <= 0:
        raise DomainError(f"clock_rate_hz must be > 0, got {clock_rate_hz}")
    return 1e9 / clock_rate_hz


def _check_gate(gate_fraction: float) -> None:
    if not 0.0 < gate_fraction <= 1.0:
        raise DomainError(f"gate_fraction must lie in (0, 1], got {gate_fraction}")


def assign_time_bin(time_ns: float, clock_rate_hz: float, gate_fraction: float) -> TimeBin:
    _check_gate(gate_fraction)
    period = slot_period_ns(clock_rate_hz)
    slot = math.floor(time_ns / period + 0.5)
    return TimeBin(slot, abs(time_ns - slot * period) <= gate_fraction * period / 2.0)


def assign_time_bins(times_ns: np.ndarray, clock_rate_hz: float,
                     gate_fraction: float) -> Tuple[np.ndarray, np.ndarray]:
    _check_gate(gate_fraction)
    period = slot_period_ns(clock_rate_hz)
    times_ns = np.asarray(times_ns, dtype=float)
    slots = np.floor(times_ns / period + 0.5).astype(np.int64)
    within = np.abs(times_ns - slots * period) <= gate_fraction * period / 2.0
    return slots, within


@dataclass
class EventLog:
    """Time-ordered detector clicks of one session with per-slot emission records"""
    seed: int
    clock_rate_hz: float
    slots: int
    gate_fraction: float = 1.0
    events: List[DetectionEvent] = field(default_factory=list)
    slot_index: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    within_gate: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=bool))
    emissions: pd.DataFrame = field(default_factory=pd.DataFrame)
    tallies: Dict[str, int] = field(default_factory=dict)
    session_id: str = ""
    protocol: str = ""

    def __post_init__(self):
        times = self.times
        if times.size > 1 and np.any(np.diff(times) < 0):
            raise SequencingError("event log is not sorted by time")
        if len(self.slot_index) != len(self.events) or len(self.within_gate) != len(self.events):
            raise ParameterError("slot_index and within_gate must align with events")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def times(self) -> np.ndarray:
        return np.fromiter((e.time_ns for e in self.events), dtype=float, count=len(self.events))

    @property
    def channels(self) -> List[str]:
        return [e.channel for e in self.events]

    def party(self, name: str) -> "EventLog":
        """View restricted to the channels of one party ("alice", "bob")"""
        keep = np.array([e.channel.split(":")[0] == name for e in self.events], dtype=bool)
        return EventLog(
            seed=self.seed,
            clock_rate_hz=self.clock_rate_hz,
            slots=self.slots,
            gate_fraction=self.gate_fraction,
            events=[e for e, k in zip(self.events, keep) if k],
            slot_index=self.slot_index[keep] if keep.size else self.slot_index,
            within_gate=self.within_gate[keep] if keep.size else self.within_gate,
            emissions=self.emissions,
            tallies=self.tallies,
            session_id=self.session_id,
            protocol=self.protocol,
        )

    def cause_counts(self) -> Dict[str, int]:
        counts = {cause.value: 0 for cause in ClickCause}
        for event in self.events:
            counts[event.cause.value] += 1
        return counts

    def to_frame(self) -> pd.DataFrame:
        slot = pd.Series(self.slot_index, dtype="int64").where(pd.Series(self.within_gate, dtype=bool))
        return pd.DataFrame({
            "time_ns": self.times,
            "channel": self.channels,
            "cause": [e.cause.value for e in self.events],
            "slot": slot.astype("Int64"),
        }, columns=EVENT_COLUMNS)

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.4f")

    def summary(self) -> Dict[str, object]:
        per_channel: Dict[str, int] = {}
        for event in self.events:
            per_channel[event.channel] = per_channel.get(event.channel, 0) + 1
        return {
            "session": self.session_id,
            "protocol": self.protocol,
            "seed": self.seed,
            "clock_rate_hz": self.clock_rate_hz,
            "slots": self.slots,
            "chunk_slots": CHUNK_SLOTS,
            "clicks": len(self.events),
            "gated_clicks": int(self.within_gate.sum()),
            "causes": self.cause_counts(),
            "channels": dict(sorted(per_channel.items())),
            "tallies": dict(sorted(self.tallies.items())),
        }


LogLike = Union[EventLog, Sequence[DetectionEvent]]


def _event_times(log: LogLike) -> np.ndarray:
    if isinstance(log, EventLog):
        return log.times
    return np.fromiter((e.time_ns for e in log), dtype=float, count=len(log))


def coincidence_indices(times_a: np.ndarray, times_b: np.ndarray, window_ns: float) -> List[Tuple[int, int]]:
    """Greedy earliest-first one-to-one matching of two sorted time lists"""
    if window_ns < 0:
        raise DomainError(f"coincidence window must be >= 0, got {window_ns}")
    times_a = np.asarray(times_a, dtype=float)
    times_b = np.asarray(times_b, dtype=float)
    for label, times in (("a", times_a), ("b", times_b)):
        if times.size > 1 and np.any(np.diff(times) < 0):
            raise SequencingError(f"coincidence input {label} is not sorted by time")
    ta, tb = times_a.tolist(), times_b.tolist()
    i = j = 0
    pairs: List[Tuple[int, int]] = []
    while i < len(ta) and j < len(tb):
        gap = tb[j] - ta[i]
        if abs(gap) <= window_ns:
            pairs.append((i, j))
            i += 1
            j += 1
        elif gap > 0:
            i += 1
        else:
            j += 1
    return pairs


def coincidences(log_a: LogLike, log_b: LogLike, window_ns: float) -> List[Tuple[DetectionEvent, DetectionEvent]]:
    events_a = log_a.events if isinstance(log_a, EventLog) else list(log_a)
    events_b = log_b.events if isinstance(log_b, EventLog) else list(log_b)
    pairs = coincidence_indices(_event_times(log_a), _event_times(log_b), window_ns)
    return [(events_a[i], events_b[j]) for i, j in pairs]


def default_coincidence_window_ns(jitter_fwhm_ps: float) -> float:
    return 2.0 * jitter_fwhm_ps * 1e-3


class _Timeline:
    """Chunked slot loop shared by both protocols"""

    channel_names: Tuple[str, ...] = ()
    protocol = ""

    def __init__(self, config, rngs: RngRegistry):
        self.config = config
        self.rngs = rngs
        self.period_ns = slot_period_ns(config.clock_rate_hz)
        self.detectors = {
            name: DetectorChannel(config.detector, name, config.bias_ratio) for name in self.channel_names
        }
        self.tallies: Dict[str, int] = {"photons_emitted": 0, "photons_arrived": 0}
        self._chunk: Dict[str, np.ndarray] = {}

    def emit(self, s0: int, s1: int) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        raise NotImplementedError

    def slot_records(self, rel: np.ndarray) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def run(self) -> EventLog:
        cfg = self.config
        events: List[DetectionEvent] = []
        slot_parts: List[np.ndarray] = []
        gate_parts: List[np.ndarray] = []
        frames: List[pd.DataFrame] = []
        empty = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))

        for s0 in range(0, cfg.slots, CHUNK_SLOTS):
            s1 = min(s0 + CHUNK_SLOTS, cfg.slots)
            photons = self.emit(s0, s1)
            window = ((s0 - 0.5) * self.period_ns, (s1 - 0.5) * self.period_ns)
            chunk: List[DetectionEvent] = []
            for name, channel in self.detectors.items():
                slots, counts = photons.get(name, empty)
                dark = dark_times(cfg.detector, channel.state.bias_ratio_set, window, self.rngs.get(f"dark:{name}"))
                chunk.extend(channel.process(
                    slots * self.period_ns, counts, dark, cfg.wavelength_nm, self.rngs.get(f"detector:{name}")
                ))
            chunk.sort(key=lambda e: e.time_ns)
            slots, within = assign_time_bins([e.time_ns for e in chunk], cfg.clock_rate_hz, cfg.gate_fraction)
            within &= (slots >= s0) & (slots < s1)
            if within.any():
                kept = np.unique(slots[within])
                frames.append(pd.DataFrame(self.slot_records(kept - s0), index=pd.Index(kept, name="slot")))
            events.extend(chunk)
            slot_parts.append(slots)
            gate_parts.append(within)
            logger.debug(f"Chunk {s0}-{s1}: {len(chunk)} clicks")

        times = np.fromiter((e.time_ns for e in events), dtype=float, count=len(events))
        order = np.argsort(times, kind="stable")
        slot_index = np.concatenate(slot_parts)[order] if slot_parts else np.empty(0, dtype=np.int64)
        within_gate = np.concatenate(gate_parts)[order] if gate_parts else np.empty(0, dtype=bool)

        self.tallies["slots"] = cfg.slots
        self.tallies["photon_clicks"] = sum(d.photon_clicks for d in self.detectors.values())
        self.tallies["dark_clicks"] = sum(d.dark_clicks for d in self.detectors.values())
        log = EventLog(
            seed=self.rngs.seed,
            clock_rate_hz=cfg.clock_rate_hz,
            slots=cfg.slots,
            gate_fraction=cfg.gate_fraction,
            events=[events[i] for i in order.tolist()],
            slot_index=slot_index,
            within_gate=within_gate,
            emissions=pd.concat(frames) if frames else pd.DataFrame(index=pd.Index([], name="slot", dtype=np.int64)),
            tallies={k: int(v) for k, v in self.tallies.items()},
            session_id=cfg.id,
            protocol=self.protocol,
        )
        logger.info(f"Session {cfg.id}: {len(log)} clicks over {cfg.slots} slots")
        return log


class Bb84Timeline(_Timeline):
    """Decoy-modulated weak coherent pulses to a two-detector active-basis receiver"""

    channel_names = ("bob:0", "bob:1")
    protocol = "bb84"

    def __init__(self, config, rngs: RngRegistry):
        super().__init__(config, rngs)
        self.labels = np.array([s.label.value for s in config.intensities])
        self.means = np.array([s.mean_photons for s in config.intensities], dtype=float)
        cumulative = np.cumsum([s.probability for s in config.intensities])
        cumulative[-1] = 1.0
        self.cumulative = cumulative
        self.transmittance = fiber_transmittance(config.channels[0])
        for label in self.labels:
            self.tallies[f"sent_{label}"] = 0

    def emit(self, s0: int, s1: int) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        n = s1 - s0
        alice, bob = self.rngs.get("alice"), self.rngs.get("bob")
        codes = np.searchsorted(self.cumulative, alice.random(n), side="right")
        bits = alice.integers(0, 2, n, dtype=np.int8)
        bases = alice.integers(0, 2, n, dtype=np.int8)
        photons = emit_photon_numbers(self.means[codes], alice)
        bob_bases = bob.integers(0, 2, n, dtype=np.int8)
        self._chunk = {"codes": codes, "bits": bits, "bases": bases, "bob_bases": bob_bases}
        for i, count in enumerate(np.bincount(codes, minlength=len(self.labels)).tolist()):
            self.tallies[f"sent_{self.labels[i]}"] += count

        sent = np.flatnonzero(photons)
        arrived = thin(photons[sent], self.transmittance, self.rngs.get("channel"))
        keep = arrived > 0
        idx, k = sent[keep], arrived[keep]
        self.tallies["photons_emitted"] += int(photons.sum())
        self.tallies["photons_arrived"] += int(k.sum())

        # Each photon lands on the detector of Alice's bit unless misaligned or measured in the other basis
        matched = bases[idx] == bob_bases[idx]
        correct = bob.binomial(k, np.where(matched, 1.0 - self.config.e_det, 0.5))
        wrong = k - correct
        target = bits[idx]
        routed = {}
        for d in (0, 1):
            counts = np.where(target == d, correct, wrong)
            hit = counts > 0
            routed[f"bob:{d}"] = (s0 + idx[hit], counts[hit])
        return routed

    def slot_records(self, rel: np.ndarray) -> Dict[str, np.ndarray]:
        c = self._chunk
        return {
            "intensity": self.labels[c["codes"][rel]],
            "bit": c["bits"][rel],
            "basis": c["bases"][rel],
            "bob_basis": c["bob_bases"][rel],
        }


class Bbm92Timeline(_Timeline):
    """Mid-point entangled pair source with a two-detector receiver on each arm"""

    channel_names = ("alice:0", "alice:1", "bob:0", "bob:1")
    protocol = "bbm92"

    def __init__(self, config, rngs: RngRegistry):
        super().__init__(config, rngs)
        self.transmittance = tuple(fiber_transmittance(arm) for arm in config.channels[:2])
        self.tallies.update(pairs_emitted=0, multi_pair_windows=0)

    def emit(self, s0: int, s1: int) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        n = s1 - s0
        cfg = self.config
        source, channel = self.rngs.get("pairs"), self.rngs.get("channel")
        pairs = pair_numbers(cfg.mean_pairs, n, source, cfg.single_pair_only)
        a_bases = self.rngs.get("alice").integers(0, 2, n, dtype=np.int8)
        b_bases = self.rngs.get("bob").integers(0, 2, n, dtype=np.int8)
        self._chunk = {"pairs": pairs, "alice_basis": a_bases, "bob_basis": b_bases}

        windows = np.flatnonzero(pairs)
        owner = np.repeat(windows, pairs[windows])
        m = owner.size
        self.tallies["pairs_emitted"] += m
        self.tallies["multi_pair_windows"] += int(np.count_nonzero(pairs >= 2))
        self.tallies["photons_emitted"] += 2 * m

        alice_det = source.integers(0, 2, m, dtype=np.int8)
        flip = (source.random(m) < cfg.e_det).astype(np.int8)
        matched = a_bases[owner] == b_bases[owner]
        bob_det = np.where(matched, (1 - alice_det) ^ flip, source.integers(0, 2, m, dtype=np.int8))
        survive_a = channel.random(m) < self.transmittance[0]
        survive_b = channel.random(m) < self.transmittance[1]
        self.tallies["photons_arrived"] += int(survive_a.sum() + survive_b.sum())

        routed = {}
        for party, detector, survive in (("alice", alice_det, survive_a), ("bob", bob_det, survive_b)):
            for d in (0, 1):
                slots, counts = np.unique(owner[survive & (detector == d)], return_counts=True)
                routed[f"{party}:{d}"] = (s0 + slots, counts)
        return routed

    def slot_records(self, rel: np.ndarray) -> Dict[str, np.ndarray]:
        c = self._chunk
        return {"pairs": c["pairs"][rel], "alice_basis": c["alice_basis"][rel], "bob_basis": c["bob_basis"][rel]}


TIMELINES = {"bb84": Bb84Timeline, "bbm92": Bbm92Timeline}


def run_session(config, seed: int) -> EventLog:
    """Simulate one session; (config, seed) fixes every click bit for bit"""
    timeline = TIMELINES.get(config.protocol)
    if timeline is None:
        raise ParameterError(f"unknown protocol {config.protocol!r}; expected one of {sorted(TIMELINES)}")
    logger.info(f"Starting {config.protocol} session {config.id}: {config.slots} slots, seed {seed}")
    return timeline(config, RngRegistry(seed, config.id)).run()
