"""
Simulator Configuration
TOML documents holding device presets, channels, sessions, comparison rows and
device sets, validated with pydantic and resolved into simulation objects
"""

import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, model_validator

from detector_model import (
    DEFAULT_BIAS_RATIO_STAR,
    DEFAULT_DARK_SLOPE,
    DarkAnchor,
    DeviceProfile,
    ResetModel,
    dark_rate_at_bias,
    efficiency_at_bias,
    with_operating_de,
)
from errors import ConfigError, SimulatorError
from optical_layer import ChannelSpec, IntensityLabel, IntensitySetting, fiber_transmittance

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).resolve().parent / "presets"
DEFAULT_CONFIG = PRESET_DIR / "qkd_field_tests.toml"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DarkAnchorModel(_Strict):
    bias_ratio_star: float = DEFAULT_BIAS_RATIO_STAR
    rate_cps: float
    slope: float = DEFAULT_DARK_SLOPE


class DeviceModel(_Strict):
    id: str
    area_um: Tuple[float, float]
    wire_width_nm: float
    pitch_nm: float
    thickness_nm: float
    fill_factor: Optional[float] = None
    t_c_K: float
    i_c_uA: float
    r_20k_ohm: float
    l_k_uH: float
    load_ohm: float = 50.0
    de_anchors: List[Tuple[float, float, float]]
    dark_anchor: DarkAnchorModel
    jitter_fwhm_ps: float
    latching_enabled: bool = False
    shunt_ohm: Optional[float] = 50.0
    polarization_coupling: float = 1.0
    reset_model: ResetModel = ResetModel.EXPONENTIAL
    notes: str = ""

    _profile: Optional[DeviceProfile] = PrivateAttr(default=None)

    @model_validator(mode="after")
    def _build_profile(self):
        fill = self.fill_factor if self.fill_factor is not None else self.wire_width_nm / self.pitch_nm
        try:
            self._profile = DeviceProfile(
                id=self.id,
                area_um=tuple(self.area_um),
                wire_width_nm=self.wire_width_nm,
                pitch_nm=self.pitch_nm,
                thickness_nm=self.thickness_nm,
                fill_factor=fill,
                t_c_K=self.t_c_K,
                i_c_uA=self.i_c_uA,
                r_20k_ohm=self.r_20k_ohm,
                l_k_uH=self.l_k_uH,
                load_ohm=self.load_ohm,
                de_anchors=tuple(tuple(a) for a in self.de_anchors),
                dark_anchor=DarkAnchor(**self.dark_anchor.model_dump()),
                jitter_fwhm_ps=self.jitter_fwhm_ps,
                latching_enabled=self.latching_enabled,
                shunt_ohm=self.shunt_ohm,
                polarization_coupling=self.polarization_coupling,
                reset_model=self.reset_model,
                notes=self.notes,
            )
        except (SimulatorError, ZeroDivisionError) as e:
            raise ValueError(str(e)) from e
        return self

    @property
    def profile(self) -> DeviceProfile:
        return self._profile


class ChannelModel(_Strict):
    id: str
    length_km: float = Field(default=0.0, ge=0)
    loss_db_per_km: float = Field(default=0.2, ge=0)
    excess_loss_db: float = Field(default=0.0, ge=0)
    receiver_loss_db: float = Field(default=0.0, ge=0)
    notes: str = ""

    def to_spec(self) -> ChannelSpec:
        return ChannelSpec(self.length_km, self.loss_db_per_km, self.excess_loss_db, self.receiver_loss_db, self.id)


class IntensityModel(_Strict):
    label: IntensityLabel
    mean_photons: float = Field(ge=0)
    probability: float = Field(ge=0, le=1)


def _default_intensities() -> List[IntensityModel]:
    return [
        IntensityModel(label=IntensityLabel.SIGNAL, mean_photons=0.4, probability=0.5),
        IntensityModel(label=IntensityLabel.DECOY, mean_photons=0.15, probability=0.25),
        IntensityModel(label=IntensityLabel.VACUUM, mean_photons=0.0, probability=0.25),
    ]


class _SessionModel(_Strict):
    id: str
    detector: str
    slots: int = Field(default=1_000_000, ge=0)
    clock_rate_hz: float = Field(default=625e6, gt=0)
    gate_fraction: float = Field(default=0.5, gt=0, le=1)
    wavelength_nm: float = 1550.0
    bias_ratio: Optional[float] = Field(default=None, gt=0, le=1)
    f_ec: float = Field(default=1.1, ge=1)
    q: float = Field(default=0.5, gt=0, le=1)
    qber_sample_fraction: Optional[float] = Field(default=None, gt=0, le=1)
    coincidence_window_ns: Optional[float] = Field(default=None, ge=0)
    real_duration_s: Optional[float] = Field(default=None, gt=0)
    notes: List[str] = Field(default_factory=list)


class Bb84SessionModel(_SessionModel):
    protocol: Literal["bb84"]
    channel: str
    e_det: float = Field(default=0.023, ge=0, le=0.5)
    intensities: List[IntensityModel] = Field(default_factory=_default_intensities)

    @model_validator(mode="after")
    def _check_intensities(self):
        labels = [i.label for i in self.intensities]
        if len(set(labels)) != len(labels):
            raise ValueError("intensity labels must be unique")
        if IntensityLabel.SIGNAL not in labels:
            raise ValueError("intensities must include a signal entry")
        total = sum(i.probability for i in self.intensities)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"intensity probabilities must sum to 1 (got {total})")
        means = {i.label: i.mean_photons for i in self.intensities}
        if IntensityLabel.DECOY in means and not means[IntensityLabel.SIGNAL] > means[IntensityLabel.DECOY] > 0:
            raise ValueError("decoy intensity must satisfy signal > decoy > 0")
        return self


class Bbm92SessionModel(_SessionModel):
    protocol: Literal["bbm92"]
    arms: Tuple[str, str]
    clock_rate_hz: float = Field(default=1e9, gt=0)
    mean_pairs: float = Field(default=0.01, ge=0)
    visibility_error: float = Field(default=0.0, ge=0, le=0.5)
    single_pair_only: bool = False


SessionModel = Annotated[Union[Bb84SessionModel, Bbm92SessionModel], Field(discriminator="protocol")]


class ComparisonModel(_Strict):
    name: str
    device: Optional[str] = None
    de_percent: Optional[float] = None
    dark_cps: Optional[float] = None
    jitter_ps: Optional[float] = None
    after_pulse: Optional[float] = None
    count_rate_hz: Optional[float] = None
    operation_mode: str = ""
    printed_index: Optional[float] = None
    reference: str = ""

    @model_validator(mode="after")
    def _source(self):
        given = [self.de_percent, self.dark_cps, self.jitter_ps]
        if self.device is None and any(v is None for v in given):
            raise ValueError(f"comparison row {self.name!r} needs a device or de_percent, dark_cps and jitter_ps")
        return self


class DeviceSetModel(_Strict):
    id: str
    base: str
    wavelength_nm: float = 1550.0
    de_values: List[float] = Field(min_length=1)
    i_c_uA: Optional[List[float]] = None
    de_floor: float = Field(default=0.01, ge=0, le=1)

    @model_validator(mode="after")
    def _aligned(self):
        if self.i_c_uA is not None and len(self.i_c_uA) != len(self.de_values):
            raise ValueError("i_c_uA must list one value per device")
        return self


class ConfigDocument(_Strict):
    presets: List[str] = Field(default_factory=list)
    device: List[DeviceModel] = Field(min_length=1)
    channel: List[ChannelModel] = Field(default_factory=list)
    session: List[SessionModel] = Field(default_factory=list)
    comparison: List[ComparisonModel] = Field(default_factory=list)
    device_set: List[DeviceSetModel] = Field(default_factory=list)

    @model_validator(mode="after")
    def _references(self):
        problems = []
        for section in ("device", "channel", "session", "device_set"):
            ids = [item.id for item in getattr(self, section)]
            duplicated = sorted({i for i in ids if ids.count(i) > 1})
            if duplicated:
                problems.append(f"duplicate {section} ids {duplicated}")
        devices = {d.id for d in self.device}
        channels = {c.id for c in self.channel}
        for s in self.session:
            if s.detector not in devices:
                problems.append(f"session {s.id!r} names unknown detector {s.detector!r}")
            links = [s.channel] if isinstance(s, Bb84SessionModel) else list(s.arms)
            problems.extend(
                f"session {s.id!r} names unknown channel {c!r}" for c in links if c not in channels
            )
        problems.extend(
            f"comparison {c.name!r} names unknown device {c.device!r}"
            for c in self.comparison if c.device is not None and c.device not in devices
        )
        problems.extend(
            f"device_set {d.id!r} names unknown base device {d.base!r}" for d in self.device_set if d.base not in devices
        )
        if problems:
            raise ValueError("; ".join(problems))
        return self


@dataclass(frozen=True)
class SessionConfig:
    """A session with every cross-reference resolved and every default filled"""
    id: str
    protocol: str
    detector: DeviceProfile
    channels: Tuple[ChannelSpec, ...]
    slots: int
    clock_rate_hz: float
    gate_fraction: float
    wavelength_nm: float
    bias_ratio: float
    e_det: float
    intensities: Tuple[IntensitySetting, ...] = ()
    mean_pairs: float = 0.0
    single_pair_only: bool = False
    f_ec: float = 1.1
    q: float = 0.5
    qber_sample_fraction: Optional[float] = None
    coincidence_window_ns: Optional[float] = None
    real_duration_s: Optional[float] = None
    notes: Tuple[str, ...] = ()

    def with_overrides(self, slots: Optional[int] = None, detector: Optional[DeviceProfile] = None) -> "SessionConfig":
        changes: Dict[str, Any] = {}
        if slots is not None:
            if slots < 0:
                raise ConfigError("slots override must be >= 0")
            changes["slots"] = slots
        if detector is not None:
            changes["detector"] = detector
            changes["bias_ratio"] = detector.bias_ratio_star
        return replace(self, **changes) if changes else self

    def ledger(self) -> Dict[str, Any]:
        """Every tuned knob behind a session's numbers"""
        profile = self.detector
        return {
            "detector": profile.id,
            "bias_ratio": self.bias_ratio,
            "detection_efficiency": efficiency_at_bias(profile, self.bias_ratio, self.wavelength_nm),
            "dark_rate_cps": dark_rate_at_bias(profile, self.bias_ratio),
            "jitter_fwhm_ps": profile.jitter_fwhm_ps,
            "l_k_uH": profile.l_k_uH,
            "channels": [
                {
                    "id": c.id,
                    "length_km": c.length_km,
                    "loss_db_per_km": c.loss_db_per_km,
                    "excess_loss_db": c.excess_loss_db,
                    "receiver_loss_db": c.receiver_loss_db,
                    "transmittance": fiber_transmittance(c),
                }
                for c in self.channels
            ],
            "clock_rate_hz": self.clock_rate_hz,
            "gate_fraction": self.gate_fraction,
            "wavelength_nm": self.wavelength_nm,
            "intrinsic_error": self.e_det,
            "intensities": [
                {"label": s.label.value, "mean_photons": s.mean_photons, "probability": s.probability}
                for s in self.intensities
            ],
            "mean_pairs": self.mean_pairs,
            "single_pair_only": self.single_pair_only,
            "f_ec": self.f_ec,
            "q": self.q,
            "coincidence_window_ns": self.coincidence_window_ns,
            "notes": list(self.notes),
        }


@dataclass
class SimulatorConfig:
    """Validated document plus the simulation objects resolved from it"""
    document: ConfigDocument
    source: Optional[Path] = None
    devices: Dict[str, DeviceProfile] = field(default_factory=dict)
    channels: Dict[str, ChannelSpec] = field(default_factory=dict)
    sessions: Dict[str, SessionConfig] = field(default_factory=dict)

    def __post_init__(self):
        doc = self.document
        self.devices = {d.id: d.profile for d in doc.device}
        self.channels = {c.id: c.to_spec() for c in doc.channel}
        self.sessions = {s.id: self._resolve_session(s) for s in doc.session}

    def _resolve_session(self, s) -> SessionConfig:
        profile = self.devices[s.detector]
        common = dict(
            id=s.id,
            protocol=s.protocol,
            detector=profile,
            slots=s.slots,
            clock_rate_hz=s.clock_rate_hz,
            gate_fraction=s.gate_fraction,
            wavelength_nm=s.wavelength_nm,
            bias_ratio=s.bias_ratio if s.bias_ratio is not None else profile.bias_ratio_star,
            f_ec=s.f_ec,
            q=s.q,
            qber_sample_fraction=s.qber_sample_fraction,
            coincidence_window_ns=s.coincidence_window_ns,
            real_duration_s=s.real_duration_s,
            notes=tuple(s.notes),
        )
        if isinstance(s, Bb84SessionModel):
            return SessionConfig(
                channels=(self.channels[s.channel],),
                e_det=s.e_det,
                intensities=tuple(IntensitySetting(i.label, i.mean_photons, i.probability) for i in s.intensities),
                **common,
            )
        return SessionConfig(
            channels=tuple(self.channels[a] for a in s.arms),
            e_det=s.visibility_error,
            mean_pairs=s.mean_pairs,
            single_pair_only=s.single_pair_only,
            **common,
        )

    def device(self, device_id: str) -> DeviceProfile:
        try:
            return self.devices[device_id]
        except KeyError:
            raise ConfigError(f"unknown device preset {device_id!r}; known: {sorted(self.devices)}") from None

    def session(self, session_id: Optional[str] = None, protocol: Optional[str] = None) -> SessionConfig:
        """Named session, or the first session of a protocol when no name is given"""
        if session_id is not None:
            if session_id not in self.sessions:
                raise ConfigError(f"unknown session {session_id!r}; known: {sorted(self.sessions)}")
            found = self.sessions[session_id]
            if protocol is not None and found.protocol != protocol:
                raise ConfigError(f"session {session_id!r} is {found.protocol}, not {protocol}")
            return found
        for candidate in self.sessions.values():
            if protocol is None or candidate.protocol == protocol:
                return candidate
        kind = f"{protocol} session" if protocol else "session"
        raise ConfigError(f"configuration defines no {kind}")

    def device_set(self, set_id: Optional[str] = None) -> Tuple[DeviceSetModel, List[DeviceProfile]]:
        sets = {d.id: d for d in self.document.device_set}
        if not sets:
            raise ConfigError("configuration defines no device_set")
        spec = sets[set_id] if set_id is not None and set_id in sets else None
        if spec is None:
            if set_id is not None:
                raise ConfigError(f"unknown device_set {set_id!r}; known: {sorted(sets)}")
            spec = next(iter(sets.values()))
        base = self.devices[spec.base]
        currents = spec.i_c_uA or [base.i_c_uA] * len(spec.de_values)
        profiles = [
            with_operating_de(base, f"{spec.id}-{i + 1:02d}", de, spec.wavelength_nm, i_c_uA=ic)
            for i, (de, ic) in enumerate(zip(spec.de_values, currents))
        ]
        return spec, profiles

    def resolved_defaults(self) -> Dict[str, Any]:
        return self.document.model_dump(mode="json")


def _validation_problems(error: ValidationError) -> List[str]:
    problems = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<document>"
        problems.append(f"{location}: {item['msg']}")
    return problems


def _read_toml(path: Path) -> Dict[str, Any]:
    try:
        with path.open("rb") as handle:
            return tomllib.load(handle)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: TOML parse error: {e}") from e
    except OSError as e:
        raise ConfigError(f"cannot read configuration {path}: {e.strerror or e}") from e


def _merge(included: Dict[str, List[Any]], local: Mapping[str, Any]) -> Dict[str, Any]:
    """Local entries replace included entries with the same id or name"""
    merged: Dict[str, Any] = {k: list(v) for k, v in included.items()}
    for section, entries in local.items():
        if section == "presets" or not isinstance(entries, list):
            merged[section] = entries
            continue
        keys = {e.get("id", e.get("name")) for e in entries if isinstance(e, dict)}
        kept = [e for e in merged.get(section, []) if not (isinstance(e, dict) and e.get("id", e.get("name")) in keys)]
        merged[section] = kept + list(entries)
    return merged


def _expand(raw: Mapping[str, Any], base_dir: Path, seen: Tuple[Path, ...]) -> Dict[str, Any]:
    included: Dict[str, List[Any]] = {}
    for entry in raw.get("presets", []):
        path = (base_dir / entry).resolve()
        if not path.exists():
            candidate = (PRESET_DIR / entry).resolve()
            path = candidate if candidate.exists() else path
        if path in seen:
            raise ConfigError(f"circular presets include through {path}")
        child = _expand(_read_toml(path), path.parent, seen + (path,))
        child.pop("presets", None)
        included = _merge(included, child)
    return _merge(included, {k: v for k, v in raw.items()})


def parse_config(document: Union[str, Mapping[str, Any]], base_dir: Optional[Path] = None,
                 source: Optional[Path] = None) -> SimulatorConfig:
    """Validate a TOML text or already-parsed mapping into a resolved configuration"""
    if isinstance(document, str):
        try:
            raw = tomllib.loads(document)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"TOML parse error: {e}") from e
    else:
        raw = dict(document)
    base_dir = base_dir or (source.parent if source else Path.cwd())
    expanded = _expand(raw, base_dir, (source.resolve(),) if source else ())
    expanded.pop("presets", None)
    try:
        parsed = ConfigDocument.model_validate(expanded)
    except ValidationError as e:
        raise ConfigError("invalid configuration", _validation_problems(e)) from e
    config = SimulatorConfig(parsed, source)
    logger.info(
        f"Configuration loaded: {len(config.devices)} devices, {len(config.channels)} channels, "
        f"{len(config.sessions)} sessions"
    )
    return config


def load_config(path: Union[str, Path, None] = None) -> SimulatorConfig:
    path = Path(path) if path is not None else DEFAULT_CONFIG
    return parse_config(_read_toml(path), path.parent, path)


def load_preset(device_id: str) -> DeviceProfile:
    """Device profile from the shipped preset pack"""
    return load_config(DEFAULT_CONFIG).device(device_id)
