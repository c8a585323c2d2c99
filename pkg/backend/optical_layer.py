"""
Optical Layer
Weak coherent pulse and entangled pair sources, fiber link budget and
binomial channel thinning
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy import constants

from errors import DomainError, ParameterError

logger = logging.getLogger(__name__)

DEFAULT_WAVELENGTH_NM = 1550.0


class IntensityLabel(str, Enum):
    SIGNAL = "signal"
    DECOY = "decoy"
    VACUUM = "vacuum"


class Basis(str, Enum):
    Z = "Z"
    X = "X"


BASES = (Basis.Z, Basis.X)


@dataclass(frozen=True)
class PhotonArrival:
    """Optical pulse reaching a detector input"""
    time_ns: float
    n_photons: int
    wavelength_nm: float = DEFAULT_WAVELENGTH_NM
    intensity_label: Optional[IntensityLabel] = None
    basis: Optional[Basis] = None
    bit: Optional[int] = None
    polarization_mismatch: float = 0.0
    multi_pair: bool = False

    def __post_init__(self):
        if self.n_photons < 0:
            raise DomainError(f"n_photons must be >= 0, got {self.n_photons}")
        if not 0.0 <= self.polarization_mismatch <= 1.0:
            raise DomainError("polarization_mismatch must lie in [0, 1]")


@dataclass(frozen=True)
class IntensitySetting:
    """One intensity of a decoy-modulated source and its selection probability"""
    label: IntensityLabel
    mean_photons: float
    probability: float

    def __post_init__(self):
        if self.mean_photons < 0:
            raise ParameterError(f"{self.label.value} intensity must be >= 0")
        if not 0.0 <= self.probability <= 1.0:
            raise ParameterError(f"{self.label.value} probability must lie in [0, 1]")


@dataclass(frozen=True)
class ChannelSpec:
    """Fiber link between two parties"""
    length_km: float = 0.0
    loss_db_per_km: float = 0.2
    excess_loss_db: float = 0.0
    receiver_loss_db: float = 0.0
    id: str = "channel"

    def __post_init__(self):
        for name in ("length_km", "loss_db_per_km", "excess_loss_db", "receiver_loss_db"):
            if getattr(self, name) < 0:
                raise ParameterError(f"channel {self.id!r}: {name} must be >= 0")

    @property
    def total_loss_db(self) -> float:
        return self.loss_db_per_km * self.length_km + self.excess_loss_db + self.receiver_loss_db

    def concatenate(self, other: "ChannelSpec") -> "ChannelSpec":
        """Single span equivalent to this link followed by another"""
        length = self.length_km + other.length_km
        fiber_db = self.loss_db_per_km * self.length_km + other.loss_db_per_km * other.length_km
        return ChannelSpec(
            length_km=length,
            loss_db_per_km=fiber_db / length if length > 0 else self.loss_db_per_km,
            excess_loss_db=self.excess_loss_db + other.excess_loss_db,
            receiver_loss_db=self.receiver_loss_db + other.receiver_loss_db,
            id=f"{self.id}+{other.id}",
        )


def fiber_transmittance(spec: ChannelSpec) -> float:
    return 10.0 ** (-spec.total_loss_db / 10.0)


def photon_flux(power_w: float, wavelength_nm: float) -> float:
    """Photons per second carried by an optical power at a wavelength"""
    if power_w < 0 or wavelength_nm <= 0:
        raise DomainError("photon_flux needs power >= 0 and wavelength > 0")
    return power_w * wavelength_nm * 1e-9 / (constants.h * constants.c)


def optical_power(flux_cps: float, wavelength_nm: float) -> float:
    """Optical power in watts for a photon flux"""
    if flux_cps < 0 or wavelength_nm <= 0:
        raise DomainError("optical_power needs flux >= 0 and wavelength > 0")
    return flux_cps * constants.h * constants.c / (wavelength_nm * 1e-9)


def _check_fraction(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise DomainError(f"{name} must lie in [0, 1], got {value}")


def wcp_emit(intensity: float, time_ns: float, rng: np.random.Generator,
             intensity_label: Optional[IntensityLabel] = None, basis: Optional[Basis] = None,
             bit: Optional[int] = None, wavelength_nm: float = DEFAULT_WAVELENGTH_NM) -> PhotonArrival:
    if intensity < 0:
        raise DomainError(f"intensity must be >= 0, got {intensity}")
    n = int(rng.poisson(intensity)) if intensity > 0 else 0
    return PhotonArrival(time_ns, n, wavelength_nm, intensity_label, basis, bit)


def attenuate(arrival: PhotonArrival, transmittance: float, rng: np.random.Generator) -> PhotonArrival:
    _check_fraction("transmittance", transmittance)
    if transmittance == 1.0 or arrival.n_photons == 0:
        return arrival
    return replace(arrival, n_photons=int(rng.binomial(arrival.n_photons, transmittance)))


def pair_emit(mean_pairs: float, window_time_ns: float, rng: np.random.Generator,
              bases: Optional[Tuple[Basis, Basis]] = None, single_pair_only: bool = False,
              wavelength_nm: float = DEFAULT_WAVELENGTH_NM) -> Tuple[PhotonArrival, PhotonArrival]:
    """Both arms of one pump window of an entangled pair source.

    Bits are the outcomes the pair yields in the given analysis bases:
    anticorrelated when the bases match, independent otherwise.
    """
    if mean_pairs < 0:
        raise DomainError(f"mean_pairs must be >= 0, got {mean_pairs}")
    n_pairs = int(rng.poisson(mean_pairs)) if mean_pairs > 0 else 0
    if single_pair_only:
        n_pairs = min(n_pairs, 1)
    if bases is None:
        bases = (BASES[int(rng.integers(2))], BASES[int(rng.integers(2))])
    bit_a = int(rng.integers(2))
    bit_b = 1 - bit_a if bases[0] == bases[1] else int(rng.integers(2))
    multi = n_pairs >= 2
    return (
        PhotonArrival(window_time_ns, n_pairs, wavelength_nm, None, bases[0], bit_a, multi_pair=multi),
        PhotonArrival(window_time_ns, n_pairs, wavelength_nm, None, bases[1], bit_b, multi_pair=multi),
    )


# Vectorised forms used by the session timeline

def emit_photon_numbers(intensities: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Poisson photon numbers for an array of per-slot mean photon numbers"""
    intensities = np.asarray(intensities, dtype=float)
    if intensities.size and intensities.min() < 0:
        raise DomainError("intensities must be >= 0")
    return rng.poisson(intensities)


def thin(counts: np.ndarray, transmittance: float, rng: np.random.Generator) -> np.ndarray:
    """Binomial thinning of per-slot photon numbers"""
    _check_fraction("transmittance", transmittance)
    counts = np.asarray(counts)
    if transmittance == 1.0:
        return counts.copy()
    return rng.binomial(counts, transmittance)


def pair_numbers(mean_pairs: float, windows: int, rng: np.random.Generator,
                 single_pair_only: bool = False) -> np.ndarray:
    if mean_pairs < 0:
        raise DomainError(f"mean_pairs must be >= 0, got {mean_pairs}")
    if mean_pairs == 0:
        return np.zeros(windows, dtype=np.int64)
    pairs = rng.poisson(mean_pairs, windows)
    return np.minimum(pairs, 1) if single_pair_only else pairs
