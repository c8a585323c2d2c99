"""Shared fixtures: shipped presets, seeded streams and small session builders"""

import sys
from dataclasses import replace
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from config import SessionConfig, load_config  # noqa: E402
from detector_model import DarkAnchor, DeviceProfile  # noqa: E402
from optical_layer import ChannelSpec, IntensityLabel, IntensitySetting  # noqa: E402
from sim_engine import rng_stream  # noqa: E402


@pytest.fixture(scope="session")
def shipped_config():
    return load_config()


@pytest.fixture(scope="session")
def device_a(shipped_config):
    return shipped_config.device("A")


@pytest.fixture(scope="session")
def device_b(shipped_config):
    return shipped_config.device("B")


@pytest.fixture
def rng():
    def make(role="test", seed=1234):
        return rng_stream(seed, role)
    return make


def make_profile(de=0.1, dark_cps=1e4, l_k_uH=0.001, jitter_fwhm_ps=100.0, **overrides):
    """Flat-topped test device: `de` at and above b* = 0.9, fast reset"""
    profile = DeviceProfile(
        id=overrides.pop("id", "test"),
        area_um=(10.0, 10.0),
        wire_width_nm=100.0,
        pitch_nm=200.0,
        thickness_nm=4.0,
        fill_factor=0.5,
        t_c_K=10.0,
        i_c_uA=20.0,
        r_20k_ohm=2.5e6,
        l_k_uH=l_k_uH,
        de_anchors=((0.5, 1550.0, de / 10.0), (0.9, 1550.0, de)),
        dark_anchor=DarkAnchor(0.9, dark_cps),
        jitter_fwhm_ps=jitter_fwhm_ps,
    )
    return replace(profile, **overrides) if overrides else profile


@pytest.fixture
def profile_factory():
    return make_profile


def bb84_config(profile, slots, transmittance_db=3.0103, e_det=0.03, clock_rate_hz=625e6,
                intensities=None, **extra):
    if intensities is None:
        intensities = (
            IntensitySetting(IntensityLabel.SIGNAL, 0.4, 1 / 3),
            IntensitySetting(IntensityLabel.DECOY, 0.15, 1 / 3),
            IntensitySetting(IntensityLabel.VACUUM, 0.0, 1 / 3),
        )
    return SessionConfig(
        id=extra.pop("id", "bb84_test"),
        protocol="bb84",
        detector=profile,
        channels=(ChannelSpec(0.0, excess_loss_db=transmittance_db, id="link"),),
        slots=slots,
        clock_rate_hz=clock_rate_hz,
        gate_fraction=0.5,
        wavelength_nm=1550.0,
        bias_ratio=profile.bias_ratio_star,
        e_det=e_det,
        intensities=tuple(intensities),
        **extra,
    )


def bbm92_config(profile, slots, mean_pairs=0.01, arm_loss_db=0.0, visibility_error=0.0, **extra):
    return SessionConfig(
        id=extra.pop("id", "bbm92_test"),
        protocol="bbm92",
        detector=profile,
        channels=(ChannelSpec(0.0, excess_loss_db=arm_loss_db, id="arm_a"),
                  ChannelSpec(0.0, excess_loss_db=arm_loss_db, id="arm_b")),
        slots=slots,
        clock_rate_hz=extra.pop("clock_rate_hz", 1e9),
        gate_fraction=0.5,
        wavelength_nm=1550.0,
        bias_ratio=profile.bias_ratio_star,
        e_det=visibility_error,
        mean_pairs=mean_pairs,
        coincidence_window_ns=extra.pop("coincidence_window_ns", 0.5),
        **extra,
    )
