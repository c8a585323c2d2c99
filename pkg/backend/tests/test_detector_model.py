"""Tests for the SSPD detector model"""

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from analysis_io import DEFAULT_BIN_WIDTH_PS, DEFAULT_SYNC_RATE_HZ, fwhm, tcspc_histogram
from conftest import make_profile
from detector_model import (
    C_REC,
    ClickCause,
    DetectorChannel,
    DetectorState,
    ResetModel,
    critical_current_density,
    dark_events,
    dark_rate_at_bias,
    dark_times,
    detect,
    efficiency_at_bias,
    max_count_rate,
    recovered_bias,
    recovery_time_constant_ns,
    register_dark,
    reset,
    resistivity_20k,
    sheet_resistance,
    with_operating_de,
)
from errors import CalibrationMissingError, DomainError, ParameterError, SequencingError
from optical_layer import PhotonArrival


class TestEfficiencyAtBias:
    """DE(bias) through the calibration anchors"""

    def test_operating_point_1550(self, device_a):
        """#A reaches 2.6% at b* = 0.9"""
        assert efficiency_at_bias(device_a, 0.9, 1550.0) == pytest.approx(0.026)

    def test_operating_point_1310(self, device_a):
        assert efficiency_at_bias(device_a, 0.9, 1310.0) == pytest.approx(0.045)

    def test_zero_bias(self, device_a):
        assert efficiency_at_bias(device_a, 0.0, 1550.0) == 0.0

    def test_midpoint_is_geometric_mean(self, device_a):
        """Log-linear interpolation halfway between the 0.75 and 0.9 anchors"""
        assert efficiency_at_bias(device_a, 0.825, 1550.0) == pytest.approx(math.sqrt(0.009 * 0.026))

    def test_clamped_above_top_anchor(self, shipped_config):
        ref25 = shipped_config.device("ref25")
        assert efficiency_at_bias(ref25, 0.97, 1550.0) == pytest.approx(0.035)

    def test_missing_wavelength(self, device_b):
        with pytest.raises(CalibrationMissingError):
            efficiency_at_bias(device_b, 0.9, 1310.0)

    @pytest.mark.parametrize("bias", [-0.1, 1.2, float("nan")])
    def test_bias_out_of_domain(self, device_a, bias):
        with pytest.raises(DomainError):
            efficiency_at_bias(device_a, bias, 1550.0)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    @settings(max_examples=300, deadline=None)
    def test_monotone_in_bias(self, b1, b2):
        """DE never decreases with bias"""
        profile = make_profile(de=0.03)
        lo, hi = sorted((b1, b2))
        assert efficiency_at_bias(profile, lo, 1550.0) <= efficiency_at_bias(profile, hi, 1550.0) + 1e-15


class TestDarkRate:
    def test_anchor_rate(self, device_a):
        assert dark_rate_at_bias(device_a, 0.9) == pytest.approx(100.0)

    def test_one_decade_per_slope_unit(self, device_a):
        assert dark_rate_at_bias(device_a, 0.95) == pytest.approx(1000.0)

    def test_two_decades_below(self, device_a):
        assert dark_rate_at_bias(device_a, 0.8) == pytest.approx(1.0)

    @given(st.floats(0.0, 0.999))
    @settings(max_examples=200, deadline=None)
    def test_strictly_increasing(self, b):
        profile = make_profile()
        assert dark_rate_at_bias(profile, b) < dark_rate_at_bias(profile, min(1.0, b + 1e-3))


class TestRecovery:
    """Kinetic-inductance limited bias recovery and count rate"""

    def test_time_constant_a(self, device_a):
        assert recovery_time_constant_ns(device_a) == pytest.approx(26.0)

    def test_one_time_constant_b(self, device_b):
        assert recovered_bias(device_b, 6.0, 0.9) == pytest.approx(0.9 * (1.0 - math.exp(-1.0)))

    def test_never_fired(self, device_b):
        assert recovered_bias(device_b, None, 0.8) == 0.8

    def test_negative_interval(self, device_b):
        with pytest.raises(DomainError):
            recovered_bias(device_b, -1.0)

    def test_max_count_rate_b(self, device_b):
        """#B brackets the 66 MHz quoted for the 10x10 um device"""
        rate = max_count_rate(device_b)
        assert rate == pytest.approx(66.67e6, rel=1e-3)
        assert 60e6 <= rate <= 73e6

    def test_max_count_rate_a(self, device_a):
        assert max_count_rate(device_a) == pytest.approx(15.38e6, rel=1e-3)

    def test_rate_halves_with_double_inductance(self, device_b):
        doubled = replace(device_b, l_k_uH=2 * device_b.l_k_uH)
        assert max_count_rate(doubled) == pytest.approx(max_count_rate(device_b) / 2)

    def test_dead_time_mode_is_a_step(self, device_b):
        dead = replace(device_b, reset_model=ResetModel.DEAD_TIME)
        tau = recovery_time_constant_ns(dead)
        assert recovered_bias(dead, C_REC * tau * 0.99, 0.9) == 0.0
        assert recovered_bias(dead, C_REC * tau, 0.9) == 0.9

    def test_recovered_after_five_time_constants(self, device_b):
        tau = recovery_time_constant_ns(device_b)
        assert recovered_bias(device_b, 5 * tau, 0.9) >= 0.99 * 0.9

    @given(st.floats(0.0, 1e3), st.floats(0.0, 1e3))
    @settings(max_examples=200, deadline=None)
    def test_recovery_monotone_and_bounded(self, dt1, dt2):
        profile = make_profile(l_k_uH=0.3)
        early, late = sorted((dt1, dt2))
        assert recovered_bias(profile, early, 0.9) <= recovered_bias(profile, late, 0.9) <= 0.9

    def test_de_far_below_steady_state_after_1ns(self, device_a):
        """Second arrival 1 ns after a click sees almost no bias"""
        bias = recovered_bias(device_a, 1.0, 0.9)
        assert bias == pytest.approx(0.9 * (1.0 - math.exp(-1.0 / 26.0)))
        assert bias == pytest.approx(0.038 * 0.9, rel=0.02)
        assert efficiency_at_bias(device_a, bias, 1550.0) < efficiency_at_bias(device_a, 0.9, 1550.0) / 100


class TestDeviceConstants:
    def test_critical_current_density_a(self):
        assert critical_current_density(19.0, 100.0, 3.9) == pytest.approx(4.87e10, rel=1e-3)

    def test_critical_current_density_b(self):
        assert critical_current_density(15.0, 100.0, 3.9) == pytest.approx(3.85e10, rel=1e-3)

    def test_critical_current_density_linear(self):
        assert critical_current_density(38.0, 100.0, 3.9) == pytest.approx(2 * critical_current_density(19.0, 100.0, 3.9))

    def test_sheet_resistance_a(self, device_a):
        sheet = sheet_resistance(device_a.r_20k_ohm, device_a.area_um, device_a.wire_width_nm, device_a.pitch_nm)
        assert sheet == pytest.approx(500.0)
        assert resistivity_20k(sheet, 3.9) == pytest.approx(1.95e-6)

    def test_fill_factor_must_match_geometry(self):
        with pytest.raises(ParameterError):
            make_profile(fill_factor=0.4)

    def test_non_increasing_anchor_bias_rejected(self):
        with pytest.raises(ParameterError):
            make_profile(de_anchors=((0.9, 1550.0, 0.02), (0.8, 1550.0, 0.03)))


class TestDetect:
    """Single-pulse click generation and detector state"""

    def test_bright_pulse_always_clicks(self, device_a, rng):
        state = DetectorState(0.9)
        event = detect(device_a, state, PhotonArrival(10.0, 10**6), rng(), "bob:0")
        assert event is not None
        assert event.cause == ClickCause.PHOTON
        assert event.channel == "bob:0"
        assert state.last_fire_time_ns == 10.0

    def test_empty_pulse_never_clicks(self, device_a, rng):
        state = DetectorState(0.9)
        assert detect(device_a, state, PhotonArrival(0.0, 0), rng()) is None

    def test_out_of_order_arrival(self, device_a, rng):
        state = DetectorState(0.9)
        detect(device_a, state, PhotonArrival(5.0, 0), rng())
        with pytest.raises(SequencingError):
            detect(device_a, state, PhotonArrival(4.0, 0), rng())

    def test_latching_without_shunt(self, device_a, rng):
        latching = replace(device_a, latching_enabled=True, shunt_ohm=None)
        state = DetectorState(0.9)
        stream = rng()
        assert detect(latching, state, PhotonArrival(0.0, 10**6), stream) is not None
        assert state.latched
        assert detect(latching, state, PhotonArrival(1e6, 10**6), stream) is None
        reset(state)
        assert not state.latched
        assert detect(latching, state, PhotonArrival(2e6, 10**6), stream) is not None

    def test_shunt_prevents_latching(self, device_a, rng):
        shunted = replace(device_a, latching_enabled=True)
        state = DetectorState(0.9)
        detect(shunted, state, PhotonArrival(0.0, 10**6), rng())
        assert not state.latched

    def test_jitter_fwhm_of_clicks(self, device_b, rng):
        """10^5 clicks from well separated bright pulses reproduce the 100 ps FWHM"""
        state = DetectorState(0.9)
        stream = rng()
        offsets = []
        for i in range(100_000):
            t = i * 1000.0
            offsets.append(detect(device_b, state, PhotonArrival(t, 10**6), stream).time_ns - t)
        offsets = np.asarray(offsets)
        histogram = tcspc_histogram(offsets, DEFAULT_SYNC_RATE_HZ, DEFAULT_BIN_WIDTH_PS)
        assert 95.0 <= fwhm(histogram) <= 105.0
        assert abs(offsets.mean()) < 4 * offsets.std() / math.sqrt(offsets.size)

    def test_dark_count_suppressed_right_after_fire(self, device_a, rng):
        state = DetectorState(0.9, last_fire_time_ns=0.0, last_event_time_ns=0.0)
        assert register_dark(device_a, state, 0.1, rng()) is None

    def test_dark_count_kept_when_recovered(self, device_a, rng):
        state = DetectorState(0.9)
        event = register_dark(device_a, state, 5.0, rng(), "bob:1")
        assert event.cause == ClickCause.DARK
        assert event.time_ns == 5.0


class TestDetectorChannel:
    def test_click_fraction_matches_de(self, rng):
        """Well separated single photons click with probability DE (4 sigma)"""
        profile = make_profile(de=0.05)
        channel = DetectorChannel(profile, "d0")
        n = 200_000
        times = np.arange(n) * 1000.0
        events = channel.process(times, np.ones(n, dtype=np.int64), np.empty(0), 1550.0, rng())
        expected = n * 0.05
        assert abs(len(events) - expected) < 4 * math.sqrt(expected * 0.95)
        assert channel.photon_clicks == len(events)
        assert channel.arrivals == n

    @pytest.mark.parametrize("photons", [1, 2, 5])
    def test_multi_photon_click_fraction(self, rng, photons):
        """Click probability 1 - (1 - DE)^n at 10^6 trials"""
        channel = DetectorChannel(make_profile(de=0.026, dark_cps=0.0), "d0")
        n = 1_000_000
        events = channel.process(np.arange(n) * 1000.0, np.full(n, photons, dtype=np.int64), np.empty(0),
                                 1550.0, rng(f"clicks/{photons}"))
        p = 1.0 - (1.0 - 0.026) ** photons
        assert abs(len(events) / n - p) < 4 * math.sqrt(p * (1 - p) / n)

    def test_de_depends_on_spacing_only_near_tau(self, rng):
        """Spacing >> 5 tau leaves DE unchanged; spacing tau lowers it"""
        profile = make_profile(de=0.5, dark_cps=0.0, l_k_uH=0.3)
        tau = recovery_time_constant_ns(profile)
        n = 100_000

        def measured(spacing):
            channel = DetectorChannel(profile, "d0")
            events = channel.process(np.arange(n) * spacing, np.ones(n, dtype=np.int64), np.empty(0), 1550.0,
                                     rng(f"spacing/{spacing}"))
            return len(events) / n

        sigma = math.sqrt(0.25 / n)
        at_10, at_50, at_1 = measured(10 * tau), measured(50 * tau), measured(tau)
        assert abs(at_50 - 0.5) < 4 * sigma
        assert abs(at_10 - at_50) < 4 * math.sqrt(2) * sigma
        assert at_1 < at_50 - 10 * sigma

    def test_events_ordered_and_labelled(self, rng):
        profile = make_profile(de=0.5, dark_cps=1e6)
        channel = DetectorChannel(profile, "bob:1")
        stream = rng()
        dark = dark_times(profile, 0.9, (0.0, 1e6), stream)
        events = channel.process(np.arange(1000) * 1000.0, np.ones(1000, dtype=np.int64), dark, 1550.0, stream)
        causes = {e.cause for e in events}
        assert causes == {ClickCause.PHOTON, ClickCause.DARK}
        assert all(e.channel == "bob:1" for e in events)
        assert channel.dark_clicks + channel.photon_clicks == len(events)


class TestDarkTimes:
    def test_poisson_count(self, device_a, rng):
        """10^4 c/s at b = 1.0 over one second"""
        times = dark_times(device_a, 1.0, (0.0, 1e9), rng())
        assert abs(times.size - 1e4) < 4 * 100
        assert np.all(np.diff(times) >= 0)
        assert times.min() >= 0.0 and times.max() < 1e9

    def test_dark_events_labelled(self, device_a, rng):
        events = dark_events(device_a, 1.0, (0.0, 1e8), rng(), "bob:0")
        assert events
        assert all(e.cause == ClickCause.DARK and e.channel == "bob:0" for e in events)
        assert [e.time_ns for e in events] == sorted(e.time_ns for e in events)

    def test_one_millisecond_window(self, device_a, rng):
        """100 c/s over 1 ms: P(at least one dark count) = 1 - e^-0.1"""
        stream = rng()
        trials = 20_000
        hits = sum(dark_times(device_a, 0.9, (0.0, 1e6), stream).size > 0 for _ in range(trials))
        p = -math.expm1(-0.1)
        assert p == pytest.approx(0.0952, abs=1e-4)
        assert abs(hits / trials - p) < 4 * math.sqrt(p * (1 - p) / trials)

    def test_reversed_window(self, device_a, rng):
        with pytest.raises(DomainError):
            dark_times(device_a, 0.9, (10.0, 0.0), rng())


def test_with_operating_de_rescales_anchors(device_a):
    scaled = with_operating_de(device_a, "A-x", 0.013, i_c_uA=18.0)
    assert scaled.id == "A-x"
    assert scaled.i_c_uA == 18.0
    assert efficiency_at_bias(scaled, 0.9, 1550.0) == pytest.approx(0.013)
    assert efficiency_at_bias(device_a, 0.9, 1550.0) == pytest.approx(0.026)
