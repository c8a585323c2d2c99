"""Tests for sifting, QBER, decoy bounds, key rates and session analysis"""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import bb84_config, bbm92_config, make_profile
from errors import DomainError, ParameterError, UndefinedEstimateError
from qkd_protocols import (
    ReceiverRecord,
    SiftedKey,
    TransmitterRecord,
    analytic_gain,
    bb84_prediction,
    bb84_session,
    bbm92_model,
    bbm92_prediction,
    bbm92_secure_rate,
    bbm92_session,
    binary_entropy,
    decoy_bounds,
    estimate_qber,
    gate_capture,
    gated_dark_probability,
    secure_key_rate,
    sift,
)
from sim_engine import rng_stream


def _key(bits, reference):
    bits = np.asarray(bits, dtype=np.int8)
    return SiftedKey(np.arange(bits.size), bits, np.asarray(reference, dtype=np.int8))


class TestSift:
    def test_basis_match_and_unknown_slots(self):
        tx = TransmitterRecord(np.array([0, 1, 2, 3]), np.array([0, 1, 1, 0]), np.array([0, 1, 0, 1]))
        rx = ReceiverRecord(np.array([0, 1, 3, 5]), np.array([0, 0, 0, 1]), np.array([0, 0, 1, 0]))
        key = sift(tx, rx)
        assert key.positions.tolist() == [0, 3]
        assert key.bits.tolist() == [0, 0]
        assert key.errors == 0

    def test_errors_counted(self):
        tx = TransmitterRecord(np.array([0, 1]), np.array([1, 1]), np.array([0, 0]))
        rx = ReceiverRecord(np.array([0, 1]), np.array([1, 0]), np.array([0, 0]))
        assert sift(tx, rx).errors == 1

    def test_double_click_needs_stream(self):
        tx = TransmitterRecord(np.array([2]), np.array([0]), np.array([0]))
        rx = ReceiverRecord(np.array([2, 2]), np.array([0, 1]), np.array([0, 0]))
        with pytest.raises(DomainError):
            sift(tx, rx)
        key = sift(tx, rx, rng_stream(1, "sift"))
        assert len(key) == 1
        assert key.bits[0] in (0, 1)

    def test_partition_by_intensity(self):
        tx = TransmitterRecord(np.array([0, 1, 2]), np.array([0, 1, 0]), np.array([0, 0, 0]),
                               np.array(["signal", "decoy", "signal"], dtype=object))
        rx = ReceiverRecord(np.array([0, 1, 2]), np.array([0, 1, 1]), np.array([0, 0, 0]))
        key = sift(tx, rx)
        signal = key.partition("signal")
        assert len(signal) == 2
        assert signal.errors == 1

    def test_partition_without_labels(self):
        with pytest.raises(ParameterError):
            _key([0], [0]).partition("signal")


class TestQber:
    def test_full_key(self):
        assert estimate_qber(_key([0, 1, 1, 0], [0, 1, 0, 0])) == pytest.approx(0.25)

    def test_empty_key(self):
        with pytest.raises(UndefinedEstimateError):
            estimate_qber(_key([], []))

    def test_sampled_whole_key(self):
        key = _key([0, 1, 1, 0], [1, 1, 0, 0])
        assert estimate_qber(key, 1.0, rng_stream(1, "qber")) == pytest.approx(0.5)

    def test_sampled_needs_stream(self):
        with pytest.raises(DomainError):
            estimate_qber(_key([0, 1], [0, 1]), 0.5)

    def test_sampled_estimate_close(self):
        rng = rng_stream(2, "qber")
        reference = rng.integers(0, 2, 100_000, dtype=np.int8)
        bits = reference ^ (rng.random(100_000) < 0.05).astype(np.int8)
        estimate = estimate_qber(_key(bits, reference), 0.1, rng_stream(3, "qber"))
        assert abs(estimate - 0.05) < 4 * math.sqrt(0.05 * 0.95 / 10_000)


class TestEntropyAndRates:
    @pytest.mark.parametrize("p, h", [(0.0, 0.0), (1.0, 0.0), (0.5, 1.0), (0.11, 0.4999)])
    def test_binary_entropy(self, p, h):
        assert binary_entropy(p) == pytest.approx(h, abs=1e-4)

    @given(st.floats(0.0, 1.0))
    @settings(max_examples=300, deadline=None)
    def test_entropy_symmetric_and_bounded(self, p):
        h = binary_entropy(p)
        assert 0.0 <= h <= 1.0 + 1e-12
        assert h == pytest.approx(binary_entropy(1.0 - p), abs=1e-12)

    def test_entropy_domain(self):
        with pytest.raises(DomainError):
            binary_entropy(1.5)

    def test_gain_no_channel(self):
        assert analytic_gain(0.4, 0.0, 1e-6, 0.02) == (pytest.approx(1e-6), pytest.approx(0.5))

    def test_gain_nothing(self):
        assert analytic_gain(0.4, 0.0, 0.0, 0.02) == (0.0, 0.5)

    def test_gain_value(self):
        gain, error = analytic_gain(0.4, 1e-3, 0.0, 0.02)
        assert gain == pytest.approx(-math.expm1(-4e-4))
        assert error == pytest.approx(0.02)

    def test_secure_rate_floor(self):
        assert secure_key_rate(1e-3, 0.2, 1e-4, 0.3) == (0.0, True)

    def test_secure_rate_needs_f_at_least_one(self):
        with pytest.raises(ParameterError):
            secure_key_rate(1e-3, 0.02, 1e-3, 0.02, f_ec=0.9)

    def test_bbm92_rate(self):
        rate = bbm92_secure_rate(1e-3, 0.03, 1.1, 0.5)
        assert rate.rate == pytest.approx(0.5e-3 * (1 - 2.1 * binary_entropy(0.03)))
        assert not rate.insecure
        assert bbm92_secure_rate(1e-3, 0.2).insecure


class TestDecoyBounds:
    @given(st.floats(1e-6, 0.1), st.floats(0.0, 1e-4), st.floats(0.0, 0.1))
    @settings(max_examples=300, deadline=None)
    def test_lower_bound_below_true_yield(self, eta, y0, e_det):
        """With exact gains, Y1_lower never exceeds the true single-photon yield"""
        mu, nu = 0.4, 0.15
        q_mu, _ = analytic_gain(mu, eta, y0, e_det)
        q_nu, e_nu = analytic_gain(nu, eta, y0, e_det)
        bounds = decoy_bounds(q_mu, q_nu, e_nu, y0, mu, nu)
        true_y1 = y0 + eta - y0 * eta
        assert bounds.y1_lower <= true_y1 * (1 + 1e-9)

    def test_sound_over_channel_grid(self):
        """Y1_lower <= Y1 and e1_upper >= e1 everywhere; Y1_lower >= 0.9 Y1 when dark counts are negligible"""
        mu, nu = 0.4, 0.15
        grid = list(itertools.product(
            [1e-5, 1e-4, 1e-3, 1e-2, 0.1],
            [0.0, 1e-9, 1e-7, 1e-6, 1e-5],
            [0.0, 0.01, 0.03, 0.05, 0.1],
        ))
        assert len(grid) >= 100
        tight = 0
        for eta, y0, e_det in grid:
            q_mu, _ = analytic_gain(mu, eta, y0, e_det)
            q_nu, e_nu = analytic_gain(nu, eta, y0, e_det)
            bounds = decoy_bounds(q_mu, q_nu, e_nu, y0, mu, nu)
            # The analytic gains follow Y_n = Y0 + 1 - (1 - eta)^n
            true_y1 = y0 + eta
            true_e1 = (0.5 * y0 + e_det * eta) / true_y1
            point = (eta, y0, e_det)
            assert bounds.y1_lower <= true_y1 * (1 + 1e-9), point
            assert bounds.e1_upper >= true_e1 - 1e-9, point
            if y0 <= 1e-5 * eta:
                tight += 1
                assert bounds.y1_lower >= 0.9 * true_y1, point
        assert tight > 0

    def test_tight_at_field_point(self):
        eta, y0, e_det = 3.7e-5, 2e-7, 0.023
        q_mu, _ = analytic_gain(0.4, eta, y0, e_det)
        q_nu, e_nu = analytic_gain(0.15, eta, y0, e_det)
        bounds = decoy_bounds(q_mu, q_nu, e_nu, y0, 0.4, 0.15)
        assert not bounds.insecure
        assert bounds.y1_lower == pytest.approx(eta + y0, rel=0.2)
        assert e_det <= bounds.e1_upper < 0.1

    def test_order_of_intensities(self):
        with pytest.raises(ParameterError):
            decoy_bounds(1e-3, 1e-3, 0.02, 0.0, 0.15, 0.4)

    def test_no_signal_flags_insecure(self):
        bounds = decoy_bounds(0.0, 0.0, 0.5, 0.0, 0.4, 0.15)
        assert bounds.insecure
        assert bounds.y1_lower == 0.0


class TestAnalyticModels:
    def test_gate_capture(self):
        assert gate_capture(0.0, 0.5) == 1.0
        assert gate_capture(100.0, 0.8) == pytest.approx(1.0)
        assert gate_capture(1000.0, 0.1) < 0.2

    def test_gate_as_wide_as_jitter_fwhm(self):
        """A gate one FWHM wide keeps erf(sqrt(ln 2)) of the clicks"""
        assert gate_capture(100.0, 0.1) == pytest.approx(math.erf(math.sqrt(math.log(2.0))))
        assert gate_capture(100.0, 0.1) == pytest.approx(0.7610, abs=1e-4)

    def test_bbm92_budget_under_extra_arm_loss(self):
        """10 dB more loss per arm: multi-pair share flat, dark share about 10x"""
        near = bbm92_model(0.02, 1e-2, 1e-2, 1e-6, 1e-6, 0.03).error_budget
        far = bbm92_model(0.02, 1e-3, 1e-3, 1e-6, 1e-6, 0.03).error_budget
        assert far.multi_pair == pytest.approx(near.multi_pair, rel=0.01)
        assert far.dark / near.dark == pytest.approx(10.0, rel=0.05)
        assert far.visibility == pytest.approx(near.visibility, rel=0.01)

    def test_gated_dark_probability(self):
        assert gated_dark_probability(125.0, 0.8) == pytest.approx(2e-7, rel=1e-6)

    def test_bbm92_dark_only(self):
        model = bbm92_model(0.0, 0.1, 0.1, 0.05, 0.05, 0.0)
        assert model.qber == pytest.approx(0.5)
        assert model.p_coincidence == pytest.approx(0.05 * 0.05)

    def test_bbm92_error_budget_sums(self):
        model = bbm92_model(0.05, 0.2, 0.3, 1e-4, 1e-4, 0.03)
        budget = model.error_budget
        assert model.qber == pytest.approx(budget.visibility + budget.multi_pair + budget.dark)
        assert budget.visibility < 0.03

    def test_bbm92_dead_link(self):
        with pytest.raises(UndefinedEstimateError):
            bbm92_model(0.0, 0.1, 0.1, 0.0, 0.0, 0.0)


class TestShippedSessions:
    """Analytic predictions of the shipped field configurations"""

    def test_bb84_field_prediction(self, shipped_config):
        prediction = bb84_prediction(shipped_config.session("bb84_field"))
        assert prediction.qber == pytest.approx(0.029, abs=0.005)
        assert 0.7 * 2400 <= prediction.sifted_rate_bps <= 1.3 * 2400
        assert 400 <= prediction.secure_rate_bps <= 1600
        assert not prediction.bb84.insecure

    def test_bbm92_field_prediction(self, shipped_config):
        config = shipped_config.session("bbm92_field")
        prediction = bbm92_prediction(config)
        assert prediction.qber == pytest.approx(0.069, abs=0.005)
        assert prediction.sifted_rate_bps == pytest.approx(0.59, rel=0.1)
        assert prediction.secure_rate_bps * config.real_duration_s == pytest.approx(4200, rel=0.3)

    def test_bbm92_field_desk_scale_is_model_led(self, shipped_config):
        """The shipped slot count expects almost no coincidences, and the session says so"""
        config = shipped_config.session("bbm92_field")
        expected = bbm92_prediction(config).bbm92.p_coincidence * config.slots
        assert expected < 0.1
        assert any(note.startswith("desk scale") for note in config.ledger()["notes"])

    def test_wrong_protocol(self, shipped_config):
        with pytest.raises(ParameterError):
            bb84_session(shipped_config.session("bbm92_field"), 1)
        with pytest.raises(ParameterError):
            bbm92_session(shipped_config.session("bb84_field"), 1)


class TestMonteCarloAgainstModel:
    """Simulated gains and error rates agree with the closed-form model"""

    def test_bb84_gains(self):
        config = bb84_config(make_profile(de=0.1, dark_cps=1e4), slots=1_000_000, e_det=0.03)
        report = bb84_session(config, 11)
        for tally in report.decoy.intensities:
            assert tally.gain_z is not None
            assert abs(tally.gain_z) < 4, tally
            if tally.sifted:
                sigma = math.sqrt(tally.error_rate_model * (1 - tally.error_rate_model) / tally.sifted)
                assert abs(tally.error_rate - tally.error_rate_model) < 4 * sigma + 0.002, tally
        signal = next(t for t in report.decoy.intensities if t.label == "signal")
        decoy = next(t for t in report.decoy.intensities if t.label == "decoy")
        assert signal.sifted > 1000 and decoy.sifted > 500
        assert report.qber == pytest.approx(signal.error_rate)
        assert report.secure_rate_per_slot <= report.sifted_rate_per_slot
        assert report.scaling.simulated_slots == 1_000_000

    def test_bb84_deterministic_report(self):
        config = bb84_config(make_profile(de=0.1), slots=100_000)
        assert bb84_session(config, 4).model_dump() == bb84_session(config, 4).model_dump()

    def test_bbm92_accidentals_only(self):
        """Dark counts alone give uncorrelated bits"""
        config = bbm92_config(make_profile(de=0.1, dark_cps=5e7), slots=1_000_000, mean_pairs=0.0)
        report = bbm92_session(config, 2)
        assert report.coincidences > 0
        assert report.model.qber == pytest.approx(0.5)
        assert abs(report.qber - 0.5) < 4 * math.sqrt(0.25 / report.sifted_bits)
        assert report.secure_rate_bps == 0.0
        assert report.insecure

    def test_bbm92_correlated_pairs(self):
        config = bbm92_config(make_profile(de=0.5, dark_cps=10.0), slots=1_000_000, mean_pairs=0.02,
                              visibility_error=0.05)
        report = bbm92_session(config, 3)
        model = report.model
        assert abs(report.qber - model.qber) < 4 * report.qber_sigma + 0.005
        expected = model.sifted_rate_per_slot * config.slots
        assert abs(report.sifted_bits - expected) < 4 * math.sqrt(expected)

    def test_bb84_no_error_sources(self):
        """No dark counts and no misalignment leave the sifted key error free"""
        config = bb84_config(make_profile(de=0.1, dark_cps=0.0), slots=300_000, e_det=0.0)
        report = bb84_session(config, 5)
        assert report.sifted_bits > 500
        assert report.sifted_errors == 0
        assert report.qber == 0.0
        assert all(t.errors == 0 for t in report.decoy.intensities)

    def test_bbm92_no_error_sources(self):
        """Single pairs, no dark counts and perfect visibility give QBER 0"""
        config = bbm92_config(make_profile(de=0.5, dark_cps=0.0), slots=200_000, mean_pairs=0.05,
                              single_pair_only=True)
        report = bbm92_session(config, 6)
        assert report.tallies["multi_pair_windows"] == 0
        assert report.sifted_bits > 500
        assert report.sifted_errors == 0
        assert report.qber == 0.0

    def test_empty_key_reports_null_qber(self):
        config = bb84_config(make_profile(de=0.1, dark_cps=0.0), slots=1000, transmittance_db=60.0)
        report = bb84_session(config, 1)
        assert report.sifted_bits == 0
        assert report.qber is None
        assert report.secure_rate_bps == 0.0
        assert report.model.qber > 0


@pytest.mark.slow
def test_bb84_field_session_matches_model(shipped_config):
    """The shipped 10^8-slot field session agrees with its own analytic prediction"""
    config = shipped_config.session("bb84_field")
    report = bb84_session(config, 1)
    expected = report.model.sifted_rate_per_slot * config.slots
    assert abs(report.sifted_bits - expected) < 4 * math.sqrt(expected)
    assert report.qber is not None
    assert abs(report.qber - report.model.qber) < 4 * math.sqrt(report.model.qber * (1 - report.model.qber)
                                                                 / report.sifted_bits)
    assert report.scaling.real_duration_s == 3600.0
    assert report.scaling.model_sifted_bits_over_real_duration == pytest.approx(
        report.model.sifted_rate_bps * 3600.0)
