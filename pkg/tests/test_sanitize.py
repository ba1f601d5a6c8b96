import numpy as np
import pytest

from sdp.csimodel import (DeviceProfile, ImpairmentSet, PathParams, generate_stream,
                          synth_channel)
from sdp.sanitize import (PhaseFit, SanitizeConfig, ZeroMagnitudeSubcarrier,
                          fit_linear_phase, sanitize_frame, sanitize_stream,
                          unwrap_phase)
from sdp.csimodel import RawCsiFrame

TWO_PI = 2 * np.pi


def profile(k=30, n_rx=2, n_tx=1):
    return DeviceProfile(carrier_hz=5.18e9,
                         subcarrier_offsets_hz=np.linspace(-10e6, 10e6, k),
                         n_tx=n_tx, n_rx=n_rx, sample_rate_hz=100.0)


class TestUnwrap:
    def test_wrap_crossing_example(self):
        out = unwrap_phase(np.array([0.0, 3.0, -0.18319]))
        assert np.allclose(out, [0.0, 3.0, 6.09999], atol=1e-5)

    def test_smooth_vector_unchanged(self):
        v = np.array([0.0, 0.1, 0.2])
        assert np.array_equal(unwrap_phase(v), v)

    def test_constant_unchanged(self):
        v = np.full(5, 1.3)
        assert np.array_equal(unwrap_phase(v), v)

    def test_properties_on_random_vectors(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            v = rng.uniform(-np.pi, np.pi, size=rng.integers(2, 40))
            out = unwrap_phase(v)
            assert out[0] == v[0]
            d = np.diff(out)
            assert np.all(d > -np.pi) and np.all(d <= np.pi)
            # equal to the input modulo 2*pi
            assert np.abs(np.angle(np.exp(1j * (out - v)))).max() < 1e-9

    def test_exact_minus_pi_jump_maps_to_plus_pi(self):
        out = unwrap_phase(np.array([0.0, -np.pi]))
        assert out[1] == pytest.approx(np.pi)


class TestFitLinearPhase:
    def test_exact_line_recovers_coefficients(self):
        offsets = np.array([0.0, 1e6, 2e6])
        delta = 50e-9
        phases = 0.5 - TWO_PI * delta * offsets
        values = np.exp(1j * phases)
        fit = fit_linear_phase(values, offsets)
        assert fit.slope_rad_per_hz == pytest.approx(-TWO_PI * 5e-8, abs=1e-18)
        assert fit.intercept_rad == pytest.approx(0.5, abs=1e-12)
        assert fit.residual_rms_rad < 1e-12

    def test_flat_phase_gives_zeros(self):
        offsets = np.linspace(-5e6, 5e6, 12)
        fit = fit_linear_phase(np.ones(12), offsets)
        assert fit.slope_rad_per_hz == 0.0
        assert fit.intercept_rad == 0.0

    def test_noisy_line_matches_normal_equations_oracle(self):
        # independent closed-form least squares via the 2x2 normal equations
        rng = np.random.default_rng(123)
        offsets = np.linspace(-10e6, 10e6, 30)
        sigma = 0.01
        true_slope = -TWO_PI * 40e-9
        for _ in range(5):
            phases = 0.3 + true_slope * offsets + sigma * rng.standard_normal(30)
            values = np.exp(1j * phases)
            fit = fit_linear_phase(values, offsets)
            a = np.array([[30.0, offsets.sum()], [offsets.sum(), (offsets ** 2).sum()]])
            b = np.array([phases.sum(), (offsets * phases).sum()])
            intercept_ref, slope_ref = np.linalg.solve(a, b)
            assert fit.slope_rad_per_hz == pytest.approx(slope_ref, rel=1e-9)
            assert fit.intercept_rad == pytest.approx(intercept_ref, rel=1e-9)
            # error scale: ~3*sigma / (offset spread * sqrt(K))
            spread = offsets.max() - offsets.min()
            assert abs(fit.slope_rad_per_hz - true_slope) < 3 * sigma / (spread / np.sqrt(30))

    def test_zero_magnitude_raises(self):
        offsets = np.array([0.0, 1e6, 2e6])
        values = np.array([1.0, 0.0, 1.0], dtype=complex)
        with pytest.raises(ZeroMagnitudeSubcarrier):
            fit_linear_phase(values, offsets)


class TestSanitizeFrame:
    def test_removes_impairment_phase_from_flat_channel(self):
        prof = profile()
        imp = ImpairmentSet(sto_s=50e-9, pll_phase=0.3)
        stream = generate_stream([PathParams(1.0, 0.0, 0.0)], prof, imp, 0.05, 0)
        out = sanitize_frame(stream.frames[2], prof)
        assert np.abs(np.angle(out.values)).max() < 1e-9

    def test_output_refits_to_zero_slope_and_intercept(self):
        prof = profile()
        imp = ImpairmentSet(sto_s=200e-9, cfo_hz=100.0, pll_phase=1.0)
        stream = generate_stream([PathParams(1.0, 20e-9, 0.0), PathParams(0.4, 45e-9, 6.0)],
                                 prof, imp, 0.1, 0)
        for fr in stream.frames:
            out = sanitize_frame(fr, prof)
            for pair in out.values.reshape(-1, prof.k_raw):
                fit = fit_linear_phase(pair, prof.subcarrier_offsets_hz)
                assert abs(fit.slope_rad_per_hz) <= 1e-9
                assert abs(fit.intercept_rad) <= 1e-9

    def test_idempotent(self):
        prof = profile()
        imp = ImpairmentSet(sto_s=80e-9, pll_phase=0.7)
        stream = generate_stream([PathParams(1.0, 25e-9, 3.0)], prof, imp, 0.05, 1)
        once = sanitize_frame(stream.frames[0], prof)
        twice = sanitize_frame(once, prof)
        assert np.abs(twice.values - once.values).max() < 1e-9

    def test_magnitude_preserved(self):
        prof = profile()
        rng = np.random.default_rng(2)
        values = (rng.standard_normal((2, 1, prof.k_raw))
                  + 1j * rng.standard_normal((2, 1, prof.k_raw)))
        frame = RawCsiFrame(0.0, values)
        out = sanitize_frame(frame, prof)
        rel = np.abs(np.abs(out.values) - np.abs(values)) / np.abs(values)
        assert rel.max() <= 1e-12

    def test_mean_phase_removed(self):
        prof = profile()
        imp = ImpairmentSet(sto_s=60e-9, cfo_hz=33.0, pll_phase=0.9)
        stream = generate_stream([PathParams(1.0, 15e-9, 0.0)], prof, imp, 0.05, 3)
        out = sanitize_frame(stream.frames[4], prof)
        for pair in out.values.reshape(-1, prof.k_raw):
            assert abs(np.angle(pair).mean()) < 1e-9

    def test_conjugate_reference_cancels_shared_impairments(self):
        prof = profile(n_rx=2)
        imp = ImpairmentSet(sto_s=90e-9, cfo_hz=40.0, pll_phase=0.5)
        paths = {0: [PathParams(1.0, 10e-9, 0.0)], 1: [PathParams(0.8, 35e-9, 9.0)]}
        stream = generate_stream(paths, prof, imp, 0.1, 4)
        clean = generate_stream(paths, prof, ImpairmentSet(), 0.1, 4)
        cfg = SanitizeConfig(mode="conjugate_reference", reference_antenna=0)
        for fr_imp, fr_clean in zip(stream.frames, clean.frames):
            got = sanitize_frame(fr_imp, prof, cfg)
            want = fr_clean.values[1, 0] * np.conj(fr_clean.values[0, 0])
            assert np.abs(got.values[1, 0] - want).max() < 1e-9
            # reference output has identically zero phase
            assert np.abs(np.angle(got.values[0, 0])).max() < 1e-12

    def test_conjugate_reference_magnitudes_are_products(self):
        prof = profile(n_rx=2)
        rng = np.random.default_rng(6)
        values = rng.standard_normal((2, 1, prof.k_raw)) + 1j * rng.standard_normal((2, 1, prof.k_raw))
        out = sanitize_frame(RawCsiFrame(0.0, values), prof,
                             SanitizeConfig(mode="conjugate_reference"))
        want = np.abs(values[1, 0]) * np.abs(values[0, 0])
        assert np.allclose(np.abs(out.values[1, 0]), want, rtol=1e-12)

    def test_reference_out_of_range(self):
        prof = profile(n_rx=2)
        frame = RawCsiFrame(0.0, np.ones((2, 1, prof.k_raw), dtype=complex))
        with pytest.raises(ValueError):
            sanitize_frame(frame, prof, SanitizeConfig(mode="conjugate_reference",
                                                       reference_antenna=5))

    def test_propagates_zero_magnitude(self):
        prof = profile(n_rx=1)
        values = np.ones((1, 1, prof.k_raw), dtype=complex)
        values[0, 0, 3] = 0.0
        with pytest.raises(ZeroMagnitudeSubcarrier):
            sanitize_frame(RawCsiFrame(0.0, values), prof)


class TestSanitizeStream:
    def test_exact_recovery_over_sto_grid(self):
        prof = profile()
        for delta in (10e-9, 50e-9, 200e-9):
            imp = ImpairmentSet(sto_s=delta, pll_phase=0.3)
            stream = generate_stream([PathParams(1.0, 0.0, 0.0)], prof, imp, 0.03, 0)
            raw_fit = fit_linear_phase(stream.frames[0].values[0, 0],
                                       prof.subcarrier_offsets_hz)
            assert raw_fit.slope_rad_per_hz == pytest.approx(-TWO_PI * delta, rel=1e-9)
            out = sanitize_stream(stream)
            for fr in out.frames:
                fit = fit_linear_phase(fr.values[0, 0], prof.subcarrier_offsets_hz)
                assert abs(fit.slope_rad_per_hz) <= 1e-9

    def test_metadata_and_timestamps_preserved(self):
        prof = profile()
        stream = generate_stream([PathParams(1.0, 10e-9, 2.0)], prof,
                                 ImpairmentSet(sto_s=5e-8), 0.1, 0, provenance="tag")
        out = sanitize_stream(stream)
        assert out.provenance == "tag"
        assert np.array_equal(out.timestamps(), stream.timestamps())

    def test_deterministic(self):
        prof = profile()
        stream = generate_stream([PathParams(1.0, 10e-9, 2.0)], prof,
                                 ImpairmentSet(sto_s=5e-8, noise_std=0.05), 0.1, 0)
        a = sanitize_stream(stream).values_array()
        b = sanitize_stream(stream).values_array()
        assert np.array_equal(a, b)
