import itertools

import numpy as np
import pytest
from scipy import stats

from fedamc.errors import (
    ConfigurationError,
    DegenerateInputError,
    InfiniteSNRError,
    LengthError,
)
from fedamc.signal import (
    NO_IMPAIRMENTS,
    SNR_GRID,
    ImpairmentSpec,
    ModulationScheme,
    NoiseKind,
    NoiseModel,
    SignalFrame,
    awgn_for_snr,
    fsk_waveform,
    frame_rng,
    map_symbols,
    measure_snr,
    noise_for_snr,
    normalize_frame,
    power,
    pulse_shape,
    rrc_taps,
    synthesize_frame,
    to_complex,
)

LINEAR = [s for s in ModulationScheme if s.is_linear]


def rrc_reference(t, beta):
    """Independent RRC evaluation; the removable singularities are handled by
    evaluating the closed form slightly off the singular point and averaging."""
    def raw(x):
        return (np.sin(np.pi * x * (1 - beta)) + 4 * beta * x * np.cos(np.pi * x * (1 + beta))) / (
            np.pi * x * (1 - (4 * beta * x) ** 2)
        )

    out = []
    for x in t:
        if abs(x) < 1e-12 or abs(abs(x) - 1 / (4 * beta)) < 1e-9:
            h = 1e-6
            out.append(0.5 * (raw(x + h) + raw(x - h)))
        else:
            out.append(raw(x))
    return np.array(out)


class TestMapSymbols:
    def test_bpsk_zero_is_plus_one(self):
        assert map_symbols([0], ModulationScheme.BPSK)[0] == 1 + 0j

    def test_qpsk_unit_magnitude(self):
        (sym,) = map_symbols([1, 1], ModulationScheme.QPSK)
        assert abs(sym) == pytest.approx(1.0)

    def test_qam16_enumerates_normalized_grid(self):
        bits = np.array(list(itertools.product([0, 1], repeat=4))).ravel()
        pts = map_symbols(bits, ModulationScheme.QAM16)
        grid = np.array([complex(i, q) for i in (-3, -1, 1, 3) for q in (-3, -1, 1, 3)])
        grid /= np.sqrt(np.mean(np.abs(grid) ** 2))
        assert len(set(np.round(pts, 12))) == 16
        assert sorted(np.round(pts, 12), key=lambda z: (z.real, z.imag)) == sorted(
            np.round(grid, 12), key=lambda z: (z.real, z.imag)
        )
        assert np.mean(np.abs(pts) ** 2) == pytest.approx(1.0)

    @pytest.mark.parametrize("scheme", LINEAR)
    def test_gray_neighbours_differ_by_one_bit(self, scheme):
        words = list(itertools.product([0, 1], repeat=scheme.bits_per_symbol))
        pts = map_symbols(np.array(words).ravel(), scheme)
        dmin = min(abs(a - b) for a, b in itertools.combinations(pts, 2))
        for (wa, a), (wb, b) in itertools.combinations(zip(words, pts), 2):
            if abs(abs(a - b) - dmin) < 1e-9:
                assert sum(x != y for x, y in zip(wa, wb)) == 1

    @pytest.mark.parametrize("scheme", LINEAR)
    def test_constellation_energy_over_random_symbols(self, scheme):
        rng = np.random.default_rng(3)
        bits = rng.integers(0, 2, size=10_000 * scheme.bits_per_symbol)
        syms = map_symbols(bits, scheme)
        assert abs(np.mean(np.abs(syms) ** 2) - 1.0) < 0.02

    def test_bit_count_must_divide(self):
        with pytest.raises(LengthError):
            map_symbols([0, 1, 1], ModulationScheme.QPSK)

    def test_fsk_returns_frequency_symbols(self):
        np.testing.assert_array_equal(map_symbols([0, 1, 1], ModulationScheme.CPFSK), [1.0, -1.0, -1.0])


class TestPulseShape:
    def test_impulse_peak_is_center_tap(self):
        taps = rrc_taps(8, 0.35)
        out = pulse_shape(np.array([1.0 + 0j]), sps=8)
        assert out.size == 8
        assert out[0].real == pytest.approx(taps.max())
        assert taps.argmax() == (taps.size - 1) // 2

    def test_constant_stream_reaches_dc_gain(self):
        # zero-stuffing spreads the DC gain over sps phases: the per-period
        # mean of the steady state equals sum(taps) / sps
        taps = rrc_taps(8, 0.35)
        out = pulse_shape(np.ones(64, dtype=complex), sps=8).real
        steady = out[8 * 16 : 8 * 48]
        period_means = steady.reshape(-1, 8).mean(axis=1)
        np.testing.assert_allclose(period_means, taps.sum() / 8, rtol=1e-12)

    def test_taps_match_closed_form(self):
        taps = rrc_taps(8, 0.35)
        t = np.arange(-32, 33) / 8
        ref = rrc_reference(t, 0.35)
        ref /= np.sqrt(np.sum(ref**2))
        np.testing.assert_allclose(taps, ref, atol=1e-8)
        assert np.sum(taps**2) == pytest.approx(1.0)

    def test_singular_point_matches_limit(self):
        # beta = 0.25 puts t = 1/(4 beta) = 1 symbol on an integer sample
        taps = rrc_taps(4, 0.25)
        t = np.arange(-16, 17) / 4
        ref = rrc_reference(t, 0.25)
        np.testing.assert_allclose(taps, ref / np.sqrt(np.sum(ref**2)), atol=1e-6)

    def test_output_length(self):
        assert pulse_shape(np.ones(16), sps=8).size == 128

    def test_sps_below_two_rejected(self):
        with pytest.raises(ConfigurationError):
            pulse_shape(np.ones(4), sps=1)


class TestMeasureSnr:
    def test_tone_over_scaled_tone_is_20db(self):
        t = np.linspace(0, 1, 1000, endpoint=False)
        s = np.sin(2 * np.pi * 5 * t)
        assert measure_snr(s, 0.1 * s) == pytest.approx(20.0)

    def test_identical_waveforms_zero_db(self):
        s = np.random.default_rng(0).standard_normal((2, 128))
        assert measure_snr(s, s) == pytest.approx(0.0)

    def test_minus_ten_db(self):
        rng = np.random.default_rng(1)
        s = rng.standard_normal(512) + 1j * rng.standard_normal(512)
        s /= np.sqrt(np.mean(np.abs(s) ** 2))
        e = rng.standard_normal(512) + 1j * rng.standard_normal(512)
        e *= np.sqrt(10.0 / np.mean(np.abs(e) ** 2))
        oracle = 10 * np.log10(np.sum(np.abs(s) ** 2) / np.sum(np.abs(e) ** 2))
        assert oracle == pytest.approx(-10.0)
        assert measure_snr(s, e) == pytest.approx(-10.0, abs=0.01)

    def test_zero_noise_is_distinct_error(self):
        with pytest.raises(InfiniteSNRError):
            measure_snr(np.ones(4), np.zeros(4))

    def test_shape_mismatch(self):
        with pytest.raises(LengthError):
            measure_snr(np.ones(4), np.ones(5))


class TestAwgn:
    def _unit(self, rng):
        s = rng.standard_normal(128) + 1j * rng.standard_normal(128)
        return s / np.sqrt(power(s))

    @pytest.mark.parametrize("snr, expected", [(0, 1.0), (-20, 100.0), (18, 10 ** (-1.8))])
    def test_noise_power(self, snr, expected):
        rng = np.random.default_rng(snr + 50)
        powers = [power(awgn_for_snr(self._unit(rng), snr, rng)) for _ in range(1000)]
        assert np.mean(powers) == pytest.approx(expected, rel=0.05)

    def test_iq_layout_and_snr(self):
        rng = np.random.default_rng(2)
        s = np.random.default_rng(0).standard_normal((2, 128))
        e = awgn_for_snr(s, 6, rng)
        assert e.shape == (2, 128)
        assert measure_snr(s, e) == pytest.approx(6.0, abs=1e-9)

    def test_zero_signal(self):
        with pytest.raises(DegenerateInputError):
            awgn_for_snr(np.zeros((2, 128)), 0, np.random.default_rng(0))

    def test_sinusoidal_mix_noise(self):
        model = NoiseModel(NoiseKind.SINUSOIDAL_MIX, ((1.0, 0.3, 0.0), (0.5, 1.1, 1.0)))
        s = np.random.default_rng(0).standard_normal((2, 128))
        e = noise_for_snr(s, 4, np.random.default_rng(1), model)
        assert measure_snr(s, e) == pytest.approx(4.0, abs=1e-9)

    def test_empty_sinusoidal_mix_is_zero(self):
        model = NoiseModel(NoiseKind.SINUSOIDAL_MIX, ())
        assert not np.any(model.waveform(64, np.random.default_rng(0)))
        with pytest.raises(DegenerateInputError):
            noise_for_snr(np.ones(8, dtype=complex), 0, np.random.default_rng(0), model)


class TestSynthesizeFrame:
    def test_bpsk_high_snr(self):
        f = synthesize_frame(ModulationScheme.BPSK, 18, NO_IMPAIRMENTS, np.random.default_rng(0))
        assert f.iq.shape == (2, 128)
        assert f.label == 0
        assert 17.5 <= measure_snr(f.clean, f.iq - f.clean) <= 18.5

    def test_qam64_low_snr_is_gaussian(self):
        f = synthesize_frame(ModulationScheme.QAM64, -20, ImpairmentSpec(), frame_rng(7, 5, -20, 0))
        x = f.iq.ravel()
        z = (x - x.mean()) / x.std()
        assert stats.kstest(z, "norm").pvalue > 0.05

    def test_deterministic(self):
        a = synthesize_frame(ModulationScheme.GFSK, 4, ImpairmentSpec(), frame_rng(1, 7, 4, 9))
        b = synthesize_frame(ModulationScheme.GFSK, 4, ImpairmentSpec(), frame_rng(1, 7, 4, 9))
        assert a.iq.tobytes() == b.iq.tobytes()

    def test_stream_independent_of_history(self):
        first = synthesize_frame(1, 0, ImpairmentSpec(), frame_rng(3, 1, 0, 5))
        for i in range(5):
            synthesize_frame(1, 0, ImpairmentSpec(), frame_rng(3, 1, 0, i))
        again = synthesize_frame(1, 0, ImpairmentSpec(), frame_rng(3, 1, 0, 5))
        assert first == again

    def test_off_grid_snr(self):
        with pytest.raises(ConfigurationError):
            synthesize_frame(0, 3, NO_IMPAIRMENTS, np.random.default_rng(0))

    def test_normalized_power(self):
        f = synthesize_frame(4, -4, ImpairmentSpec(), np.random.default_rng(9))
        assert power(f.iq) == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("scheme", list(ModulationScheme))
    def test_snr_round_trip_sampled(self, scheme):
        for snr in SNR_GRID[::3]:
            for i in range(10):
                f = synthesize_frame(scheme, snr, ImpairmentSpec(), frame_rng(11, scheme, snr, i))
                assert abs(measure_snr(f.clean, f.iq - f.clean) - snr) <= 0.5


class TestContinuousPhase:
    @pytest.mark.parametrize("bt", [None, 0.35])
    def test_phase_step_bound(self, bt):
        rng = np.random.default_rng(4)
        x = fsk_waveform(map_symbols(rng.integers(0, 2, 64), ModulationScheme.CPFSK), 8, 0.5, bt)
        dphi = np.angle(x[1:] * np.conj(x[:-1]))
        assert np.all(np.abs(dphi) <= 0.5 * np.pi / 8 + 1e-12)
        assert np.allclose(np.abs(x), 1.0)

    @pytest.mark.parametrize("scheme", [ModulationScheme.CPFSK, ModulationScheme.GFSK])
    def test_synthesized_clean_phase_bound(self, scheme):
        f = synthesize_frame(scheme, 10, NO_IMPAIRMENTS, np.random.default_rng(5))
        z = to_complex(f.clean)
        dphi = np.angle(z[1:] * np.conj(z[:-1]))
        assert np.all(np.abs(dphi) <= 0.5 * np.pi / 8 + 1e-9)


class TestNormalize:
    def test_power_four_halves_samples(self):
        iq = np.full((2, 4), np.sqrt(2.0))
        out = normalize_frame(SignalFrame(iq, 0, 0))
        np.testing.assert_allclose(out.iq, iq / 2)

    def test_idempotent(self):
        f = synthesize_frame(2, 0, ImpairmentSpec(), np.random.default_rng(1))
        np.testing.assert_allclose(normalize_frame(f).iq, f.iq, atol=1e-9)

    def test_random_frame(self):
        iq = np.random.default_rng(8).standard_normal((2, 128)) * 3.7
        out = normalize_frame(SignalFrame(iq, 1, 2))
        assert np.sum(out.iq**2) / 128 == pytest.approx(1.0, abs=1e-6)
        assert (out.label, out.snr_db) == (1, 2)

    def test_zero_frame(self):
        with pytest.raises(DegenerateInputError):
            normalize_frame(SignalFrame(np.zeros((2, 8)), 0, 0))


def test_disabled_impairments_are_identity():
    x = np.exp(1j * np.arange(16))
    assert NO_IMPAIRMENTS.apply(x, np.random.default_rng(0)) is x


def test_labels_contiguous():
    assert [int(s) for s in ModulationScheme] == list(range(8))
