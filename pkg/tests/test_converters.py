import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from analogcim.converters import (ConverterAttachment, GainState, QuantizerParams, check_gain_constraint,
                                  dequantize, enforce_gain_constraint, fake_quantize, heuristic_input_scale,
                                  heuristic_output_scale, quantize, trained_adc_scale)
from analogcim.errors import CalibrationError, ConfigurationError, DegenerateLayerError
from oracles import hand_heuristic_output_scale

bits_st = st.integers(2, 12)
range_st = st.floats(1e-3, 1e3)


class TestQuantize:
    def test_zero(self):
        assert quantize(0.0, QuantizerParams(8, 1.0)) == 0

    def test_full_scale(self):
        assert quantize(2.5, QuantizerParams(8, 2.5)) == 127

    def test_saturation(self):
        assert quantize(-25.0, QuantizerParams(6, 2.5)) == -31

    def test_ties_round_away(self):
        q = QuantizerParams(3, 3.0)  # step 1
        np.testing.assert_array_equal(quantize([0.5, -0.5, 1.5, -1.5], q), [1, -1, 2, -2])

    @given(x=st.floats(-1e4, 1e4), b=bits_st, r=range_st)
    def test_odd(self, x, b, r):
        q = QuantizerParams(b, r)
        assert quantize(-x, q) == -quantize(x, q)

    @given(x=st.floats(-1e4, 1e4), b=bits_st, r=range_st)
    def test_code_range(self, x, b, r):
        assert abs(int(quantize(x, QuantizerParams(b, r)))) <= 2 ** (b - 1) - 1

    @given(u=st.floats(-1, 1), b=bits_st, r=range_st)
    def test_error_bound(self, u, b, r):
        q = QuantizerParams(b, r)
        x = u * r
        assert abs(x - fake_quantize(x, q)) <= q.step / 2 * (1 + 1e-9)

    def test_dequantize(self):
        q = QuantizerParams(4, 1.4)
        assert dequantize(7, q) == pytest.approx(1.4)

    @pytest.mark.parametrize("kw", [dict(bits=1, r_max=1.0), dict(bits=4, r_max=0.0), dict(bits=4, r_max=1.0, role="X")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            QuantizerParams(**kw)


class TestAttachment:
    def test_dac_has_one_more_bit(self):
        a = ConverterAttachment.build("fc", 6, 1.0, 2.0)
        assert (a.dac.bits, a.adc.bits) == (7, 6)

    def test_mismatched_bits(self):
        with pytest.raises(ValueError):
            ConverterAttachment("fc", QuantizerParams(8, 1, "DAC"), QuantizerParams(8, 1, "ADC"))


class TestHeuristics:
    @pytest.mark.parametrize("p, n, expected", [(1.27, 8, 100.0), (127, 8, 1.0), (3.0, 5, 5.0)])
    def test_input_scale(self, p, n, expected):
        assert heuristic_input_scale(p, n) == pytest.approx(expected)

    def test_input_scale_rejects_nonpositive(self):
        with pytest.raises(CalibrationError):
            heuristic_input_scale(0.0, 8)

    def test_output_scale_cancellation(self):
        assert heuristic_output_scale(8, 9, g_max=1, crossbar_rows=1) == pytest.approx(127 / 255)

    def test_output_scale_sqrt_law(self):
        a = heuristic_output_scale(8, 9, crossbar_rows=1024)
        b = heuristic_output_scale(8, 9, crossbar_rows=4096)
        assert b / a == pytest.approx(0.5)

    @pytest.mark.parametrize("n_adc", [4, 6, 7, 8])
    def test_output_scale_hand(self, n_adc):
        expected = hand_heuristic_output_scale(n_adc, n_adc + 1, 25e-6, 1024)
        assert heuristic_output_scale(n_adc, n_adc + 1, g_max=25e-6) == pytest.approx(expected, rel=1e-12)

    def test_output_scale_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            heuristic_output_scale(8, 9, g_max=0)


class TestTrainedScale:
    def test_single_identity(self):
        g_max, n = 25e-6, 127
        # term = r_adc * g_max / w * n / r_dac = 1
        r_adc = 1.0 / (g_max * n)
        t, scale = trained_adc_scale([r_adc], [1.0], [1.0], g_max, 8)
        assert t == pytest.approx(1.0) and scale == pytest.approx(127)

    def test_identical_layers(self):
        one = trained_adc_scale([2.0], [0.5], [0.3], 1e-5, 6)
        three = trained_adc_scale([2.0] * 3, [0.5] * 3, [0.3] * 3, 1e-5, 6)
        assert three[0] == pytest.approx(one[0])

    def test_three_layers_by_hand(self):
        adc, dac, w = [1.2, 0.7, 3.1], [0.4, 2.2, 1.1], [0.9, 0.35, 1.7]
        g_max, n = 25e-6, 2 ** 7 - 1
        terms = [a * g_max / ww * n / d for a, d, ww in zip(adc, dac, w)]
        t, scale = trained_adc_scale(adc, dac, w, g_max, 8)
        assert t == pytest.approx(sum(terms) / 3) and scale == pytest.approx(n / t)

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            trained_adc_scale([], [], [], 1e-5, 8)


class TestGainConstraint:
    def test_unit(self):
        out = enforce_gain_constraint([ConverterAttachment.build("a", 8, 5.0, 1.0)], GainState(1.0, (1.0,)))
        assert out[0].dac.r_max == pytest.approx(1.0)

    def test_negative_s_uses_magnitude(self):
        out = enforce_gain_constraint([ConverterAttachment.build("a", 8, 5.0, 1.5)], GainState(-2.0, (0.5,)))
        assert out[0].dac.r_max == pytest.approx(6.0)

    @given(st.lists(st.tuples(st.floats(0.01, 10), st.floats(0.01, 10)), min_size=1, max_size=6),
           st.floats(0.01, 10) | st.floats(-10, -0.01))
    def test_round_trip(self, layers, s):
        atts = [ConverterAttachment.build(f"l{i}", 6, 1.0, r) for i, (r, _) in enumerate(layers)]
        gain = GainState(s, tuple(w for _, w in layers))
        out = enforce_gain_constraint(atts, gain)
        assert check_gain_constraint(out, gain, rel_tol=1e-12)
        assert all(math.isclose(a.gain(w), abs(s), rel_tol=1e-12) for a, (_, w) in zip(out, layers))

    def test_degenerate(self):
        with pytest.raises(DegenerateLayerError):
            enforce_gain_constraint([ConverterAttachment.build("a", 8, 1, 1)], GainState(1.0, (0.0,)))

    def test_zero_gain(self):
        with pytest.raises(ValueError):
            GainState(0.0)
