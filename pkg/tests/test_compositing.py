import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from omgsplat.compositing import (ALPHA_MAX, OpacityActivation, activate_opacity, alpha_baseline, alpha_omg,
                                  composite_pixel, nerf_alpha, omg_alpha_unclamped, taylor_gap)
from omgsplat.errors import InvalidInputError

unit_open = st.floats(1e-6, 1 - 1e-6)
unit_half_open = st.floats(1e-6, 1.0)


class TestAlpha:
    @pytest.mark.parametrize("o,G,expected", [(0.8, 1.0, 0.8), (0.0, 0.37, 0.0),
                                              (0.5, math.exp(-0.5), 0.303265)])
    def test_baseline(self, o, G, expected):
        assert alpha_baseline(o, G) == pytest.approx(expected, abs=1e-6)

    @pytest.mark.parametrize("o,G,s,expected", [(0.0, 0.7, 0.4, 0.0), (1.0, 1.0, math.log(2), 0.5),
                                                (1.0, 1.0, 1.0, 0.632121)])
    def test_omg(self, o, G, s, expected):
        assert alpha_omg(o, G, s) == pytest.approx(expected, abs=1e-6)

    def test_clamp(self):
        assert alpha_baseline(1.0, 1.0) == ALPHA_MAX
        assert alpha_omg(1.0, 1.0, 10.0) == ALPHA_MAX

    @given(unit_open, unit_half_open, unit_open)
    def test_ranges_and_ordering(self, o, G, s):
        a_b, a_o = alpha_baseline(o, G), alpha_omg(o, G, s)
        assert 0.0 <= a_o <= ALPHA_MAX and 0.0 <= a_b <= ALPHA_MAX
        assert a_o <= a_b

    @given(unit_open, unit_half_open, unit_open, st.floats(1.001, 2.0))
    def test_monotone_in_each_argument(self, o, G, s, k):
        base = omg_alpha_unclamped(o, G, s)
        assume(0 < base < 0.5)
        assert omg_alpha_unclamped(min(o * k, 1.0), G, s) >= base
        assert omg_alpha_unclamped(o, G * 0.5, s) < base
        assert omg_alpha_unclamped(o, G, s * 0.5) < base
        assert omg_alpha_unclamped(o * 0.5, G, s) < base

    @given(st.floats(0, 1), unit_half_open, unit_open)
    def test_nerf_identity_is_bitwise(self, o, G, s):
        assert omg_alpha_unclamped(o, G, s) == nerf_alpha(o * G * s, 1.0)

    @pytest.mark.parametrize("sigma,delta,expected", [(3.0, 0.0, 0.0), (math.log(2), 1.0, 0.5),
                                                      (2.0, 0.3, 0.451188)])
    def test_nerf_alpha(self, sigma, delta, expected):
        assert nerf_alpha(sigma, delta) == pytest.approx(expected, abs=1e-6)


class TestActivation:
    @given(st.floats(-700, 700))
    def test_sigmoid(self, raw):
        o, do = activate_opacity(raw)
        assert 0.0 <= o <= 1.0
        assert do == pytest.approx(o * (1 - o), rel=1e-12, abs=1e-300)

    @given(st.floats(-30, 30))
    def test_softplus_derivative(self, raw):
        o, do = activate_opacity(raw, OpacityActivation.SOFTPLUS)
        eps = 1e-6
        num = (activate_opacity(raw + eps, "softplus")[0] - activate_opacity(raw - eps, "softplus")[0]) / (2 * eps)
        assert o > 0
        assert do == pytest.approx(num, rel=1e-6, abs=1e-9)


class TestTaylorGap:
    @pytest.mark.parametrize("t,expected", [(0.0, 0.0), (0.1, 0.00484), (1.0, 0.367879)])
    def test_values(self, t, expected):
        assert taylor_gap(t) == pytest.approx(expected, abs=1e-5)

    @given(st.floats(0, 10))
    def test_bound(self, t):
        gap = taylor_gap(t)
        assert 0.0 <= gap <= t * t / 2

    def test_matches_direct_formula(self):
        # expm1 keeps the reference accurate to ~2e-16/t in relative terms
        t = np.linspace(0.01, 10, 500)
        np.testing.assert_allclose(taylor_gap(t), t + np.expm1(-t), rtol=1e-12)

    def test_negative_rejected(self):
        with pytest.raises(InvalidInputError):
            taylor_gap(-0.1)


class TestComposite:
    def test_empty(self):
        px = composite_pixel([], (0.2, 0.3, 0.4))
        np.testing.assert_array_equal(px.color, [0.2, 0.3, 0.4])
        assert px.transmittance == 1.0 and px.count == 0

    def test_single(self):
        px = composite_pixel([(0.5, (1, 1, 1))], (0, 0, 0))
        np.testing.assert_array_equal(px.color, [0.5] * 3)
        assert px.transmittance == 0.5

    def test_two_fragments(self):
        px = composite_pixel([(0.5, (1, 1, 1)), (0.5, (0, 0, 0))], (1, 1, 1))
        np.testing.assert_allclose(px.color, [0.75] * 3)
        assert px.transmittance == 0.25

    def test_unsorted_rejected(self):
        with pytest.raises(InvalidInputError):
            composite_pixel([(0.1, (1, 1, 1)), (0.1, (1, 1, 1))], (0, 0, 0), depths=[2.0, 1.0])

    def test_alpha_out_of_range_rejected(self):
        with pytest.raises(InvalidInputError):
            composite_pixel([(0.995, (1, 1, 1))], (0, 0, 0))

    def test_early_termination(self):
        frags = [(0.9, (1, 1, 1))] * 10
        px = composite_pixel(frags, (0, 0, 0), t_min=1e-4)
        # 1 - 0.9 rounds just below 0.1, so T falls under 1e-4 after four fragments
        assert px.count == 4
        assert px.transmittance < 1e-4

    def test_skip_threshold(self):
        px = composite_pixel([(1e-12, (1, 1, 1)), (0.5, (1, 1, 1))], (0, 0, 0))
        assert px.count == 1

    def test_arbitrary_channel_count(self):
        px = composite_pixel([(0.5, np.arange(5.0))], np.ones(5))
        np.testing.assert_allclose(px.color, 0.5 * np.arange(5.0) + 0.5)

    @given(st.lists(st.floats(0, ALPHA_MAX), max_size=30))
    def test_conservation_and_transmittance(self, alphas):
        px = composite_pixel([(a, (1, 1, 1)) for a in alphas], (0, 0, 0), t_min=0.0, alpha_skip=0.0)
        T = float(np.prod([1 - a for a in alphas]))
        assert abs(px.transmittance - T) <= 1e-12
        assert np.all(np.abs(px.color - (1 - px.transmittance)) <= 1e-12)
