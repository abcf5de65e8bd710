import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hdtsim.phasemath import (
    TWO_PI,
    PhaseAccumulator,
    RollingWindow,
    inv_park,
    inv_park_matrix,
    park,
    park_matrix,
    phase_advance,
    positive_sequence,
    rolling_rms,
    window_capacity,
    wrap_angle,
)

angles = st.floats(min_value=-50.0, max_value=50.0, allow_nan=False)
finite = st.floats(min_value=-1e4, max_value=1e4, allow_nan=False)
vec3 = st.lists(finite, min_size=3, max_size=3).map(np.array)


class TestPhaseAdvance:
    def test_full_cycle_wraps_to_zero(self):
        acc = phase_advance(PhaseAccumulator(0.0), 50.0, 0.02)
        assert acc.theta == pytest.approx(0.0, abs=1e-12) or acc.theta == pytest.approx(TWO_PI, abs=1e-12)

    def test_quarter_cycle(self):
        acc = phase_advance(PhaseAccumulator(0.0), 50.0, 0.005)
        np.testing.assert_allclose(acc.theta, math.pi / 2, rtol=1e-14)

    def test_wrap_near_two_pi(self):
        # 6.28 + 2*pi*50*2e-5 - 2*pi
        acc = phase_advance(PhaseAccumulator(6.28), 50.0, 2e-5)
        np.testing.assert_allclose(acc.theta, 0.003097878127593212, rtol=1e-9)

    @pytest.mark.parametrize("f, dt", [(0.0, 2e-5), (-1.0, 2e-5), (50.0, 0.0), (math.nan, 2e-5)])
    def test_rejects_bad_input(self, f, dt):
        with pytest.raises(ValueError):
            phase_advance(PhaseAccumulator(0.0), f, dt)

    @given(angles)
    def test_wrap_range(self, theta):
        w = wrap_angle(theta)
        assert 0.0 <= w < TWO_PI

    @given(st.floats(min_value=45.0, max_value=55.0))
    def test_step_bounded(self, f):
        dt = 2e-5
        acc = phase_advance(PhaseAccumulator(1.0), f, dt)
        np.testing.assert_allclose(acc.theta - 1.0, TWO_PI * f * dt, rtol=1e-9)
        assert acc.theta - 1.0 <= TWO_PI * 55.0 * dt + 1e-15


class TestPark:
    def test_zero(self):
        np.testing.assert_array_equal(park(0.7, np.zeros(3)), np.zeros(3))

    def test_common_mode(self):
        np.testing.assert_allclose(park(1.3, np.ones(3)), [0.0, 0.0, 1.0], atol=1e-15)

    def test_inverse_example(self):
        np.testing.assert_allclose(inv_park(math.pi / 2, [1.0, 0.0, 0.0]), [1.0, -0.5, -0.5], atol=1e-15)

    def test_inverse_zero_sequence(self):
        np.testing.assert_allclose(inv_park(2.1, [0.0, 0.0, 3.5]), [3.5, 3.5, 3.5], atol=1e-15)

    @given(angles, st.floats(min_value=-1e4, max_value=1e4))
    def test_balanced_set_is_d_axis(self, theta, amp):
        np.testing.assert_allclose(park(theta, positive_sequence(theta, amp)), [amp, 0.0, 0.0],
                                   atol=1e-12 * max(1.0, abs(amp)))

    @given(angles, vec3)
    def test_round_trip(self, theta, x):
        scale = max(1.0, float(np.max(np.abs(x))))
        np.testing.assert_allclose(inv_park(theta, park(theta, x)), x, atol=1e-12 * scale)
        np.testing.assert_allclose(park(theta, inv_park(theta, x)), x, atol=1e-12 * scale)

    @given(angles)
    def test_matrices_are_inverse(self, theta):
        np.testing.assert_allclose(park_matrix(theta) @ inv_park_matrix(theta), np.eye(3), atol=1e-14)

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            park(0.0, [1.0, 2.0])


class TestRollingWindow:
    def test_capacity_one_cycle(self):
        assert window_capacity(50.0, 2e-5) == 1000

    def test_two_samples(self):
        win = RollingWindow(4)
        rolling_rms(win, 3.0)
        _, rms = rolling_rms(win, 4.0)
        np.testing.assert_allclose(rms, 3.5355339059327378, rtol=1e-15)

    def test_constant_stream(self):
        win = RollingWindow(10)
        _, rms = rolling_rms(win, -2.5)
        assert rms == 2.5

    def test_sinusoid_cycle(self):
        dt, f, amp = 2e-5, 50.0, 7.0
        win = RollingWindow(window_capacity(f, dt))
        rms = 0.0
        for k in range(window_capacity(f, dt)):
            win, rms = rolling_rms(win, amp * math.sin(TWO_PI * f * k * dt))
        np.testing.assert_allclose(rms, amp / math.sqrt(2.0), rtol=1e-3)

    def test_evicts_oldest(self):
        win = RollingWindow(2)
        for v in (100.0, 3.0, 4.0):
            win, rms = rolling_rms(win, v)
        np.testing.assert_allclose(rms, math.sqrt(12.5), rtol=1e-15)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            rolling_rms(RollingWindow(3), math.inf)

    def test_rejects_zero_capacity(self):
        with pytest.raises(ValueError):
            RollingWindow(0)

    @given(st.lists(st.floats(min_value=-1e3, max_value=1e3), min_size=1, max_size=200),
           st.integers(min_value=1, max_value=30))
    def test_matches_direct_rms(self, xs, cap):
        win = RollingWindow(cap)
        for x in xs:
            win, rms = rolling_rms(win, x)
        tail = np.array(xs[-cap:])
        np.testing.assert_allclose(rms, np.sqrt(np.mean(tail ** 2)), rtol=1e-9, atol=1e-9)
