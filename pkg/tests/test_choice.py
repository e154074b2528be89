import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalpay.choice import (
    DEFAULT_CLIP_FRACTION,
    InversionError,
    ModeSplit,
    ModeUtilities,
    clip_shares,
    logistic,
    logit_split,
    recover_price,
)

utilities = st.floats(min_value=-200.0, max_value=200.0)
volumes = st.floats(min_value=1e-3, max_value=1e4)


class TestLogitSplit:
    def test_equal_utilities_split_evenly(self):
        split = logit_split(-5.0, -5.0, 80.0)
        assert split.x_amod == pytest.approx(40.0)
        assert split.x_pt == pytest.approx(40.0)

    def test_known_value(self):
        # share = 1 / (1 + e^{-1})
        split = logit_split(1.0, 0.0, 1.0)
        assert split.x_amod == pytest.approx(1.0 / (1.0 + math.exp(-1.0)))

    def test_large_gap_stable(self):
        split = logit_split(-500.0, 100.0, 10.0)
        assert 0.0 <= split.x_amod < 1e-12
        assert split.x_pt == pytest.approx(10.0)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            logit_split(0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            logit_split(float("nan"), 0.0, 1.0)

    @given(utilities, utilities, volumes)
    @settings(max_examples=100, deadline=None)
    def test_total_preserved(self, va, vp, alpha):
        split = logit_split(va, vp, alpha)
        assert split.x_amod + split.x_pt == pytest.approx(alpha, rel=1e-12)
        assert split.x_amod >= 0 and split.x_pt >= 0

    @given(utilities, utilities, st.floats(min_value=-50, max_value=50), volumes)
    @settings(max_examples=100, deadline=None)
    def test_shift_invariance(self, va, vp, shift, alpha):
        a = logit_split(va, vp, alpha)
        b = logit_split(va + shift, vp + shift, alpha)
        assert a.x_amod == pytest.approx(b.x_amod, rel=1e-9, abs=1e-12)


class TestRecoverPrice:
    def test_round_trip(self):
        utils = ModeUtilities(t_amod=0.2, t_pt=0.4, price=5.0, fare=3.0, vot=30.0)
        split = logit_split(utils.v_amod, utils.v_pt, 100.0)
        price = recover_price(0.2, 0.4, split.x_amod, split.x_pt, 3.0, 30.0)
        assert price == pytest.approx(5.0, abs=1e-9)

    @given(
        st.floats(min_value=0.01, max_value=2.0),
        st.floats(min_value=0.01, max_value=2.0),
        st.floats(min_value=-20.0, max_value=20.0),
        volumes,
    )
    @settings(max_examples=100, deadline=None)
    def test_round_trip_property(self, t_a, t_p, price, alpha):
        utils = ModeUtilities(t_amod=t_a, t_pt=t_p, price=price, fare=3.0, vot=30.0)
        split = logit_split(utils.v_amod, utils.v_pt, alpha)
        if min(split.x_amod, split.x_pt) <= 1e-8 * alpha:
            return  # near-boundary shares lose log precision; inversion untested there
        back = recover_price(t_a, t_p, split.x_amod, split.x_pt, 3.0, 30.0)
        assert back == pytest.approx(price, rel=1e-6, abs=1e-6)

    def test_boundary_raises(self):
        with pytest.raises(InversionError):
            recover_price(0.1, 0.1, 0.0, 1.0, 3.0, 30.0)
        with pytest.raises(InversionError):
            recover_price(0.1, 0.1, 1.0, 0.0, 3.0, 30.0)


class TestClipShares:
    def test_noop_in_interior(self):
        split = ModeSplit(x_amod=40.0, x_pt=60.0, total=100.0)
        clipped = clip_shares(split, 1e-4)
        assert clipped == split

    def test_clips_boundary(self):
        split = ModeSplit(x_amod=0.0, x_pt=100.0, total=100.0)
        clipped = clip_shares(split, DEFAULT_CLIP_FRACTION * 100.0)
        assert clipped.x_amod == pytest.approx(1e-4)
        assert clipped.x_amod + clipped.x_pt == pytest.approx(100.0)

    def test_bad_epsilon(self):
        split = ModeSplit(x_amod=40.0, x_pt=60.0, total=100.0)
        with pytest.raises(ValueError):
            clip_shares(split, 60.0)


class TestLogistic:
    @given(st.floats(min_value=-30, max_value=30))
    @settings(max_examples=100, deadline=None)
    def test_matches_definition(self, x):
        assert logistic(x) == pytest.approx(1.0 / (1.0 + math.exp(-x)), rel=1e-12)

    def test_extremes(self):
        assert logistic(-1e4) == pytest.approx(0.0)
        assert logistic(1e4) == pytest.approx(1.0)
