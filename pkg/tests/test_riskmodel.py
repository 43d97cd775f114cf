import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bolusrl.riskmodel import RewardParams, risk_reward, risk_zero


def closed_form(bg):
    # written out independently of the module
    f = 1.509 * (math.log(bg) ** 1.084 - 5.381)
    return -10.0 * f * f


@pytest.mark.parametrize("bg, expected, tol", [
    (112.5, 0.0, 1e-6),
    (20.0, -100.0, 0.5),
    (600.0, -100.0, 0.5),
])
def test_reference_points(bg, expected, tol):
    assert risk_reward(bg) == pytest.approx(expected, abs=tol)


def test_matches_closed_form():
    for bg in np.linspace(10, 600, 97):
        assert risk_reward(bg) == pytest.approx(closed_form(bg), rel=1e-12, abs=1e-12)


def test_unimodal_on_integer_grid():
    left = risk_reward(np.arange(10.0, 113.0))
    right = risk_reward(np.arange(113.0, 601.0))
    assert np.all(np.diff(left) > 0)
    assert np.all(np.diff(right) < 0)
    assert left[-1] < 0 and right[0] < 0


def test_symmetry_of_reference_levels():
    lo, hi = abs(risk_reward(20.0)), abs(risk_reward(600.0))
    assert abs(lo - hi) / max(lo, hi) < 0.01


def test_clamping():
    assert risk_reward(5.0) == risk_reward(10.0)
    assert risk_reward(700.0) == risk_reward(600.0)


def test_scale_multiplies():
    assert risk_reward(250.0, RewardParams(scale=2.5)) == pytest.approx(2.5 * risk_reward(250.0))


def test_invalid_inputs():
    with pytest.raises(ValueError):
        risk_reward(float("nan"))
    with pytest.raises(ValueError):
        RewardParams(scale=0.0)


def test_zero_is_close_to_ideal_level():
    assert risk_zero() == pytest.approx(112.5, abs=0.05)


@given(st.floats(min_value=-1e3, max_value=1e4, allow_nan=False))
def test_reward_nonpositive(bg):
    assert risk_reward(bg) <= 0.0
