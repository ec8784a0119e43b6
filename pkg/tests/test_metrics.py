import math

import numpy as np
import pytest

from combidose.metrics import (
    estimate_power,
    percent_selection,
    pointwise_bias,
    signed_distance,
)
from combidose.model import ToxParams, mtd_curve


def line_curve(intercept):
    """MTD curve that is exactly y = intercept - x (negligible interaction).

    With rho10 = rho01 and the target theta chosen so the logit gap scales
    by `intercept`, the contour reduces to a straight line.
    """
    rho00, rho_axis = 0.05, 0.3
    l00 = math.log(rho00 / (1 - rho00))
    gap = math.log(rho_axis / (1 - rho_axis)) - l00
    lt = l00 + intercept * gap
    theta = 1.0 / (1.0 + math.exp(-lt))
    params = ToxParams(rho00=rho00, rho10=rho_axis, rho01=rho_axis, eta3=1e-12)
    return mtd_curve(params, theta)


TRUE = line_curve(1.0)      # y = 1 - x
EST_LOW = line_curve(0.9)   # y = 0.9 - x
EST_UP = line_curve(1.05)   # y = 1.05 - x
EST_DOWN = line_curve(0.95)


def test_signed_distance_fixture():
    d = signed_distance(TRUE, EST_LOW, 0.5, 0.5)
    assert d == pytest.approx(-0.0707, abs=1e-3)


def test_signed_distance_identical_curves_is_zero():
    xs, ys = TRUE.grid(11)
    for x, y in zip(xs, ys):
        assert abs(signed_distance(TRUE, TRUE, float(x), float(y))) < 1e-3


def test_signed_distance_sign_convention():
    assert signed_distance(TRUE, EST_UP, 0.5, 0.5) > 0
    assert signed_distance(TRUE, EST_LOW, 0.5, 0.5) < 0


def test_pointwise_bias_zero_for_exact_estimates():
    bias = pointwise_bias(TRUE, [TRUE, TRUE, TRUE], grid_n=51)
    assert np.max(np.abs(bias)) < 1e-3


def test_pointwise_bias_symmetric_estimates_cancel():
    bias = pointwise_bias(TRUE, [EST_UP, line_curve(0.95)], grid_n=51)
    assert np.max(np.abs(bias)) < 1e-3


def test_pointwise_bias_single_estimate_equals_signed_distance():
    bias = pointwise_bias(TRUE, [EST_LOW], grid_n=51)
    xs, ys = TRUE.grid(51)
    want = [signed_distance(TRUE, EST_LOW, float(x), float(y))
            for x, y in zip(xs, ys)]
    assert np.allclose(bias, want, atol=1e-12)


def test_percent_selection_perfect_estimates():
    sel = percent_selection(TRUE, [TRUE, TRUE], p=0.1, grid_n=51)
    assert np.all(sel == 1.0)


def test_percent_selection_strictness():
    # distances ~0.014-0.035 all exceed p*Delta for small enough p
    sel = percent_selection(TRUE, [line_curve(0.98)], p=0.005, grid_n=51)
    assert np.all(sel == 0.0)


def test_percent_selection_matches_hand_computed_indicator():
    # true y=1-x vs est y=0.9-x: perpendicular distance 0.1/sqrt(2) where the
    # foot lands inside the est segment (x in [0.05, 0.95]), otherwise the
    # distance to the nearer endpoint (0, 0.9) or (0.9, 0)
    p = 0.08
    grid_n = 101
    xs = np.linspace(0.0, 1.0, grid_n)
    d = np.empty(grid_n)
    for i, x in enumerate(xs):
        if x < 0.05:
            d[i] = math.hypot(x - 0.0, (1 - x) - 0.9)
        elif x > 0.95:
            d[i] = math.hypot(x - 0.9, (1 - x) - 0.0)
        else:
            d[i] = 0.1 / math.sqrt(2)
    want = (d <= p * np.hypot(xs, 1 - xs)).astype(float)
    got = percent_selection(TRUE, [EST_LOW], p=p, grid_n=grid_n)
    assert np.array_equal(got, want)


def test_estimate_power_counts():
    probs = [0.95, 0.7, 0.85, 0.9]
    assert estimate_power(probs, 0.8) == pytest.approx(0.75)
    assert estimate_power([0.1, 0.2], 0.8) == 0.0
    # strict inequality per the power estimator: 0.9 itself does not count
    assert estimate_power(probs, 0.9) == pytest.approx(0.25)
    assert estimate_power([0.95] * 4, 0.9) == 1.0
    with pytest.raises(ValueError):
        estimate_power([], 0.5)
