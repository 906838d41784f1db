from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from udot.errors import NoPreimage, NotConvex, ZeroMargin
from udot.surplus import (SurplusModel, available_surpluses, check_enhanced_twist,
                          check_nondegeneracy, check_twist, eval_bundle,
                          finite_difference_errors, get_surplus, legendre_dual, s_exp)

PRESET_DOMAINS = {
    "annulus": ((0.0, 2 * math.pi)),
    "strip": ((0.0, 1.0)),
    "tilted": ((0.0, 1.0)),
}


def _zero_model():
    z = lambda x, y: 0.0 * x[..., 0] + 0.0 * np.asarray(y)
    z2 = lambda x, y: np.zeros(np.broadcast(x[..., 0], np.asarray(y)).shape + (2,))
    return SurplusModel(z, z, z, z, z2, z2, z2, "zero")


def test_registry_lists_presets():
    assert available_surpluses() == ["annulus", "strip", "tilted"]
    with pytest.raises(KeyError):
        get_surplus("nope")


def test_bundle_annulus_at_unit_point(annulus):
    b = eval_bundle(annulus, np.array([1.0, 0.0]), 0.0)
    assert b.s == pytest.approx(1.0)
    assert b.s_y == pytest.approx(0.0)
    assert b.s_yy == pytest.approx(-1.0)
    assert np.allclose(b.grad_x_dy, [0.0, 1.0])


def test_bundle_strip(strip):
    b = eval_bundle(strip, np.array([0.3, 0.7]), 0.5)
    assert (b.s, b.s_y, b.s_yy) == pytest.approx((0.15, 0.3, 0.0))
    assert np.allclose(b.grad_x_dy, [1.0, 0.0])


@pytest.mark.parametrize("name", ["annulus", "strip", "tilted"])
def test_derivatives_match_finite_differences_on_many_points(name):
    model = get_surplus(name)
    rng = np.random.default_rng(11)
    x = rng.uniform(-1, 1, size=(1000, 2))
    lo, hi = PRESET_DOMAINS[name]
    y = rng.uniform(lo, hi, size=1000)
    errs = finite_difference_errors(model, x, y)
    assert max(errs.values()) <= 1e-5, errs


@given(x1=st.floats(-1, 1), x2=st.floats(-1, 1), y=st.floats(0, 1), c=st.floats(0, 3))
def test_convexified_derivatives_consistent(x1, x2, y, c):
    model = get_surplus("tilted", convexify_coefficient=c)
    errs = finite_difference_errors(model, np.array([[x1, x2]]), np.array([y]))
    assert max(errs.values()) <= 1e-5


def test_convexify_rejected_on_periodic():
    with pytest.raises(ValueError):
        get_surplus("annulus", convexify_coefficient=1.0)


def test_nondegeneracy_margins(strip, annulus, square, ring):
    assert check_nondegeneracy(strip, square, (0, 1)).min_value == pytest.approx(1.0)
    assert check_nondegeneracy(annulus, ring, (0, 2 * math.pi)).min_value == pytest.approx(1.0)
    with pytest.raises(ZeroMargin) as exc:
        check_nondegeneracy(_zero_model(), square, (0, 1))
    assert exc.value.report.min_value == 0.0
    assert "x" in exc.value.location


def test_margin_report_is_reproducible(tilted, square):
    a = check_twist(tilted, square, (0, 1), seed=3)
    b = check_twist(tilted, square, (0, 1), seed=3)
    assert a.to_dict() == b.to_dict()
    x, (y, ybar) = a.argmin_location
    # the reported minimum is re-evaluable at the reported location
    diff = tilted.grad_x(x, y) - tilted.grad_x(x, ybar)
    assert np.linalg.norm(diff) / abs(y - ybar) == pytest.approx(a.min_value)


def test_enhanced_twist(annulus, strip, tilted, ring, square):
    assert check_enhanced_twist(annulus, ring, (0, 2 * math.pi)).min_value > 0
    assert check_enhanced_twist(tilted, square, (0, 1)).min_value > 0
    with pytest.raises(ZeroMargin):
        check_enhanced_twist(strip, square, (0, 1))


def test_s_exp_examples(annulus, strip):
    assert s_exp(annulus, [0.75, 0.0], [1.0, 0.0]) == pytest.approx(0.0, abs=1e-9) or \
        s_exp(annulus, [0.75, 0.0], [1.0, 0.0]) == pytest.approx(2 * math.pi, abs=1e-9)
    assert s_exp(strip, [0.2, 0.9], [0.4, 0.0], (0, 1)) == pytest.approx(0.4, abs=1e-9)
    with pytest.raises(NoPreimage):
        s_exp(strip, [0.2, 0.9], [0.4, 0.3], (0, 1))


@given(x1=st.floats(0.05, 1), x2=st.floats(0.05, 1), y=st.floats(0.02, 0.98))
def test_s_exp_inverts_gradient(x1, x2, y):
    model = get_surplus("tilted")
    x = np.array([x1, x2])
    assert abs(s_exp(model, x, model.grad_x(x, y), (0, 1)) - y) <= 1e-7


def test_legendre_examples(strip):
    half_square = SurplusModel(
        eval=lambda x, y: 0.5 * np.asarray(y) ** 2 + 0 * x[..., 0],
        d_y=lambda x, y: np.asarray(y) + 0 * x[..., 0],
        d_yy=lambda x, y: 1.0 + 0 * x[..., 0] + 0 * np.asarray(y),
        d_yyy=lambda x, y: 0 * x[..., 0] + 0 * np.asarray(y),
        grad_x=None, grad_x_dy=None, grad_x_dyy=None, label="y2")
    val, ys = legendre_dual(half_square, [0.0, 0.0], 0.7, (-2, 2))
    assert (val, ys) == pytest.approx((0.245, 0.7))
    with pytest.raises(NotConvex):
        legendre_dual(strip, [0.3, 0.5], 0.8, (0, 1))
    val, ys = legendre_dual(get_surplus("strip", 1.0), [0.3, 0.5], 0.8, (0, 1))
    assert ys == pytest.approx(0.5, abs=1e-12)
    assert val == pytest.approx(0.125, abs=1e-12)


@given(x1=st.floats(0, 1), p=st.floats(0.0, 2.0), y=st.floats(0, 1))
def test_fenchel_inequality(x1, p, y):
    model = get_surplus("strip", 1.0)
    x = np.array([x1, 0.5])
    val, ys = legendre_dual(model, x, p, (0, 1))
    assert y * p <= float(model.eval(x, y)) + val + 1e-12
    assert ys * p == pytest.approx(float(model.eval(x, ys)) + val, abs=1e-12)


@given(x1=st.floats(0.1, 0.9), x2=st.floats(0.1, 0.9), y=st.floats(0.2, 0.8), c=st.floats(0.5, 3))
def test_dual_mixed_derivative_lower_bound(x1, x2, y, c):
    # |D_x d/dp s*(x, p)| at p = s_y(x, y) is at least |grad_x s_y| / s_yy
    model = get_surplus("tilted", c)
    x = np.array([x1, x2])
    p = float(model.d_y(x, y))
    h = 1e-5

    def ystar(z):
        return legendre_dual(model, z, p, (0, 1))[1]

    grad = np.array([(ystar(x + h * e) - ystar(x - h * e)) / (2 * h) for e in np.eye(2)])
    bound = np.linalg.norm(model.grad_x_dy(x, y)) / float(model.d_yy(x, y))
    assert np.linalg.norm(grad) >= bound * (1 - 1e-5)
