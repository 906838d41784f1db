from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from udot.errors import EmptyLevelSet, NonPositiveMass, NotElliptic
from udot.operators import (OperatorPoint, dG1_dq, dG2_dp, dG2_dq, dG2_dy, ellipticity_constant,
                            eval_G1, eval_G2, evaluate_batch, invert_G2, write_batch_csv)

from _points import operator_points, relative_error
from conftest import ANNULUS_G

H = 1e-4


def annulus_g2(q):
    return ANNULUS_G + 2 * q / (3 * math.pi)


@pytest.mark.parametrize("theta", [0.0, 1.0, 2.5, 4.0])
def test_annulus_values(cases, theta):
    m, r, f = cases["annulus"]
    pt = OperatorPoint(theta, 0.0, 0.0)
    assert eval_G2(m, r, f, pt) == pytest.approx(ANNULUS_G, abs=1e-3)
    assert eval_G1(m, r, f, pt) == pytest.approx(0.0, abs=1e-3)
    assert dG2_dq(m, r, f, pt) == pytest.approx(2 / (3 * math.pi), abs=1e-3)
    assert dG1_dq(m, r, f, pt) == pytest.approx(4 / (3 * math.pi), abs=1e-3)
    assert dG2_dy(m, r, f, pt) == pytest.approx(0.0, abs=1e-3)
    lam, th = ellipticity_constant(m, r, f, pt)
    assert th == pytest.approx(1.0, abs=1e-3)
    assert lam == pytest.approx(ANNULUS_G, abs=1e-3)
    pt3 = OperatorPoint(theta, 0.0, 0.3)
    assert eval_G2(m, r, f, pt3) == pytest.approx(annulus_g2(0.3), abs=1e-3)


def test_annulus_dp_matches_difference_quotient(cases):
    m, r, f = cases["annulus"]
    pt = OperatorPoint(0.0, 0.0, 0.0)
    fd = (eval_G2(m, r, f, OperatorPoint(0.0, H, 0.0)) - eval_G2(m, r, f, OperatorPoint(0.0, -H, 0.0))) / (2 * H)
    assert dG2_dp(m, r, f, pt) == pytest.approx(fd, abs=1e-3)


@pytest.mark.parametrize("y", [0.1, 0.5, 0.9])
def test_strip_values(cases, y):
    m, r, f = cases["strip"]
    pt = OperatorPoint(y, 0.5, 2.0)
    assert eval_G2(m, r, f, pt) == pytest.approx(2.0, abs=1e-6)
    assert eval_G1(m, r, f, pt) == pytest.approx(2.0, abs=1e-6)
    assert dG2_dq(m, r, f, pt) == pytest.approx(1.0, abs=1e-9)
    assert dG1_dq(m, r, f, pt) == pytest.approx(1.0, abs=1e-9)
    assert dG2_dp(m, r, f, pt) == pytest.approx(0.0, abs=1e-6)
    assert dG2_dy(m, r, f, pt) == pytest.approx(0.0, abs=1e-6)
    assert ellipticity_constant(m, r, f, pt) == pytest.approx((1.0, 2.0))


# frozen from tests/oracles/generate.py (closed-form integration along the segment)
TILTED_G2 = [
    ((0.5, 0.3, 0.6), 0.18),
    ((0.8, 0.5, 0.5), 0.125),
    ((0.3, 0.9, 0.7), 0.245),
    ((0.6, 1.2, 0.9), 0.16055555555555562),
    ((0.9, 0.25, 0.1), 0.005),
]


@pytest.mark.parametrize("pt,expected", TILTED_G2)
def test_tilted_matches_segment_oracle(cases, pt, expected):
    m, r, f = cases["tilted"]
    assert eval_G2(m, r, f, OperatorPoint(*pt)) == pytest.approx(expected, abs=1e-10)


def test_g1_equals_g2_above_max_syy(cases):
    for name in ("annulus", "strip", "tilted"):
        m, r, f = cases[name]
        pt = OperatorPoint(0.5, 0.3, 5.0)
        assert eval_G1(m, r, f, pt) == pytest.approx(eval_G2(m, r, f, pt), rel=1e-12)
        assert dG1_dq(m, r, f, pt) == pytest.approx(dG2_dq(m, r, f, pt), rel=1e-12)


def _fd(fun, m, r, f, pt, field):
    lo = OperatorPoint(**{**pt.__dict__, field: getattr(pt, field) - H})
    hi = OperatorPoint(**{**pt.__dict__, field: getattr(pt, field) + H})
    return (fun(m, r, f, hi) - fun(m, r, f, lo)) / (2 * H)


@pytest.mark.parametrize("name", ["annulus", "strip", "tilted"])
def test_first_derivatives_match_difference_quotients(cases, name):
    m, r, f = cases[name]
    for pt in operator_points(name, 20, seed=5):
        assert relative_error(dG2_dq(m, r, f, pt), _fd(eval_G2, m, r, f, pt, "q")) <= 1e-4
        assert relative_error(dG1_dq(m, r, f, pt), _fd(eval_G1, m, r, f, pt, "q")) <= 1e-4
        assert relative_error(dG2_dp(m, r, f, pt), _fd(eval_G2, m, r, f, pt, "p")) <= 1e-3
        assert relative_error(dG2_dy(m, r, f, pt), _fd(eval_G2, m, r, f, pt, "y")) <= 1e-3


@pytest.mark.parametrize("name", ["annulus", "strip", "tilted"])
def test_ellipticity_inequalities(cases, name):
    m, r, f = cases[name]
    for pt in operator_points(name, 15, seed=9):
        g = eval_G2(m, r, f, pt)
        if g <= 0:
            continue
        lam, _ = ellipticity_constant(m, r, f, pt)
        for dq in (0.1, 0.5, 1.0):
            g2 = eval_G2(m, r, f, OperatorPoint(pt.y, pt.p, pt.q + dq))
            assert g2 >= g - 1e-9
            assert g2 - g >= lam * dq - 1e-3 * dq


def test_not_elliptic_on_empty_sublevel(cases):
    m, r, f = cases["annulus"]
    with pytest.raises(NotElliptic):
        ellipticity_constant(m, r, f, OperatorPoint(0.0, 0.0, -2.0))
    assert eval_G2(m, r, f, OperatorPoint(0.0, 0.0, -2.0)) == 0.0


def test_invert_examples(cases):
    m, r, f = cases["strip"]
    assert invert_G2(m, r, f, 0.3, 0.5, 2.0) == pytest.approx(2.0, abs=1e-8)
    m, r, f = cases["annulus"]
    assert invert_G2(m, r, f, 0.0, 0.0, ANNULUS_G) == pytest.approx(0.0, abs=1e-6)
    assert invert_G2(m, r, f, 0.0, 0.0, annulus_g2(0.1)) == pytest.approx(0.1, abs=1e-5)
    with pytest.raises(NonPositiveMass):
        invert_G2(m, r, f, 0.0, 0.0, 0.0)
    with pytest.raises(EmptyLevelSet):
        invert_G2(m, r, f, 0.0, 1.5, 0.1)


@given(y=st.floats(0.2, 0.95), p=st.floats(0.1, 0.9), beta=st.floats(0.01, 3.0))
def test_invert_round_trip(cases, y, p, beta):
    m, r, f = cases["tilted"]
    q = invert_G2(m, r, f, y, p, beta)
    assert eval_G2(m, r, f, OperatorPoint(y, p, q)) == pytest.approx(beta, rel=1e-7)


@given(y=st.floats(0, 2 * math.pi), p=st.floats(-0.95, 0.95), q=st.floats(-1, 1), dq=st.floats(0, 1))
def test_g2_nondecreasing_and_nonnegative(cases, y, p, q, dq):
    m, r, f = cases["annulus"]
    a = eval_G2(m, r, f, OperatorPoint(y, p, q))
    b = eval_G2(m, r, f, OperatorPoint(y, p, q + dq))
    assert a >= 0 and b >= a - 1e-9


def test_batch_and_csv(tmp_path, cases):
    m, r, f = cases["annulus"]
    pts = [OperatorPoint(t, 0.0, 0.0) for t in (0.0, 1.0, 2.0)]
    rows = evaluate_batch(m, r, f, pts, workers=2)
    assert rows == evaluate_batch(m, r, f, pts)
    path = tmp_path / "batch.csv"
    write_batch_csv(path, rows)
    got = list(csv.reader(open(path)))
    assert got[0] == ["y", "p", "q", "G1", "G2", "dG2dq", "lambda"]
    assert float(got[1][4]) == pytest.approx(ANNULUS_G, abs=1e-3)
    assert float(got[1][6]) == pytest.approx(ANNULUS_G, abs=1e-3)
