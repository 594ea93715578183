import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logharnack.model import (
    GruschinParams,
    SdeModel,
    check_assumptions,
    make_gruschin,
    model_from_config,
    psi_finiteness_gruschin,
)

from conftest import gruschin

T_GRID = [0.0, 0.5, 1.0, 2.0]


def test_gruschin_l1_coefficients():
    m = gruschin(1.0)
    assert np.allclose(m.sigma2(0.3, np.array([[2.0]])), [[[2.0]]])
    assert m.profile.phi(0.3, 0.7) == pytest.approx(0.7)
    assert np.all(m.profile.h(np.array([0.0, 1.0, 50.0])) == 1.0)
    assert np.all(m.linear_part == 0)
    assert np.allclose(m.sigma1(0.0), np.eye(1))


def test_gruschin_l2_coefficients():
    m = gruschin(2.0)
    assert np.allclose(m.sigma2(0.0, np.array([[-3.0]])), [[[9.0]]])
    r = np.array([0.5, 1.0, 3.0])
    assert np.allclose(m.profile.h(r), np.maximum(1.0, r**2))


def test_gruschin_two_dim_first_component():
    m = gruschin(0.5, m=2)
    assert np.allclose(m.sigma2(0.0, np.array([[3.0, 4.0]])), [[[math.sqrt(5.0)]]])
    assert m.profile.phi(0.0, 4.0) == pytest.approx(2.0)


def test_drifts_vanish():
    m = gruschin(1.5, m=2, d=3)
    x1 = np.ones((4, 2))
    x2 = np.ones((4, 3))
    assert np.all(m.drift1(0.0, x1) == 0)
    assert np.all(m.drift2(0.0, x1, x2) == 0)


@pytest.mark.parametrize("kw", [dict(l=0.0), dict(l=-1.0), dict(c1=0.5), dict(m=0)])
def test_invalid_params(kw):
    with pytest.raises(ValueError):
        GruschinParams(**kw)


@pytest.mark.parametrize("m,l,expected", [(1, 0.25, True), (1, 0.5, False), (3, 1.4, True), (2, 1.0, False)])
def test_psi_finiteness_examples(m, l, expected):
    assert psi_finiteness_gruschin(GruschinParams(m=m, l=l)) is expected


@given(m=st.integers(1, 6), l=st.floats(0.01, 5.0))
def test_psi_finiteness_is_exactly_2l_below_m(m, l):
    assert psi_finiteness_gruschin(GruschinParams(m=m, l=l)) == (2 * l < m)


def test_gruschin_l1_assumptions_hold():
    rep = check_assumptions(gruschin(1.0), T_GRID)
    assert rep.holds, rep.failures
    assert rep.a1_margin <= 0 and rep.a2_margin <= 0 and rep.a3_margin <= 0
    assert rep.to_dict()["scope"] == "sampled"


def test_a1_equality_for_gruschin():
    rep = check_assumptions(gruschin(0.7, m=2), T_GRID)
    assert rep.a1_margin == pytest.approx(0.0, abs=1e-14)


def test_weak_sigma1_flagged():
    base = gruschin(1.0)
    weak = SdeModel(
        m=1,
        d=1,
        drift1=base.drift1,
        drift2=base.drift2,
        sigma1=lambda t: 0.5 * np.eye(1),
        sigma2=base.sigma2,
        profile=base.profile,
        linear_part=base.linear_part,
        sigma2_scale=base.sigma2_scale,
    )
    rep = check_assumptions(weak, T_GRID)
    assert rep.a1_margin == pytest.approx(0.75)
    assert "A1" in rep.failures


def test_a3_at_listed_points():
    # l = 0.5: 1/2 (|0|^0.5 - |1|^0.5)^2 = 1/2 <= phi(1) h(1) = 1
    rep = check_assumptions(gruschin(0.5), [1.0], sample_points=[([0.0, 0.0], [1.0, 0.0])], n_default=1)
    assert rep.a3_margin <= -0.5 + 1e-12


def test_nonlinear_drift_detected():
    base = gruschin(1.0)
    bad = SdeModel(
        m=1,
        d=1,
        drift1=base.drift1,
        drift2=lambda t, x1, x2: x2**2,
        sigma1=base.sigma1,
        sigma2=base.sigma2,
        profile=base.profile,
        linear_part=np.zeros((1, 1)),
        sigma2_scale=base.sigma2_scale,
    )
    rep = check_assumptions(bad, T_GRID)
    assert any("affine" in f for f in rep.failures)


@settings(max_examples=30, deadline=None)
@given(l=st.floats(0.05, 1.4), seed=st.integers(0, 2**16))
def test_gruschin_margins_nonpositive_small_order(l, seed):
    # With d = 1 the sigma2 term is bounded by phi * h as long as l^2 / 2 <= 1.
    rep = check_assumptions(gruschin(l), T_GRID, n_default=64, seed=seed)
    assert rep.a3_margin <= 1e-12
    assert rep.holds


def test_gruschin_order_two_violates_sampled_a3():
    # For l = 2 the HS term 1/2 (x^2 - y^2)^2 exceeds |x - y|^2 max(1, r^2) near x = y, |x| large.
    rep = check_assumptions(gruschin(2.0), [1.0], sample_points=[([3.0, 0.0], [2.9, 0.0])])
    assert rep.a3_margin > 0
    assert "A3" in rep.failures


def test_model_from_config():
    m = model_from_config({"model": "gruschin", "m": 2, "d": 1, "l": 1.5, "c1": 2.0})
    assert (m.m, m.d, m.gruschin.l, m.gruschin.c1) == (2, 1, 1.5, 2.0)
    with pytest.raises(ValueError):
        model_from_config({"model": "heisenberg", "l": 1.0})


def test_split_checks_dimension(g1):
    a, b = g1.split([1.0, 2.0])
    assert a.tolist() == [1.0] and b.tolist() == [2.0]
    with pytest.raises(ValueError):
        g1.split([1.0, 2.0, 3.0])


def test_profile_invariants():
    for l in (0.3, 1.0, 2.5):
        p = make_gruschin(GruschinParams(l=l, c1=1.5)).profile
        assert p.phi(1.0, 0.0) == 0.0
        assert np.all(p.h(np.linspace(0, 5, 11)) >= 1.0)
        assert p.lam(0.0) == p.lam(10.0) == 1.0
        assert p.K(1.0) == 0.0 and p.Theta(1.0) == 0.0
