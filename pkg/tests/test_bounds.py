import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from logharnack.bounds import (
    PreconditionError,
    bound_row,
    closed_form_bound,
    estimate_psiT,
    estimate_PsiT,
    gaussian_negative_moment,
    psi_quadrature_gruschin,
    psi_scaling,
    required_closed_form_constant,
    drift_bound,
    gramian_bound,
)
from logharnack.control import entropy_bound_ab0
from logharnack.model import AssumptionProfile
from logharnack.parallel import ROLE_OFFSETS
from logharnack.paths import MCConfig, TimeGrid, increments_batch

from conftest import constant_sigma_model, gruschin

# avoid subnormal gaps where d**2 underflows to zero
dist = st.one_of(st.just(0.0), st.floats(1e-6, 3))

SMALL_MC = MCConfig(n_paths=4000, dt_divisor=64, seed=3)


def test_negative_moment_against_direct_integral():
    for l in (0.05, 0.2, 0.45):
        direct, _ = integrate.quad(
            lambda z: 2 * z ** (-2 * l) * math.exp(-z * z / 2) / math.sqrt(2 * math.pi), 0, math.inf
        )
        assert gaussian_negative_moment(l) == pytest.approx(direct, rel=1e-8)
    with pytest.raises(ValueError):
        gaussian_negative_moment(0.5)


@pytest.mark.parametrize("l", [0.1, 0.25, 0.4])
@pytest.mark.parametrize("T", [0.5, 1.0, 3.0])
def test_quadrature_at_origin_closed_form(l, T):
    assert psi_quadrature_gruschin(l, 0.0, T) == pytest.approx(T**-l * gaussian_negative_moment(l), rel=1e-8)


@pytest.mark.parametrize("l", [0.1, 0.3])
def test_quadrature_scaling(l):
    ratio = psi_quadrature_gruschin(l, 0.0, 4.0) / psi_quadrature_gruschin(l, 0.0, 1.0)
    assert ratio == pytest.approx(4.0**-l, abs=1e-6)


def test_quadrature_small_order_tends_to_one():
    assert psi_quadrature_gruschin(1e-6, 0.7, 1.0) == pytest.approx(1.0, abs=1e-4)


@pytest.mark.parametrize("l", [0.5, 0.9, 0.0])
def test_quadrature_rejects(l):
    with pytest.raises(ValueError):
        psi_quadrature_gruschin(l, 0.0, 1.0)


def test_quadrature_away_from_origin_by_sampling():
    # independent check of the shifted case: E|1 + sqrt(t) N|^{-2l} with a fixed large sample
    rng = np.random.default_rng(0)
    z = rng.standard_normal(2_000_000)
    l = 0.1
    vals = [np.mean(np.abs(1 + math.sqrt(t) * z) ** (-2 * l)) for t in np.linspace(1, 2, 9)]
    assert psi_quadrature_gruschin(l, 1.0, 1.0) == pytest.approx(max(vals), rel=3e-3)


@given(m=st.integers(1, 3), l=st.floats(0.05, 3.0))
@settings(max_examples=25, deadline=None)
def test_psi_infinite_exactly_when_l_at_least_half_m(m, l):
    est = estimate_psiT(gruschin(l, m=m), np.zeros(m), np.zeros(m), 1.0, MCConfig(64, 4, 0))
    if 2 * l >= m:
        assert not est.finite and est.method == "analytic-divergent" and est.n == 0
    else:
        assert est.finite and est.method == "mc"


def test_psi_trivial_model_is_one():
    est = estimate_psiT(constant_sigma_model(), [0.3], [0.0], 1.0, SMALL_MC)
    assert est.value == 1.0 and est.stderr == 0.0


def test_psi_mc_matches_quadrature_small_order():
    est = estimate_psiT(gruschin(0.1), [0.0], [0.0], 1.0, MCConfig(20_000, 64, 5))
    q = psi_quadrature_gruschin(0.1, 0.0, 1.0)
    assert abs(est.value - q) <= 4 * est.stderr
    assert est.t_argmax == pytest.approx(1.0)
    assert 0 < est.tail_diagnostic < 1


def test_psi_to_dict_marks_infinite():
    est = estimate_psiT(gruschin(0.5), [0.0], [0.0], 1.0, SMALL_MC)
    assert est.to_dict()["value"] == "infinite"


def test_Psi_trivial_model_is_inverse_T():
    for T in (0.5, 2.0):
        est = estimate_PsiT(constant_sigma_model(d=2), [0.0], [0.0], T, SMALL_MC)
        assert est.value == pytest.approx(1.0 / T, rel=1e-12)
        assert est.stderr == pytest.approx(0.0, abs=1e-12)


def test_Psi_gruschin_integrand_form():
    # sup h / int_T^2T |X1|^{2l} dt on the same noise, with h == 1 for l = 1
    T, l = 1.0, 1.0
    mc = MCConfig(300, 32, 9)
    est = estimate_PsiT(gruschin(l), [0.0], [0.0], T, mc)
    grid = TimeGrid(0.0, 2 * T, 64)
    dB = increments_batch(grid, 9, ROLE_OFFSETS["psi"] + np.arange(300), 1)[:, :, 0]
    B = np.concatenate([np.zeros((300, 1)), np.cumsum(dB, axis=1)], axis=1)
    seg = np.abs(B[:, 32:]) ** (2 * l)
    integral = np.trapezoid(seg, dx=grid.dt, axis=1)
    assert est.value == pytest.approx(np.mean(1.0 / integral), rel=1e-12)


def test_Psi_slope_order_one():
    res = psi_scaling(gruschin(1.0), [0.0], [0.0], [0.25, 0.5, 1.0, 2.0, 4.0], MCConfig(5000, 64, 1))
    assert res["slope"] == pytest.approx(-2.0, abs=0.15)


def test_Psi_requires_linear_part():
    m = dataclasses.replace(gruschin(1.0), linear_part=None)
    with pytest.raises(ValueError):
        estimate_PsiT(m, [0.0], [0.0], 1.0, SMALL_MC)


def _profile(K=0.0, Th=0.0, lam=1.0, p=1.0):
    return AssumptionProfile(
        lam=lambda t: lam,
        K=lambda t: K,
        Theta=lambda t: Th,
        phi=lambda t, r: np.asarray(r, float) ** p,
        h=lambda r: np.ones_like(np.asarray(r, float)),
    )


def test_drift_bound_examples():
    prof = _profile()
    assert drift_bound(prof, 1.0, 0.0, 0.0, 3.0) == 0.0
    T, d0, d2, psi = 0.8, 1.2, 0.5, 2.0
    assert drift_bound(prof, T, d0, d2, psi) == pytest.approx(d0**2 / (2 * T) + psi / (2 * T) * (d2**2 + 2 * T * d0**2))
    with pytest.raises(PreconditionError):
        drift_bound(prof, 1.0, 1.0, 1.0, math.inf)


@pytest.mark.parametrize("r", [1e-9, -1e-9])
def test_drift_bound_continuous_at_zero_rates(r):
    args = (1.0, 1.0, 0.7, 1.5)
    base = drift_bound(_profile(), *args)
    assert abs(drift_bound(_profile(K=r), *args) - base) < 1e-6 * base
    assert abs(drift_bound(_profile(Th=r), *args) - base) < 1e-6 * base
    b12 = gramian_bound(_profile(), 1.0, *args)
    assert abs(gramian_bound(_profile(K=r, Th=r), 1.0, *args) - b12) < 1e-6 * b12


@given(
    K=st.floats(-1, 1),
    Th=st.floats(-1, 1),
    T=st.floats(0.1, 3),
    d0=dist,
    d2=dist,
    psi=st.floats(0.01, 10),
    bump=st.floats(0.0, 1.0),
)
def test_bounds_nonnegative_and_monotone(K, Th, T, d0, d2, psi, bump):
    prof = _profile(K=K, Th=Th)
    for fn in (
        lambda a, b, p: drift_bound(prof, T, a, b, p),
        lambda a, b, p: gramian_bound(prof, 1.3, T, a, b, p),
    ):
        base = fn(d0, d2, psi)
        assert base >= 0
        assert (base == 0) == (d0 == 0 and d2 == 0)
        tol = 1e-12 * max(1.0, base)
        assert fn(d0 + bump, d2, psi) >= base - tol
        assert fn(d0, d2 + bump, psi) >= base - tol
        assert fn(d0, d2, psi + bump) >= base - tol


@given(K=st.floats(-1, 1), Th=st.floats(-1, 1), d0=dist, d2=dist, Psi=st.floats(0, 5))
def test_gramian_bound_equals_ab0(K, Th, d0, d2, Psi):
    prof = _profile(K=K, Th=Th, p=0.5)
    a = gramian_bound(prof, 1.4, 0.9, d0, d2, Psi)
    b = entropy_bound_ab0(K, 1.0, 1.4, Th, 0.9, d0, d2, Psi, d0)
    assert a == pytest.approx(b, rel=1e-14, abs=1e-300)


def test_gramian_bound_gruschin_limits():
    T, d0, d2, Psi, l = 1.5, 0.6, 1.1, 0.9, 0.5
    prof = gruschin(l).profile
    expected = d0**2 / (2 * T) + Psi / 2 * (d2**2 + 2 * T * d0 ** (2 * min(l, 1)))
    assert gramian_bound(prof, 1.0, T, d0, d2, Psi) == pytest.approx(expected)


def test_closed_form_examples():
    assert closed_form_bound(1.5, 2.0, 1.0, [1.0], [1.0], [2.0], [2.0]) == 0.0
    l, c, T = 0.7, 0.3, 2.0
    d1, d2 = 0.5, 1.5
    expected = d1**2 / (2 * T) + 3 * c / T ** (l + 1) * (d2**2 + 2 * T * d1 ** (2 * l))
    assert closed_form_bound(l, c, T, [4.0], [3.5], [0.0], [1.5]) == pytest.approx(expected)
    # l = 2 picks up |x1|^2 + |y1|^2 + T
    got = closed_form_bound(2.0, 1.0, 1.0, [2.0], [1.0], [0.0], [0.0])
    assert got == pytest.approx(0.5 + (4 + 1 + 1) * 2)


def test_required_constant_is_tight():
    x, y = np.array([0.0, 0.0]), np.array([1.0, 1.0])
    c = required_closed_form_constant(1.0, 1.0, x, y, 1, 5.0)
    assert closed_form_bound(1.0, c, 1.0, x[:1], y[:1], x[1:], y[1:]) == pytest.approx(5.0)
    assert required_closed_form_constant(1.0, 1.0, x, y, 1, 0.1) == 0.0


def test_bound_row_columns():
    m = gruschin(0.25)
    est = estimate_psiT(m, [0.0], [1.0], 1.0, SMALL_MC)
    row = bound_row(m, 1.0, [0.0, 0.0], [1.0, 1.0], est, "thm11")
    assert list(row) == ["l", "T", "x", "y", "psi_or_Psi", "bound_thm", "bound_cor", "method"]
    assert row["bound_thm"] == pytest.approx(drift_bound(m.profile, 1.0, 1.0, 1.0, est.value))
    inf_row = bound_row(gruschin(1.0), 1.0, [0, 0], [1, 1], estimate_psiT(gruschin(1.0), [0], [1], 1.0, SMALL_MC), "thm11")
    assert inf_row["bound_thm"] == math.inf and inf_row["method"] == "analytic-divergent"
