"""Right-hand sides of the log-Harnack inequalities and estimators of their moments.

``psi`` is the inverse-diffusion moment used when ``sigma2`` is invertible;
``Psi`` replaces it by the inverse controllability Gramian. Both are
expectations over the first component started at ``y1``; they are estimated by
Monte Carlo with a top-1% tail diagnostic, since both are inverse moments with
heavy right tails.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, optimize, special

from .control import gramian_batch, theta_sup
from .model import AssumptionProfile, SdeModel, psi_finiteness_gruschin
from .parallel import ROLE_OFFSETS, map_chunks
from .paths import MCConfig, TimeGrid, increments_batch
from .rates import decay_integral, k_ratio, theta_ratio
from .stats import estimate, tail_share

SUP_GRID = 32


@dataclass(frozen=True)
class PsiEstimate:
    value: float
    stderr: float
    method: str
    tail_diagnostic: float
    n: int = 0
    n_excluded: int = 0
    t_argmax: Optional[float] = None

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)

    def to_dict(self) -> dict:
        d = asdict(self)
        if not self.finite:
            d["value"] = "infinite"
        return d


class PreconditionError(ValueError):
    """Raised when a bound or verification needs a moment that is infinite for the model."""


def divergence_message(m: int, l: float) -> str:
    return (
        f"psi_T is infinite for the Gruschin model with l = {l:g} >= m/2 = {m / 2:g}; "
        "the sigma2-inverse bound needs l < m/2 (use the Gramian variant instead)"
    )


def _first_component(model: SdeModel, x1_0, grid: TimeGrid, dB: np.ndarray) -> np.ndarray:
    """First-component paths, shape ``(n, N + 1, m)``."""
    n, N, m = dB.shape
    out = np.empty((n, N + 1, m))
    out[:, 0] = x1_0
    x = out[:, 0].copy()
    for k in range(N):
        t = grid.time(k)
        s1 = np.asarray(model.sigma1(t), float)
        step = dB[:, k] @ s1.T
        if not model.driftless:
            step = step + model.drift1(t, x) * grid.dt
        x = x + step
        out[:, k + 1] = x
    return out


def _h_sup(model: SdeModel, X1: np.ndarray, half: int, shift: float) -> np.ndarray:
    r = np.linalg.norm(X1[:, : half + 1], axis=-1) + shift
    return np.max(model.profile.h(r), axis=1)


def _sup_indices(half: int, N: int, n_sup: int) -> np.ndarray:
    return np.unique(np.round(np.linspace(half, N, n_sup)).astype(int))


def _psi_chunk(ids, model, y1, grid, seed, shift, n_sup):
    N = grid.n_steps
    half = N // 2
    dB = increments_batch(grid, seed, ids, model.m)
    X1 = _first_component(model, y1, grid, dB)
    H = _h_sup(model, X1, half, shift)
    idx = _sup_indices(half, N, n_sup)
    cols = []
    for k in idx:
        t = grid.time(k)
        if model.sigma2_scale is not None:
            s = np.abs(model.sigma2_scale(t, X1[:, k]))
            with np.errstate(divide="ignore"):
                inv_sq = np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0) ** 2, np.inf)
        else:
            sv = np.linalg.svd(model.sigma2(t, X1[:, k]), compute_uv=False)[:, -1]
            with np.errstate(divide="ignore"):
                inv_sq = np.where(sv > 0, 1.0 / np.where(sv > 0, sv, 1.0) ** 2, np.inf)
        cols.append(inv_sq * H)
    return {"vals": np.stack(cols, axis=1)}


def _grid_2T(T: float, dt_divisor: int) -> TimeGrid:
    return TimeGrid(0.0, 2.0 * T, 2 * int(dt_divisor))


def estimate_psiT(model: SdeModel, x1, y1, T: float, mc: MCConfig, n_sup: int = SUP_GRID) -> PsiEstimate:
    """Monte Carlo estimate of the inverse-diffusion moment ``psi_T(x1, y1)``.

    The supremum over ``t`` in ``[T, 2T]`` is a maximum of per-time sample means
    over ``n_sup`` grid times.
    """
    if model.gruschin is not None and not psi_finiteness_gruschin(model.gruschin):
        return PsiEstimate(math.inf, 0.0, "analytic-divergent", math.nan)
    x1 = np.atleast_1d(np.asarray(x1, float))
    y1 = np.atleast_1d(np.asarray(y1, float))
    grid = _grid_2T(T, mc.dt_divisor)
    shift = float(np.linalg.norm(x1 - y1))
    res = map_chunks(
        _psi_chunk,
        ROLE_OFFSETS["psi"],
        mc.n_paths,
        workers=mc.workers,
        model=model,
        y1=y1,
        grid=grid,
        seed=mc.seed,
        shift=shift,
        n_sup=n_sup,
    )
    vals = res["vals"]
    if not np.all(np.isfinite(vals)):
        return PsiEstimate(math.inf, math.inf, "mc", 1.0, vals.shape[0])
    means = vals.mean(axis=0)
    j = int(np.argmax(means))
    est = estimate(vals[:, j])
    idx = _sup_indices(grid.n_steps // 2, grid.n_steps, n_sup)
    return PsiEstimate(
        est.value, est.stderr, "mc", tail_share(vals[:, j]), est.n, 0, float(grid.time(int(idx[j])))
    )


def gaussian_negative_moment(l: float) -> float:
    """``E|N(0,1)|^{-2l}`` for ``l < 1/2``."""
    if not l < 0.5:
        raise ValueError("E|N|^{-2l} is infinite for l >= 1/2")
    return 2.0 ** (-l) * special.gamma(0.5 - l) / math.sqrt(math.pi)


def _heat_moment(l: float, x1: float, t: float) -> float:
    """``int |z|^{-2l} p_t(x1, z) dz`` with the Gaussian heat kernel ``p_t``."""
    st = math.sqrt(t)

    def kern(z):
        return math.exp(-((z - x1) ** 2) / (2.0 * t)) / math.sqrt(2.0 * math.pi * t)

    a = abs(x1) + 12.0 * st
    opts = dict(epsabs=0.0, epsrel=1e-12, limit=200)
    pos, _ = integrate.quad(kern, 0.0, a, weight="alg", wvar=(-2.0 * l, 0.0), **opts)
    neg, _ = integrate.quad(lambda z: kern(-z), 0.0, a, weight="alg", wvar=(-2.0 * l, 0.0), **opts)
    tail_p, _ = integrate.quad(lambda z: kern(z) * z ** (-2.0 * l), a, math.inf, **opts)
    tail_n, _ = integrate.quad(lambda z: kern(-z) * z ** (-2.0 * l), a, math.inf, **opts)
    return pos + neg + tail_p + tail_n


def psi_quadrature_gruschin(l: float, x1: float, T: float, n_sup: int = SUP_GRID) -> float:
    """Deterministic ``psi_T`` of the one-dimensional Gruschin model with ``h == 1``.

    Maximises the heat-kernel integral over ``t`` in ``[T, 2T]``: a grid scan of
    ``n_sup`` points refined by a bounded scalar search.
    """
    if not 0 < l < 0.5:
        raise ValueError("quadrature oracle needs 0 < l < 1/2 (psi_T is infinite otherwise)")
    ts = np.linspace(T, 2.0 * T, n_sup)
    vals = np.array([_heat_moment(l, float(x1), t) for t in ts])
    j = int(np.argmax(vals))
    lo, hi = ts[max(j - 1, 0)], ts[min(j + 1, n_sup - 1)]
    best = float(vals[j])
    if hi > lo:
        r = optimize.minimize_scalar(
            lambda t: -_heat_moment(l, float(x1), t), bounds=(lo, hi), method="bounded", options={"xatol": 1e-10}
        )
        best = max(best, -float(r.fun))
    return best


def _PsiT_chunk(ids, model, y1, grid, seed, shift):
    N = grid.n_steps
    half = N // 2
    dB = increments_batch(grid, seed, ids, model.m)
    X1 = _first_component(model, y1, grid, dB)
    H = _h_sup(model, X1, half, shift)
    gram = gramian_batch(model, X1[:, half:], model.linear_part, grid.time(half), grid.points()[half:])
    val = gram["inv_norm"] ** 2 * gram["sigma_sq_int"] * H
    return {"vals": np.where(gram["flagged"], np.nan, val), "flagged": gram["flagged"]}


def estimate_PsiT(model: SdeModel, x1, y1, T: float, mc: MCConfig) -> PsiEstimate:
    """Monte Carlo estimate of the Gramian moment ``Psi_T(x1, y1)``.

    Paths with a numerically singular Gramian are excluded and counted.
    """
    if model.linear_part is None:
        raise ValueError("Psi_T needs a model with linear_part")
    x1 = np.atleast_1d(np.asarray(x1, float))
    y1 = np.atleast_1d(np.asarray(y1, float))
    grid = _grid_2T(T, mc.dt_divisor)
    res = map_chunks(
        _PsiT_chunk,
        ROLE_OFFSETS["psi"],
        mc.n_paths,
        workers=mc.workers,
        model=model,
        y1=y1,
        grid=grid,
        seed=mc.seed,
        shift=float(np.linalg.norm(x1 - y1)),
    )
    ok = ~res["flagged"]
    vals = res["vals"][ok]
    est = estimate(vals, n_excluded=int((~ok).sum()))
    return PsiEstimate(est.value, est.stderr, "mc", tail_share(vals), est.n, est.n_excluded)


def _profile_terms(profile: AssumptionProfile, T: float, delta0: float):
    K = float(profile.K(T))
    lam = float(profile.lam(T))
    phi = float(np.asarray(profile.phi(T, delta0**2)))
    return K, lam, phi


def drift_bound(profile: AssumptionProfile, T: float, delta0: float, delta2: float, psi: float) -> float:
    """Additive term of the log-Harnack inequality under a finite ``psi_T``."""
    if not math.isfinite(psi):
        raise PreconditionError("drift_bound needs a finite psi")
    K, lam, phi = _profile_terms(profile, T, delta0)
    Th, Th2 = float(profile.Theta(T)), float(profile.Theta(2.0 * T))
    first = k_ratio(K, T) * delta0**2 / lam**2
    pre = theta_ratio(Th2, T) * math.exp(2.0 * Th * T) * psi
    return float(first + pre * (delta2**2 + decay_integral(Th, T) * phi))


def gramian_bound(
    profile: AssumptionProfile, theta_T: float, T: float, delta0: float, delta2: float, Psi: float
) -> float:
    """Additive term of the log-Harnack inequality under a finite ``Psi_T``."""
    if not math.isfinite(Psi):
        raise PreconditionError("gramian_bound needs a finite Psi")
    K, lam, phi = _profile_terms(profile, T, delta0)
    Th = float(profile.Theta(T))
    first = k_ratio(K, T) * delta0**2 / lam**2
    second = 0.5 * theta_T * math.exp(2.0 * Th * T) * Psi
    return float(first + second * (delta2**2 + decay_integral(Th, T) * phi))


# c_emp = 0.466 rounded up: smallest constant making the closed form dominate the
# Gramian bound over the sweep in scripts/calibrate_closed_form.py (l = 1, 2e4 paths).
DEFAULT_CLOSED_FORM_C = 0.47


def closed_form_bound(l: float, c: float, T: float, x1, y1, x2, y2) -> float:
    """Closed-form additive term for the Gruschin model with an explicit constant ``c``."""
    x1, y1 = np.atleast_1d(np.asarray(x1, float)), np.atleast_1d(np.asarray(y1, float))
    x2, y2 = np.atleast_1d(np.asarray(x2, float)), np.atleast_1d(np.asarray(y2, float))
    d1 = float(np.linalg.norm(x1 - y1))
    d2 = float(np.linalg.norm(x2 - y2))
    p = max(l - 1.0, 0.0)
    growth = np.linalg.norm(x1) ** (2 * p) + np.linalg.norm(y1) ** (2 * p) + T**p
    return float(d1**2 / (2.0 * T) + c / T ** (l + 1.0) * growth * (d2**2 + 2.0 * T * d1 ** (2.0 * min(l, 1.0))))


def required_closed_form_constant(l: float, T: float, x, y, m: int, gramian_value: float) -> float:
    """Smallest ``c`` with ``closed_form_bound >= gramian_value`` at one configuration."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    args = (T, x[:m], y[:m], x[m:], y[m:])
    base = closed_form_bound(l, 0.0, *args)
    unit = closed_form_bound(l, 1.0, *args) - base
    if unit <= 0:
        return 0.0 if gramian_value <= base else math.inf
    return max(0.0, (gramian_value - base) / unit)


def loglog_slope(Ts: Sequence[float], values: Sequence[float]) -> float:
    return float(np.polyfit(np.log(Ts), np.log(values), 1)[0])


def psi_scaling(model: SdeModel, x1, y1, T_list: Sequence[float], mc: MCConfig) -> dict:
    """``Psi_T`` over ``T_list`` and its log-log slope in ``T``."""
    ests = [estimate_PsiT(model, x1, y1, T, mc) for T in T_list]
    return {
        "T": list(T_list),
        "estimates": ests,
        "slope": loglog_slope(T_list, [e.value for e in ests]),
    }


def bound_row(
    model: SdeModel, T: float, x, y, psi: PsiEstimate, variant: str, c: float = DEFAULT_CLOSED_FORM_C
) -> dict:
    """One row of the bound table: (l, T, x, y, psi_or_Psi, bound_thm, bound_cor, method)."""
    m = model.m
    x, y = np.asarray(x, float), np.asarray(y, float)
    d0 = float(np.linalg.norm(x[:m] - y[:m]))
    d2 = float(np.linalg.norm(x[m:] - y[m:]))
    if not psi.finite:
        thm = math.inf
    elif variant == "thm11":
        thm = drift_bound(model.profile, T, d0, d2, psi.value)
    else:
        theta = theta_sup(model.linear_part, T)
        thm = gramian_bound(model.profile, theta, T, d0, d2, psi.value)
    l = model.gruschin.l if model.gruschin is not None else math.nan
    cor = closed_form_bound(l, c, T, x[:m], y[:m], x[m:], y[m:]) if model.gruschin is not None else math.nan
    return {
        "l": l,
        "T": T,
        "x": " ".join(repr(float(v)) for v in x),
        "y": " ".join(repr(float(v)) for v in y),
        "psi_or_Psi": psi.value,
        "bound_thm": thm,
        "bound_cor": cor,
        "method": psi.method,
    }
