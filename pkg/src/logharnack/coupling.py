"""Two-step coupling by change of measure.

Step one steers ``Y1`` onto ``X1`` by time ``T`` with the drift ``v1``; both
are driven by the same ``B1`` increments, so their gap evolves without noise.
Step two runs on ``[T, 2T]``, where ``X1 == Y1`` and therefore the two second
components share their noise term as well; the drift ``v2`` closes the gap by
``2T``. Each drift is removed again by a Girsanov weight, accumulated per step
as ``sum <xi, dB> - 1/2 sum |xi|^2 dt``.

The batch functions work on arrays with a leading path axis; the
``simulate_*`` functions wrap them for a single path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import SdeModel
from .paths import NoiseStream, TimeGrid, brownian_increments
from .rates import contraction_profile, growth_integral, k_ratio, rate_v1, rate_v2, w_star_weight

DEFAULT_TRUNCATION = 1e6
SINGULAR_SV = 1e-12
NOT_COUPLED = math.inf


@dataclass(frozen=True)
class CouplingParams:
    """Coupling of the processes started at ``x`` and ``y`` over ``[0, 2T]``.

    ``couple_eps`` defaults to ``1e-9 * max(1, |x - y|)``. Gaps between coupled
    components carry no noise, so the threshold only has to absorb rounding;
    an overshooting step (gap changes direction) also counts as meeting.
    """

    T: float
    x: tuple
    y: tuple
    couple_eps: Optional[float] = None
    truncation_n: float = DEFAULT_TRUNCATION

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in np.ravel(self.x)))
        object.__setattr__(self, "y", tuple(float(v) for v in np.ravel(self.y)))
        if not self.T > 0:
            raise ValueError("T must be positive")
        if len(self.x) != len(self.y):
            raise ValueError("x and y must have the same dimension")
        if self.couple_eps is not None and not self.couple_eps > 0:
            raise ValueError("couple_eps must be positive")
        if not self.truncation_n > 0:
            raise ValueError("truncation_n must be positive")

    @property
    def eps(self) -> float:
        if self.couple_eps is not None:
            return self.couple_eps
        gap = float(np.linalg.norm(np.subtract(self.x, self.y)))
        return 1e-9 * max(1.0, gap)

    def deltas(self, m: int) -> tuple[float, float]:
        """``|x1 - y1|`` and ``|x2 - y2|``."""
        x, y = np.asarray(self.x), np.asarray(self.y)
        return float(np.linalg.norm(x[:m] - y[:m])), float(np.linalg.norm(x[m:] - y[m:]))


@dataclass
class GirsanovWeight:
    log_weight: float
    integral_xi_sq: float
    max_xi: float


@dataclass
class FirstStep:
    """First-component coupling on the full grid ``[0, 2T]``.

    ``X1``/``Y1`` have shape ``(n_steps + 1, m)``; ``dB`` holds the full
    ``(n_steps, m + d)`` increments so step two reuses the same ``B2``.
    """

    grid: TimeGrid
    X1: np.ndarray
    Y1: np.ndarray
    tau1: float
    weight: GirsanovWeight
    failed: bool
    overshoot: float
    dB: np.ndarray


@dataclass
class CoupledPath:
    grid: TimeGrid
    X: np.ndarray
    Y: np.ndarray
    tau1: float
    tau2: float
    logR1: float
    logR2: float
    truncation_active_fraction: float
    diagnostics: dict = field(default_factory=dict)


def check_grid(grid: TimeGrid, T: float) -> int:
    if grid.t0 != 0.0 or grid.n_steps % 2:
        raise ValueError("coupling grid must start at 0 with an even number of steps")
    if abs(grid.t1 - 2.0 * T) > 1e-12 * max(1.0, T):
        raise ValueError(f"coupling grid must end at 2T = {2 * T}, got {grid.t1}")
    return grid.n_steps // 2


def _unit(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(v, axis=-1)
    safe = np.where(norm > 0, norm, 1.0)
    return v / safe[..., None], norm


def drift_v1(t, X1, Y1, T: float, K_T: float, delta0: float) -> np.ndarray:
    """Drift subtracted from the ``Y1`` equation; points from ``X1`` to ``Y1``.

    Works on a single ``(m,)`` pair or a ``(n, m)`` batch; zero where the
    components already agree.
    """
    diff = np.asarray(Y1, float) - np.asarray(X1, float)
    unit, norm = _unit(diff)
    mag = rate_v1(K_T, t, T) * delta0
    return np.where((norm > 0)[..., None], mag * unit, 0.0)


def drift_v2(t, X2, Y2, gapT: float, T: float, Theta_2T: float) -> np.ndarray:
    """Drift subtracted from the ``Y2`` equation on ``[T, 2T]``.

    ``gapT`` may be a scalar or a per-path ``(n,)`` array.
    """
    diff = np.asarray(Y2, float) - np.asarray(X2, float)
    unit, norm = _unit(diff)
    mag = rate_v2(Theta_2T, t, T) * np.asarray(gapT, float)
    return np.where((norm > 0)[..., None], np.asarray(mag)[..., None] * unit, 0.0)


def prop21_bound(t, T: float, K_T: float, delta0: float):
    """Deterministic envelope of ``|X1_t - Y1_t|``: zero after ``T``."""
    return delta0 * contraction_profile(K_T, t, T)


def entropy_bound_prop22(K_T: float, lambda_T: float, T: float, delta0: float) -> float:
    """Upper bound on ``E[R1 log R1]``."""
    return float(k_ratio(K_T, T) * delta0**2 / lambda_T**2)


def entropy_bound_prop24(
    Theta_T: float,
    Theta_2T: float,
    T: float,
    delta0: float,
    delta2: float,
    phi_val: float,
    sigma_inv_sq_integral: float,
    h_sup: float,
) -> float:
    """Right side of the conditional entropy bound for ``R2``.

    ``sigma_inv_sq_integral`` is the already weighted integral
    ``int_T^2T w(t) ||sigma2(t, Y1_t)^{-1}||^2 dt`` (see ``rates.w_star_weight``).
    ``Theta_2T`` only enters through that weight and is kept for the signature.
    """
    middle = math.exp(2.0 * Theta_T * T) * delta2**2 + growth_integral(Theta_T, T) * phi_val
    return float(sigma_inv_sq_integral * middle * h_sup)


# ---------------------------------------------------------------------------
# batch cores


def first_step_batch(model: SdeModel, params: CouplingParams, grid: TimeGrid, dB1: np.ndarray) -> dict:
    """Couple the first components for a batch; ``dB1`` has shape ``(n, N, m)``."""
    half = check_grid(grid, params.T)
    T, m = params.T, model.m
    n, N = dB1.shape[0], grid.n_steps
    x = np.asarray(params.x)
    y = np.asarray(params.y)
    delta0, _ = params.deltas(m)
    K_T = float(model.profile.K(T))
    eps = params.eps
    dt = grid.dt

    X1 = np.empty((n, N + 1, m))
    Y1 = np.empty((n, N + 1, m))
    X1[:, 0] = x[:m]
    Y1[:, 0] = y[:m]
    coupled = np.zeros(n, dtype=bool)
    tau1 = np.full(n, NOT_COUPLED)
    if delta0 <= eps:
        coupled[:] = True
        tau1[:] = 0.0
        Y1[:, 0] = X1[:, 0]
    logR = np.zeros(n)
    xi_sq = np.zeros(n)
    max_xi = np.zeros(n)
    overshoot = np.full(n, -np.inf)
    failed = np.zeros(n, dtype=bool)

    for k in range(N):
        t = grid.time(k)
        x1, y1 = X1[:, k], Y1[:, k]
        s1 = np.asarray(model.sigma1(t), float)
        noise = dB1[:, k] @ s1.T
        xn = x1 + noise
        yn = y1 + noise
        if not model.driftless:
            xn = xn + model.drift1(t, x1) * dt
            yn = yn + model.drift1(t, y1) * dt
        active = ~coupled
        if k < half and active.any():
            v = drift_v1(t, x1, y1, T, K_T, delta0)
            v[~active] = 0.0
            xi = np.linalg.solve(s1, v.T).T
            logR += np.sum(xi * dB1[:, k], axis=1) - 0.5 * np.sum(xi * xi, axis=1) * dt
            xsq = np.sum(xi * xi, axis=1)
            xi_sq += xsq * dt
            np.maximum(max_xi, np.sqrt(xsq), out=max_xi)
            yn = yn - v * dt
            gap_old = y1 - x1
            gap_new = yn - xn
            hit = active & (
                (np.linalg.norm(gap_new, axis=1) <= eps) | (np.sum(gap_new * gap_old, axis=1) <= 0.0)
            )
            tau1[hit] = grid.time(k + 1)
            coupled |= hit
        if k + 1 == half:
            late = ~coupled
            failed |= late
            coupled |= late
        yn[coupled] = xn[coupled]
        X1[:, k + 1], Y1[:, k + 1] = xn, yn
        if k + 1 <= half:
            gap = np.linalg.norm(yn - xn, axis=1)
            bound = prop21_bound(grid.time(k + 1), T, K_T, delta0)
            np.maximum(overshoot, gap - bound, out=overshoot)
    return {
        "X1": X1,
        "Y1": Y1,
        "tau1": tau1,
        "logR1": logR,
        "xi1_sq_int": xi_sq,
        "max_xi1": max_xi,
        "first_failed": failed,
        "overshoot": np.maximum(overshoot, 0.0) if delta0 > 0 else np.zeros(n),
    }


def _sigma2_inv(model: SdeModel, t, y1):
    """``sigma2(t, y1)^{-1}`` as ``(scale, matrix)``; singular entries become inf."""
    if model.sigma2_scale is not None:
        s = model.sigma2_scale(t, y1)
        with np.errstate(divide="ignore"):
            inv = np.where(np.abs(s) > SINGULAR_SV, 1.0 / np.where(s == 0, 1.0, s), np.inf)
        return inv, None
    sig = model.sigma2(t, y1)
    sv = np.linalg.svd(sig, compute_uv=False)
    ok = sv[:, -1] > SINGULAR_SV
    inv = np.full_like(sig, np.inf)
    if ok.any():
        inv[ok] = np.linalg.inv(sig[ok])
    return None, inv


def h_sup_along(model: SdeModel, Y1: np.ndarray, half: int, delta0: float) -> np.ndarray:
    """``sup_{t<=T} h(|Y1_t| + delta0)`` over grid points."""
    r = np.linalg.norm(Y1[:, : half + 1], axis=-1) + delta0
    return np.max(model.profile.h(r), axis=1)


def second_step_batch(
    model: SdeModel, params: CouplingParams, grid: TimeGrid, first: dict, dB2: np.ndarray, store: bool = False
) -> dict:
    """Second components with the gap-closing drift on ``[T, 2T]``.

    With ``store`` the full ``(n, N + 1, d)`` trajectories are returned as
    ``X2``/``Y2``; otherwise only endpoints and per-path diagnostics.
    """
    half = check_grid(grid, params.T)
    T, m, d = params.T, model.m, model.d
    n, N = dB2.shape[0], grid.n_steps
    dt = grid.dt
    x = np.asarray(params.x)
    y = np.asarray(params.y)
    delta0, delta2 = params.deltas(m)
    Theta_2T = float(model.profile.Theta(2.0 * T))
    eps, cap = params.eps, params.truncation_n
    X1, Y1 = first["X1"], first["Y1"]

    X2 = np.broadcast_to(x[m:], (n, d)).copy()
    Y2 = np.broadcast_to(y[m:], (n, d)).copy()
    gapT = np.zeros(n)
    coupled = np.zeros(n, dtype=bool)
    tau2 = np.full(n, NOT_COUPLED)
    logR = np.zeros(n)
    xi_sq = np.zeros(n)
    max_xi = np.zeros(n)
    n_trunc = np.zeros(n)
    n_active = np.zeros(n)
    n_singular = np.zeros(n)
    w_int = np.zeros(n)
    if store:
        X2s = np.empty((n, N + 1, d))
        Y2s = np.empty((n, N + 1, d))
        X2s[:, 0], Y2s[:, 0] = X2, Y2

    for k in range(N):
        t = grid.time(k)
        x1, y1 = X1[:, k], Y1[:, k]
        b2x = model.drift2(t, x1, X2) if not model.driftless else _lin(model, X2)
        xn = X2 + b2x * dt + _apply_sigma2(model, t, x1, dB2[:, k])
        if k == half:
            gapT = np.linalg.norm(Y2 - X2, axis=1)
            done = gapT <= eps
            coupled |= done
            tau2[done] = T
            Y2[done] = X2[done]
        b2y = model.drift2(t, y1, Y2) if not model.driftless else _lin(model, Y2)
        yn = Y2 + b2y * dt + _apply_sigma2(model, t, y1, dB2[:, k])
        if k >= half:
            inv_s, inv_m = _sigma2_inv(model, t, y1)
            if inv_s is not None:
                inv_norm_sq = inv_s**2
            else:
                inv_norm_sq = np.where(
                    np.isfinite(inv_m).all(axis=(1, 2)),
                    np.linalg.norm(np.where(np.isfinite(inv_m), inv_m, 0.0), ord=2, axis=(1, 2)) ** 2,
                    np.inf,
                )
            w_int += w_star_weight(Theta_2T, t, T) * inv_norm_sq * dt
            active = ~coupled
            if active.any():
                v = drift_v2(t, X2, Y2, gapT, T, Theta_2T)
                v[~active] = 0.0
                with np.errstate(invalid="ignore", over="ignore"):
                    if inv_s is not None:
                        xi = inv_s[:, None] * v
                    else:
                        xi = np.einsum("nij,nj->ni", inv_m, v)
                moving = active & (np.linalg.norm(v, axis=1) > 0)
                singular = moving & ~np.isfinite(xi).all(axis=1)
                xi_norm = np.where(singular, np.inf, np.linalg.norm(np.where(singular[:, None], 0.0, xi), axis=1))
                cut = moving & (xi_norm > cap)
                xi = np.where(cut[:, None] | ~moving[:, None], 0.0, xi)
                n_active += moving
                n_trunc += cut
                n_singular += singular
                xsq = np.sum(xi * xi, axis=1)
                logR += np.sum(xi * dB2[:, k], axis=1) - 0.5 * xsq * dt
                xi_sq += xsq * dt
                np.maximum(max_xi, np.sqrt(xsq), out=max_xi)
                yn = yn - v * dt
                gap_old = Y2 - X2
                gap_new = yn - xn
                hit = active & (
                    (np.linalg.norm(gap_new, axis=1) <= eps) | (np.sum(gap_new * gap_old, axis=1) <= 0.0)
                )
                tau2[hit] = grid.time(k + 1)
                coupled |= hit
            yn[coupled] = xn[coupled]
        X2, Y2 = xn, yn
        if store:
            X2s[:, k + 1], Y2s[:, k + 1] = X2, Y2

    frac = np.divide(n_trunc, n_active, out=np.zeros(n), where=n_active > 0)
    out = {
        "X2_end": X2,
        "Y2_end": Y2,
        "gapT": gapT,
        "tau2": tau2,
        "logR2": logR,
        "xi2_sq_int": xi_sq,
        "max_xi2": max_xi,
        "truncation_active_fraction": frac,
        "singular_steps": n_singular,
        "sigma_inv_sq_integral": w_int,
        "h_sup": h_sup_along(model, Y1, half, delta0),
    }
    if store:
        out["X2"], out["Y2"] = X2s, Y2s
    return out


def _lin(model: SdeModel, x2: np.ndarray) -> np.ndarray:
    A = model.linear_part
    if A is None:
        return np.zeros_like(x2)
    return x2 @ np.asarray(A, float).T


def _apply_sigma2(model: SdeModel, t, x1, dB2):
    if model.sigma2_scale is not None:
        return model.sigma2_scale(t, x1)[:, None] * dB2
    return np.einsum("nij,nj->ni", model.sigma2(t, x1), dB2)


# ---------------------------------------------------------------------------
# single-path wrappers


def simulate_coupled_first(model: SdeModel, params: CouplingParams, grid: TimeGrid, stream: NoiseStream) -> FirstStep:
    if stream.dimension != model.dim:
        raise ValueError(f"noise stream must have dimension m+d = {model.dim}")
    dB = brownian_increments(grid, stream)
    res = first_step_batch(model, params, grid, dB[None, :, : model.m])
    return FirstStep(
        grid=grid,
        X1=res["X1"][0],
        Y1=res["Y1"][0],
        tau1=float(res["tau1"][0]),
        weight=GirsanovWeight(
            log_weight=float(res["logR1"][0]),
            integral_xi_sq=float(res["xi1_sq_int"][0]),
            max_xi=float(res["max_xi1"][0]),
        ),
        failed=bool(res["first_failed"][0]),
        overshoot=float(res["overshoot"][0]),
        dB=dB,
    )


def simulate_coupled_second(
    model: SdeModel, first: FirstStep, params: CouplingParams, grid: TimeGrid, stream: Optional[NoiseStream] = None
) -> CoupledPath:
    """Second step with the gap-closing drift; reuses the ``B2`` increments held by ``first``.

    ``stream`` is accepted for symmetry with the first step and only checked
    for consistency.
    """
    if stream is not None and stream.dimension != model.dim:
        raise ValueError("noise stream dimension mismatch")
    if first.failed:
        raise ValueError("first coupling failed; second step requires X1 == Y1 on [T, 2T]")
    batch = {"X1": first.X1[None], "Y1": first.Y1[None]}
    res = second_step_batch(model, params, grid, batch, first.dB[None, :, model.m :], store=True)
    return CoupledPath(
        grid=grid,
        X=np.concatenate([first.X1, res["X2"][0]], axis=1),
        Y=np.concatenate([first.Y1, res["Y2"][0]], axis=1),
        tau1=first.tau1,
        tau2=float(res["tau2"][0]),
        logR1=first.weight.log_weight,
        logR2=float(res["logR2"][0]),
        truncation_active_fraction=float(res["truncation_active_fraction"][0]),
        diagnostics={
            "gapT": float(res["gapT"][0]),
            "xi2_sq_int": float(res["xi2_sq_int"][0]),
            "max_xi2": float(res["max_xi2"][0]),
            "singular_steps": int(res["singular_steps"][0]),
            "sigma_inv_sq_integral": float(res["sigma_inv_sq_integral"][0]),
            "h_sup": float(res["h_sup"][0]),
        },
    )
