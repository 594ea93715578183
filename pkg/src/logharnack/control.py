"""Exact terminal coupling of the second component through a Gramian control.

When ``b2(t, x) = A x2 + b~(t, x1)``, the gap ``X2 - Y2`` on ``[T, 2T]`` solves a
linear ODE once ``X1 == Y1``. Steering it with

    eta_t = sigma2(t, Y1_t)^T exp(A^T (T - t)) Q_T^{-1} (Y2_T - X2_T)

closes it exactly at ``2T``, where ``Q_T`` is the controllability Gramian
accumulated along the realised first-component path. Only invertibility of
``Q_T`` is needed, not of ``sigma2`` itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .coupling import (
    NOT_COUPLED,
    CoupledPath,
    CouplingParams,
    FirstStep,
    _apply_sigma2,
    _lin,
    check_grid,
    h_sup_along,
)
from .model import SdeModel
from .paths import NoiseStream, TimeGrid
from .rates import decay_integral, k_ratio

GRAMIAN_RTOL = 1e-12
THETA_GRID = 1024
THETA_SAFETY = 1.01


def matrix_exp(A, t: float = 1.0) -> np.ndarray:
    """``exp(A t)`` (Pade scaling and squaring from scipy)."""
    M = np.atleast_2d(np.asarray(A, dtype=float)) * t
    d = M.shape[0]
    if M.shape != (d, d):
        raise ValueError("A must be square")
    if d > 16:
        raise ValueError("matrix_exp is meant for d <= 16")
    return linalg.expm(M)


def theta_sup(A, T: float, n_grid: int = THETA_GRID, safety: float = THETA_SAFETY) -> float:
    """``sup_{t in [0, T]} ||exp(-A t)||`` on a grid, times a safety factor."""
    A = np.atleast_2d(np.asarray(A, float))
    if not np.any(A):
        return safety
    ts = np.linspace(0.0, T, n_grid)
    return safety * max(np.linalg.norm(matrix_exp(-A, t), 2) for t in ts)


@dataclass(frozen=True)
class ControlParams:
    A: np.ndarray
    theta_T: float

    @classmethod
    def for_model(cls, model: SdeModel, T: float) -> "ControlParams":
        if model.linear_part is None:
            raise ValueError("the Gramian pathway needs a model with linear_part")
        A = np.asarray(model.linear_part, float)
        return cls(A=A, theta_T=theta_sup(A, T))


@dataclass
class GramianResult:
    Q: np.ndarray
    Q_inv: np.ndarray
    smallest_singular_value: float
    quadrature_steps: int
    flagged: bool = False


def tol_terminal(dt: float, gapT) -> np.ndarray:
    return 20.0 * math.sqrt(dt) * np.maximum(1.0, np.asarray(gapT, float))


def _propagators(A: np.ndarray, T: float, times: np.ndarray) -> Optional[np.ndarray]:
    """``exp(A (T - t))`` for each time, or None when ``A == 0``."""
    if not np.any(A):
        return None
    return np.stack([matrix_exp(A, T - t) for t in times])


def trapezoid_weights(n_points: int, dt: float) -> np.ndarray:
    w = np.full(n_points, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def gramian_batch(model: SdeModel, X1_seg: np.ndarray, A, T: float, times: np.ndarray) -> dict:
    """Trapezoid Gramians for a batch of paths ``X1_seg`` of shape ``(n, k, m)`` on ``times``."""
    A = np.atleast_2d(np.asarray(A, float))
    d = model.d
    n, k = X1_seg.shape[:2]
    times = np.asarray(times, float)
    w = trapezoid_weights(k, times[1] - times[0])
    E = _propagators(A, T, times)
    sig_sq_int = np.zeros(n)
    if model.sigma2_scale is not None:
        s2 = np.stack([model.sigma2_scale(t, X1_seg[:, j]) ** 2 for j, t in enumerate(times)], axis=1)
        sig_sq_int = s2 @ w
        if E is None:
            Q = sig_sq_int[:, None, None] * np.eye(d)
            prop_weighted = sig_sq_int.copy()
        else:
            EEt = np.einsum("kij,klj->kil", E, E)
            Q = np.einsum("nk,kij->nij", s2 * w, EEt)
            enorm = np.linalg.norm(E, ord=2, axis=(1, 2)) ** 2
            prop_weighted = (s2 * w) @ enorm
    else:
        Q = np.zeros((n, d, d))
        prop_weighted = np.zeros(n)
        for j, t in enumerate(times):
            S = model.sigma2(t, X1_seg[:, j])
            M = S if E is None else np.einsum("ij,njk->nik", E[j], S)
            Q += w[j] * np.einsum("nij,nkj->nik", M, M)
            snorm = np.linalg.norm(S, ord=2, axis=(1, 2)) ** 2
            sig_sq_int += w[j] * snorm
            enorm = 1.0 if E is None else np.linalg.norm(E[j], 2) ** 2
            prop_weighted += w[j] * enorm * snorm
    sv = np.linalg.svd(Q, compute_uv=False)
    smin, smax = sv[:, -1], sv[:, 0]
    flagged = ~(smin > GRAMIAN_RTOL * smax)
    Q_inv = np.zeros_like(Q)
    if (~flagged).any():
        Q_inv[~flagged] = np.linalg.inv(Q[~flagged])
    if flagged.any():
        Q_inv[flagged] = np.linalg.pinv(Q[flagged])
    return {
        "Q": Q,
        "Q_inv": Q_inv,
        "smallest_sv": smin,
        "flagged": flagged,
        "sigma_sq_int": sig_sq_int,
        "prop_sigma_sq_int": prop_weighted,
        "inv_norm": np.where(flagged, np.inf, 1.0 / np.where(smin > 0, smin, 1.0)),
    }


def gramian_QT(model: SdeModel, X1_path, A, T: float, times) -> GramianResult:
    """Controllability Gramian along one first-component path on ``[T, 2T]``.

    ``X1_path`` has shape ``(k, m)`` with one row per entry of ``times``.
    A pseudo-inverse is returned (and ``flagged`` set) when the smallest
    singular value falls below ``1e-12 * ||Q||``.
    """
    X1 = np.asarray(X1_path, float)
    if X1.ndim == 1:
        X1 = X1[:, None]
    res = gramian_batch(model, X1[None], A, T, np.asarray(times, float))
    return GramianResult(
        Q=res["Q"][0],
        Q_inv=res["Q_inv"][0],
        smallest_singular_value=float(res["smallest_sv"][0]),
        quadrature_steps=len(times) - 1,
        flagged=bool(res["flagged"][0]),
    )


def control_eta(t: float, sigma2_t, A, T: float, Q_inv, gapT_vec) -> np.ndarray:
    """``sigma2^T exp(A^T (T - t)) Q^{-1} gapT_vec`` on ``[T, 2T]``, zero elsewhere.

    ``gapT_vec`` is ``Y2_T - X2_T``.
    """
    g = np.asarray(gapT_vec, float)
    if not (T <= t <= 2.0 * T):
        return np.zeros_like(g)
    E = matrix_exp(np.asarray(A, float).T, T - t)
    return np.asarray(sigma2_t, float).T @ (E @ (np.asarray(Q_inv, float) @ g))


def control_second_batch(
    model: SdeModel, params: CouplingParams, grid: TimeGrid, first: dict, dB2: np.ndarray, store: bool = False
) -> dict:
    """Second components under the Gramian control, for a batch of first steps."""
    half = check_grid(grid, params.T)
    T, m, d = params.T, model.m, model.d
    n, N = dB2.shape[0], grid.n_steps
    dt = grid.dt
    A = np.atleast_2d(np.asarray(model.linear_part, float))
    x, y = np.asarray(params.x), np.asarray(params.y)
    delta0, _ = params.deltas(m)
    X1, Y1 = first["X1"], first["Y1"]
    ok1 = ~first.get("first_failed", np.zeros(n, dtype=bool))
    if not np.array_equal(X1[ok1, half:], Y1[ok1, half:]):
        raise RuntimeError("X1 and Y1 differ on [T, 2T]; the Gramian would be path-ambiguous")

    times = grid.points()[half:]
    gram = gramian_batch(model, Y1[:, half:], A, T, times)
    usable = ~gram["flagged"]
    E = _propagators(A, T, times)

    X2 = np.broadcast_to(x[m:], (n, d)).copy()
    Y2 = np.broadcast_to(y[m:], (n, d)).copy()
    z = np.zeros((n, d))
    gapT = np.zeros(n)
    logR = np.zeros(n)
    eta_sq = np.zeros(n)
    # same left-point rule as eta_sq, so the per-path bound compares like with like
    bound_int = np.zeros(n)
    if store:
        X2s = np.empty((n, N + 1, d))
        Y2s = np.empty((n, N + 1, d))
        X2s[:, 0], Y2s[:, 0] = X2, Y2

    for k in range(N):
        t = grid.time(k)
        x1, y1 = X1[:, k], Y1[:, k]
        b2x = model.drift2(t, x1, X2) if not model.driftless else _lin(model, X2)
        b2y = model.drift2(t, y1, Y2) if not model.driftless else _lin(model, Y2)
        if k == half:
            G = Y2 - X2
            gapT = np.linalg.norm(G, axis=1)
            z = np.einsum("nij,nj->ni", gram["Q_inv"], G)
            z[~usable] = 0.0
        xn = X2 + b2x * dt + _apply_sigma2(model, t, x1, dB2[:, k])
        noise = dB2[:, k]
        if k >= half:
            j = k - half
            ez = z if E is None else z @ E[j]
            enorm = 1.0 if E is None else np.linalg.norm(E[j], 2) ** 2
            if model.sigma2_scale is not None:
                s = model.sigma2_scale(t, y1)
                eta = s[:, None] * ez
                bound_int += enorm * s**2 * dt
            else:
                S = model.sigma2(t, y1)
                eta = np.einsum("nji,nj->ni", S, ez)
                bound_int += enorm * np.linalg.norm(S, ord=2, axis=(1, 2)) ** 2 * dt
            esq = np.sum(eta * eta, axis=1)
            logR += np.sum(eta * noise, axis=1) - 0.5 * esq * dt
            eta_sq += esq * dt
            noise = noise - eta * dt
        yn = Y2 + b2y * dt + _apply_sigma2(model, t, y1, noise)
        X2, Y2 = xn, yn
        if store:
            X2s[:, k + 1], Y2s[:, k + 1] = X2, Y2

    term_gap = np.linalg.norm(X2 - Y2, axis=1)
    tol = tol_terminal(dt, gapT)
    tau2 = np.where(usable & (term_gap <= tol), 2.0 * T, NOT_COUPLED)
    inv_norm_sq = gram["inv_norm"] ** 2
    with np.errstate(invalid="ignore"):
        psi_q = inv_norm_sq * gram["sigma_sq_int"]
        eta_bound = inv_norm_sq * gapT**2 * bound_int
    out = {
        "X2_end": X2,
        "Y2_end": Y2,
        "gapT": gapT,
        "tau2": tau2,
        "logR2": logR,
        "eta_sq_int": eta_sq,
        "terminal_gap": term_gap,
        "tol_terminal": tol,
        "gramian_flagged": gram["flagged"],
        "smallest_sv": gram["smallest_sv"],
        "psi_integrand_q": psi_q,
        "eta_bound": eta_bound,
        "h_sup": h_sup_along(model, Y1, half, delta0),
        "truncation_active_fraction": np.zeros(n),
    }
    if store:
        out["X2"], out["Y2"] = X2s, Y2s
    return out


def simulate_controlled_second(
    model: SdeModel, first: FirstStep, params: CouplingParams, grid: TimeGrid, stream: Optional[NoiseStream] = None
) -> CoupledPath:
    if model.linear_part is None:
        raise ValueError("the Gramian pathway needs a model with linear_part")
    if first.failed:
        raise ValueError("first coupling failed; second step requires X1 == Y1 on [T, 2T]")
    batch = {"X1": first.X1[None], "Y1": first.Y1[None]}
    res = control_second_batch(model, params, grid, batch, first.dB[None, :, model.m :], store=True)
    if res["gramian_flagged"][0]:
        raise np.linalg.LinAlgError("Gramian is numerically singular along this path")
    return CoupledPath(
        grid=grid,
        X=np.concatenate([first.X1, res["X2"][0]], axis=1),
        Y=np.concatenate([first.Y1, res["Y2"][0]], axis=1),
        tau1=first.tau1,
        tau2=float(res["tau2"][0]),
        logR1=first.weight.log_weight,
        logR2=float(res["logR2"][0]),
        truncation_active_fraction=0.0,
        diagnostics={
            "gapT": float(res["gapT"][0]),
            "eta_sq_int": float(res["eta_sq_int"][0]),
            "terminal_gap": float(res["terminal_gap"][0]),
            "tol_terminal": float(res["tol_terminal"][0]),
            "smallest_singular_value": float(res["smallest_sv"][0]),
        },
    )


def entropy_bound_ab0(
    K_T: float,
    lambda_T: float,
    theta_T: float,
    Theta_T: float,
    T: float,
    delta0: float,
    delta2: float,
    PsiT_estimate: float,
    phi_val: float,
) -> float:
    """Bound on ``E[(R1 R2~) log(R1 R2~)]`` for the Gramian coupling.

    ``phi_val`` is ``phi_T(delta0^2)``.
    """
    first = k_ratio(K_T, T) * delta0**2 / lambda_T**2
    second = 0.5 * theta_T * math.exp(2.0 * Theta_T * T) * PsiT_estimate
    return float(first + second * (delta2**2 + decay_integral(Theta_T, T) * phi_val))
