"""Exponential rate factors of the coupling drifts and entropy bounds.

Every factor has a removable singularity at zero rate (K = 0 or Theta = 0,
which is exactly the Gruschin case). Below ``LIMIT_THRESHOLD`` in ``|rate*T|``
the first-order expansion is used instead of the 0/0 quotient.
"""

from __future__ import annotations

import numpy as np

LIMIT_THRESHOLD = 1e-8


def _small(rate: float, T: float) -> bool:
    return abs(rate * T) < LIMIT_THRESHOLD


def rate_v1(K: float, t, T: float):
    """``2K e^{-Kt} / (1 - e^{-2KT})``, scalar factor of the first coupling drift."""
    t = np.asarray(t, float)
    if _small(K, T):
        return (1.0 + K * (T - t)) / T
    return 2.0 * K * np.exp(-K * t) / (-np.expm1(-2.0 * K * T))


def rate_v2(Theta: float, t, T: float):
    """``2Theta e^{-Theta t} / (e^{-2Theta T} - e^{-4Theta T})`` with absolute time ``t``."""
    t = np.asarray(t, float)
    if _small(Theta, T):
        return (1.0 + Theta * (3.0 * T - t)) / T
    den = np.exp(-2.0 * Theta * T) * (-np.expm1(-2.0 * Theta * T))
    return 2.0 * Theta * np.exp(-Theta * t) / den


def contraction_profile(K: float, t, T: float):
    """``(e^{-Kt} - e^{-K(2T-t)}) / (1 - e^{-2KT})`` on ``[0, T]``, zero after ``T``."""
    t = np.asarray(t, float)
    if _small(K, T):
        val = (T - t) / T
    else:
        val = np.exp(-K * t) * (-np.expm1(-2.0 * K * (T - t))) / (-np.expm1(-2.0 * K * T))
    return np.where(t <= T, np.maximum(val, 0.0), 0.0)


def k_ratio(K: float, T: float) -> float:
    """``K / (1 - e^{-2KT})`` -> ``1/(2T)``."""
    if _small(K, T):
        return (1.0 + K * T) / (2.0 * T)
    return K / (-np.expm1(-2.0 * K * T))


def theta_ratio(Theta: float, T: float) -> float:
    """``Theta / (e^{-2Theta T} - e^{-4Theta T})`` -> ``1/(2T)``."""
    if _small(Theta, T):
        return (1.0 + 3.0 * Theta * T) / (2.0 * T)
    return Theta / (np.exp(-2.0 * Theta * T) * (-np.expm1(-2.0 * Theta * T)))


def decay_integral(Theta: float, T: float) -> float:
    """``(1 - e^{-2Theta T}) / Theta`` -> ``2T``."""
    if _small(Theta, T):
        return 2.0 * T * (1.0 - Theta * T)
    return -np.expm1(-2.0 * Theta * T) / Theta


def growth_integral(Theta: float, T: float) -> float:
    """``(e^{2Theta T} - 1) / Theta`` -> ``2T``."""
    if _small(Theta, T):
        return 2.0 * T * (1.0 + Theta * T)
    return np.expm1(2.0 * Theta * T) / Theta


def w_star_weight(Theta: float, t, T: float):
    """``2Theta^2 e^{-2Theta t} / (e^{-2Theta T} - e^{-4Theta T})^2`` -> ``1/(2T^2)``."""
    t = np.asarray(t, float)
    if _small(Theta, T):
        return (1.0 + Theta * (6.0 * T - 2.0 * t)) / (2.0 * T * T)
    den = np.exp(-2.0 * Theta * T) * (-np.expm1(-2.0 * Theta * T))
    return 2.0 * Theta**2 * np.exp(-2.0 * Theta * t) / den**2
