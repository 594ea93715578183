"""Gruschin-type SDE models and the constants of their structural assumptions.

The state is split as ``x = (x1, x2)`` with ``x1`` in R^m and ``x2`` in R^d::

    dX1 = b1(t, X1) dt + sigma1(t) dB1
    dX2 = b2(t, X1, X2) dt + sigma2(t, X1) dB2

All coefficient callables are vectorised over a leading batch axis:

* ``drift1(t, x1)``: ``(n, m) -> (n, m)``
* ``drift2(t, x1, x2)``: ``(n, m), (n, d) -> (n, d)``
* ``sigma1(t)``: ``-> (m, m)`` (state independent)
* ``sigma2(t, x1)``: ``(n, m) -> (n, d, d)``

``sigma2_scale`` is an optional shortcut for isotropic models where
``sigma2(t, x1) = s(t, x1) * I_d``; it returns the ``(n,)`` scalar ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc


@dataclass(frozen=True)
class AssumptionProfile:
    """Functions housing the constants of the three structural assumptions.

    ``lam`` is the ellipticity floor of ``sigma1`` (decreasing), ``K`` the
    one-sided Lipschitz constant of ``b1`` (increasing), ``Theta`` and
    ``phi``/``h`` the monotonicity budget of the second component.
    """

    lam: Callable[[float], float]
    K: Callable[[float], float]
    Theta: Callable[[float], float]
    phi: Callable[[float, np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GruschinParams:
    m: int = 1
    d: int = 1
    l: float = 1.0
    c1: float = 1.0

    def __post_init__(self):
        if self.m < 1 or self.d < 1:
            raise ValueError(f"dimensions must be positive, got m={self.m}, d={self.d}")
        if not self.l > 0:
            raise ValueError(f"Gruschin order l must be > 0, got {self.l}")
        if not self.c1 >= 1:
            raise ValueError(f"c1 must be >= 1, got {self.c1}")


@dataclass(frozen=True)
class SdeModel:
    m: int
    d: int
    drift1: Callable
    drift2: Callable
    sigma1: Callable
    sigma2: Callable
    profile: AssumptionProfile
    linear_part: Optional[np.ndarray] = None
    sigma2_scale: Optional[Callable] = None
    # drift1 == 0 and drift2 == linear_part @ x2: lets the steppers skip calls
    driftless: bool = False
    gruschin: Optional[GruschinParams] = None
    name: str = "custom"

    @property
    def dim(self) -> int:
        return self.m + self.d

    def split(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"state must have {self.dim} coordinates, got {x.shape[-1]}")
        return x[..., : self.m], x[..., self.m :]

    def sigma2_matrix(self, t: float, x1: np.ndarray) -> np.ndarray:
        if self.sigma2_scale is not None:
            s = self.sigma2_scale(t, x1)
            return s[:, None, None] * np.eye(self.d)
        return self.sigma2(t, x1)


# Module-level coefficient functions so Gruschin models pickle cleanly into
# worker processes.


def _zero_drift1(t, x1):
    return np.zeros_like(x1)


def _zero_drift2(t, x1, x2):
    return np.zeros_like(x2)


def _identity_sigma1(t, m):
    return np.eye(m)


def _gruschin_scale(t, x1, l):
    return np.linalg.norm(x1, axis=-1) ** l


def _gruschin_sigma2(t, x1, l, d):
    s = _gruschin_scale(t, x1, l)
    return s[:, None, None] * np.eye(d)


def _const(t, value):
    return value


def _power_phi(t, r, p):
    return np.asarray(r, dtype=float) ** p


def _gruschin_h(r, c1, p):
    return np.maximum(c1, np.asarray(r, dtype=float) ** p)


def make_gruschin(params: GruschinParams) -> SdeModel:
    """Gruschin model ``dX1 = dB1``, ``dX2 = |X1|^l dB2`` on R^{m+d}.

    The profile uses ``lam = 1``, ``K = Theta = 0``, ``phi(r) = r^(l ^ 1)`` and
    ``h(r) = c1 v r^(2 (l-1)^+)``.
    """
    l, m, d = params.l, params.m, params.d
    profile = AssumptionProfile(
        lam=partial(_const, value=1.0),
        K=partial(_const, value=0.0),
        Theta=partial(_const, value=0.0),
        phi=partial(_power_phi, p=min(l, 1.0)),
        h=partial(_gruschin_h, c1=params.c1, p=2.0 * max(l - 1.0, 0.0)),
    )
    return SdeModel(
        m=m,
        d=d,
        drift1=_zero_drift1,
        drift2=_zero_drift2,
        sigma1=partial(_identity_sigma1, m=m),
        sigma2=partial(_gruschin_sigma2, l=l, d=d),
        profile=profile,
        linear_part=np.zeros((d, d)),
        sigma2_scale=partial(_gruschin_scale, l=l),
        driftless=True,
        gruschin=params,
        name="gruschin",
    )


def psi_finiteness_gruschin(params: GruschinParams) -> bool:
    """Whether the inverse-diffusion moment of the Gruschin model is finite (2l < m)."""
    return 2.0 * params.l < params.m


def model_from_config(block: dict) -> SdeModel:
    kind = block.get("model", "gruschin")
    if kind != "gruschin":
        raise ValueError(f"unknown model {kind!r}; custom models are registered programmatically")
    return make_gruschin(
        GruschinParams(
            m=int(block.get("m", 1)),
            d=int(block.get("d", 1)),
            l=float(block["l"]),
            c1=float(block.get("c1", 1.0)),
        )
    )


@dataclass
class AssumptionCheckReport:
    """Worst-case margins over the sampled arguments; positive means violated.

    The assumptions quantify over all times and states, so a clean report only
    says no counterexample was found among the samples.
    """

    a1_margin: float
    a2_margin: float
    a3_margin: float
    n_times: int
    n_pairs: int
    linear_part_residual: Optional[float] = None
    lambda_monotone: bool = True
    failures: list = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "a1_margin": self.a1_margin,
            "a2_margin": self.a2_margin,
            "a3_margin": self.a3_margin,
            "n_times": self.n_times,
            "n_pairs": self.n_pairs,
            "linear_part_residual": self.linear_part_residual,
            "lambda_monotone": self.lambda_monotone,
            "failures": list(self.failures),
            "scope": "sampled",
        }


def default_sample_pairs(model: SdeModel, n: int = 256, scale: float = 3.0, seed: int = 0):
    """Latin-hypercube state pairs in ``[-scale, scale]^(2(m+d))``."""
    sampler = qmc.LatinHypercube(d=2 * model.dim, seed=seed)
    u = qmc.scale(sampler.random(n), -scale, scale)
    return u[:, : model.dim], u[:, model.dim :]


def check_assumptions(
    model: SdeModel,
    t_grid: Sequence[float],
    sample_points=None,
    n_default: int = 256,
    seed: int = 0,
    tol: float = 1e-12,
) -> AssumptionCheckReport:
    """Spot-check the three structural assumptions on a time grid and state pairs.

    ``sample_points`` is a list of ``(x, y)`` state pairs; a Latin-hypercube
    set is always appended.
    """
    t_grid = [float(t) for t in t_grid]
    if not t_grid:
        raise ValueError("t_grid must be non-empty")
    xs, ys = default_sample_pairs(model, n_default, seed=seed)
    if sample_points:
        px = np.array([np.asarray(p[0], float) for p in sample_points]).reshape(-1, model.dim)
        py = np.array([np.asarray(p[1], float) for p in sample_points]).reshape(-1, model.dim)
        xs, ys = np.vstack([px, xs]), np.vstack([py, ys])
    x1, x2 = model.split(xs)
    y1, y2 = model.split(ys)
    prof = model.profile

    a1 = a2 = a3 = -np.inf
    resid = 0.0 if model.linear_part is not None else None
    lams = []
    for t in t_grid:
        s1 = np.asarray(model.sigma1(t), float)
        lam = float(prof.lam(t))
        lams.append(lam)
        a1 = max(a1, lam**2 - np.linalg.eigvalsh(s1 @ s1.T).min())

        dx1 = x1 - y1
        db1 = model.drift1(t, x1) - model.drift1(t, y1)
        a2 = max(a2, np.max(np.sum(db1 * dx1, axis=-1) - prof.K(t) * np.sum(dx1**2, axis=-1)))

        dx2 = x2 - y2
        db2 = model.drift2(t, x1, x2) - model.drift2(t, y1, y2)
        ds = model.sigma2_matrix(t, x1) - model.sigma2_matrix(t, y1)
        lhs = np.sum(db2 * dx2, axis=-1) + 0.5 * np.sum(ds**2, axis=(-2, -1))
        big = np.maximum(np.linalg.norm(x1, axis=-1), np.linalg.norm(y1, axis=-1))
        rhs = prof.Theta(t) * np.sum(dx2**2, axis=-1) + prof.phi(
            t, np.sum(dx1**2, axis=-1)
        ) * prof.h(big)
        a3 = max(a3, np.max(lhs - rhs))

        if model.linear_part is not None:
            A = np.asarray(model.linear_part, float)
            lin = model.drift2(t, x1, x2) - model.drift2(t, x1, y2)
            resid = max(resid, float(np.max(np.abs(lin - dx2 @ A.T))))

    lam_arr = np.array(lams)
    order = np.argsort(t_grid)
    monotone = bool(np.all(np.diff(lam_arr[order]) <= tol)) and bool(np.all(lam_arr > 0))
    phi0 = max(abs(float(np.asarray(prof.phi(t, 0.0)))) for t in t_grid)
    h_min = float(np.min(prof.h(np.linspace(0.0, 10.0, 101))))

    failures = []
    if a1 > tol:
        failures.append("A1")
    if a2 > tol:
        failures.append("A2")
    if a3 > tol:
        failures.append("A3")
    if not monotone:
        failures.append("lambda not positive and non-increasing")
    if phi0 > tol:
        failures.append("phi(t, 0) != 0")
    if h_min < 1.0:
        failures.append("h < 1")
    if resid is not None and resid > 1e-9:
        failures.append("drift2 not affine in x2 with linear_part")
    return AssumptionCheckReport(
        a1_margin=float(a1),
        a2_margin=float(a2),
        a3_margin=float(a3),
        n_times=len(t_grid),
        n_pairs=len(xs),
        linear_part_residual=resid,
        lambda_monotone=monotone,
        failures=failures,
    )
