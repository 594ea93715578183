"""Monte Carlo checks of the log-Harnack inequality and the identities behind it.

Every check compares estimates with analytic values inside a band of
``Z_BAND`` combined standard errors. The left- and right-hand semigroup terms
are simulated on disjoint stream-id ranges so their errors are independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bounds import (
    DEFAULT_CLOSED_FORM_C,
    PreconditionError,
    PsiEstimate,
    closed_form_bound,
    divergence_message,
    estimate_psiT,
    estimate_PsiT,
    drift_bound,
    gramian_bound,
)
from .control import theta_sup
from .coupling import CouplingParams, entropy_bound_prop22
from .engine import run_coupled
from .model import SdeModel, psi_finiteness_gruschin
from .parallel import ROLE_OFFSETS, map_chunks
from .paths import MCConfig, TimeGrid, increments_batch, summarize_terminal, terminal_samples
from .stats import EstimateWithCI, combined_stderr, estimate, tail_share

Z_BAND = 4.0
MAX_TRUNCATION = 1e-3
MAX_COUPLING_FAILURE = 1e-3
VARIANTS = ("thm11", "thm12", "cor13")
TEST_FUNCTION_KINDS = ("exp_of_bounded", "gaussian_bump", "clipped_quadratic_exp")


@dataclass(frozen=True)
class TestFunction:
    """Strictly positive bounded test function on the full state space.

    * ``exp_of_bounded``: ``exp(amp * tanh(<w, x> - shift))``
    * ``gaussian_bump``: ``floor + height * exp(-|x - center|^2 / (2 width^2))``
    * ``clipped_quadratic_exp``: ``exp(-scale * min(|x - center|^2, clip))``
    """

    __test__ = False

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TEST_FUNCTION_KINDS:
            raise ValueError(f"unknown test function kind {self.kind!r}")
        if self.lower_bound <= 0 or not self.upper_bound >= self.lower_bound:
            raise ValueError(f"test function bounds invalid: {self.lower_bound}, {self.upper_bound}")

    def _p(self, key, default):
        return self.params.get(key, default)

    @property
    def lower_bound(self) -> float:
        if self.kind == "exp_of_bounded":
            return math.exp(-abs(self._p("amp", 1.0)))
        if self.kind == "gaussian_bump":
            return float(self._p("floor", 0.1))
        return math.exp(-self._p("scale", 1.0) * self._p("clip", 4.0))

    @property
    def upper_bound(self) -> float:
        if self.kind == "exp_of_bounded":
            return math.exp(abs(self._p("amp", 1.0)))
        if self.kind == "gaussian_bump":
            return float(self._p("floor", 0.1)) + float(self._p("height", 1.0))
        return 1.0

    def _center(self, dim: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self._p("center", 0.0), float), (dim,))

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        dim = x.shape[1]
        if self.kind == "exp_of_bounded":
            w = np.broadcast_to(np.asarray(self._p("w", 1.0), float), (dim,))
            return np.exp(self._p("amp", 1.0) * np.tanh(x @ w - self._p("shift", 0.0)))
        r2 = np.sum((x - self._center(dim)) ** 2, axis=1)
        if self.kind == "gaussian_bump":
            width = self._p("width", 1.0)
            return self._p("floor", 0.1) + self._p("height", 1.0) * np.exp(-r2 / (2.0 * width**2))
        return np.exp(-self._p("scale", 1.0) * np.minimum(r2, self._p("clip", 4.0)))

    def log(self, x) -> np.ndarray:
        return np.log(self(x))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": dict(self.params),
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
        }

    @classmethod
    def from_spec(cls, spec: dict) -> "TestFunction":
        return cls(spec["kind"], dict(spec.get("params", {})))


def constant_function(k: float) -> TestFunction:
    return TestFunction("gaussian_bump", {"floor": float(k), "height": 0.0})


def verdict_for(slack: float, cse: float, z: float = Z_BAND) -> str:
    if slack >= 0:
        return "holds"
    if slack >= -z * cse:
        return "holds_within_ci"
    return "violated"


@dataclass(frozen=True)
class BoundReport:
    variant: str
    T: float
    x: tuple
    y: tuple
    f: dict
    lhs: EstimateWithCI
    rhs_semigroup: EstimateWithCI
    rhs_bound: float
    rhs_bound_stderr: float
    slack: float
    combined_stderr: float
    verdict: str
    n_paths: int
    dt: float
    seed: int
    moment: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "T": self.T,
            "x": list(self.x),
            "y": list(self.y),
            "f": self.f,
            "lhs": self.lhs.to_dict(),
            "rhs_semigroup": self.rhs_semigroup.to_dict(),
            "rhs_bound": self.rhs_bound,
            "rhs_bound_stderr": self.rhs_bound_stderr,
            "slack": self.slack,
            "combined_stderr": self.combined_stderr,
            "verdict": self.verdict,
            "n_paths": self.n_paths,
            "dt": self.dt,
            "seed": self.seed,
            "moment": self.moment,
        }


def _check_variant(model: SdeModel, variant: str):
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if variant == "thm11" and model.gruschin is not None and not psi_finiteness_gruschin(model.gruschin):
        raise PreconditionError(divergence_message(model.m, model.gruschin.l))
    if variant in ("thm12", "cor13") and model.linear_part is None:
        raise PreconditionError(f"{variant} needs a model with linear_part (Gramian pathway)")
    if variant == "cor13" and model.gruschin is None:
        raise PreconditionError("cor13 applies to the Gruschin model only")


def _deltas(model: SdeModel, x, y):
    m = model.m
    return float(np.linalg.norm(x[:m] - y[:m])), float(np.linalg.norm(x[m:] - y[m:]))


def analytic_bound(
    model: SdeModel, x, y, T: float, variant: str, mc: MCConfig, c: float = DEFAULT_CLOSED_FORM_C
) -> tuple[float, float, Optional[PsiEstimate]]:
    """Additive bound of ``variant`` at ``(x, y, T)``, its MC standard error and the moment used."""
    _check_variant(model, variant)
    x, y = np.asarray(x, float), np.asarray(y, float)
    m = model.m
    d0, d2 = _deltas(model, x, y)
    if variant == "cor13":
        return closed_form_bound(model.gruschin.l, c, T, x[:m], y[:m], x[m:], y[m:]), 0.0, None
    if variant == "thm11":
        mom = estimate_psiT(model, x[:m], y[:m], T, mc)
        if not mom.finite:
            raise PreconditionError("psi_T estimate is infinite (sigma2 singular along sampled paths)")

        def fn(v):
            return drift_bound(model.profile, T, d0, d2, v)

    else:
        mom = estimate_PsiT(model, x[:m], y[:m], T, mc)
        theta = theta_sup(model.linear_part, T)

        def fn(v):
            return gramian_bound(model.profile, theta, T, d0, d2, v)

    value = fn(mom.value)
    return value, fn(mom.value + mom.stderr) - value, mom


def _direct_dt(T: float, mc: MCConfig) -> float:
    return T / mc.dt_divisor


def _endpoints(model: SdeModel, x0, T: float, mc: MCConfig, role: str) -> dict:
    return terminal_samples(
        model,
        x0,
        2.0 * T,
        mc.n_paths,
        mc.seed,
        _direct_dt(T, mc),
        stream_offset=ROLE_OFFSETS[role],
        workers=mc.workers,
    )


def _values(res: dict, fn) -> EstimateWithCI:
    term = res["terminal"]
    ok = res["blown_step"] < 0
    vals = np.full(term.shape[0], np.nan)
    vals[ok] = fn(term[ok])
    return summarize_terminal(vals, res["blown_step"])


def _log_of_mean(est: EstimateWithCI) -> EstimateWithCI:
    return EstimateWithCI(math.log(est.value), est.stderr / est.value, est.n, est.n_excluded)


def verify_log_harnack_many(
    model: SdeModel,
    x,
    y,
    T: float,
    fs: Sequence[TestFunction],
    variant: str,
    mc: MCConfig,
    c: float = DEFAULT_CLOSED_FORM_C,
) -> list[BoundReport]:
    """One report per test function; the endpoint samples and the moment are shared."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    bound, bound_se, mom = analytic_bound(model, x, y, T, variant, mc, c)
    from_y = _endpoints(model, y, T, mc, "direct_y")
    from_x = _endpoints(model, x, T, mc, "direct_x")
    reports = []
    for f in fs:
        lhs = _values(from_y, f.log)
        rhs = _log_of_mean(_values(from_x, f))
        slack = rhs.value + bound - lhs.value
        cse = combined_stderr(lhs.stderr, rhs.stderr, bound_se)
        reports.append(
            BoundReport(
                variant=variant,
                T=float(T),
                x=tuple(float(v) for v in x),
                y=tuple(float(v) for v in y),
                f=f.to_dict(),
                lhs=lhs,
                rhs_semigroup=rhs,
                rhs_bound=bound,
                rhs_bound_stderr=bound_se,
                slack=slack,
                combined_stderr=cse,
                verdict=verdict_for(slack, cse),
                n_paths=mc.n_paths,
                dt=_direct_dt(T, mc),
                seed=mc.seed,
                moment=None if mom is None else mom.to_dict(),
            )
        )
    return reports


def verify_log_harnack(
    model: SdeModel, x, y, T: float, f: TestFunction, variant: str, mc: MCConfig, c: float = DEFAULT_CLOSED_FORM_C
) -> BoundReport:
    """Check ``P_2T log f(y) <= log P_2T f(x) + bound(x, y, T)`` by simulation."""
    return verify_log_harnack_many(model, x, y, T, [f], variant, mc, c)[0]


def _pathway(variant: str) -> str:
    return "drift" if variant == "thm11" else "control"


def coupled_run(model: SdeModel, x, y, T: float, variant: str, mc: MCConfig) -> dict:
    _check_variant(model, variant)
    params = CouplingParams(T=T, x=np.asarray(x, float), y=np.asarray(y, float))
    return run_coupled(
        model, params, mc.n_paths, mc.seed, dt_divisor=mc.dt_divisor, pathway=_pathway(variant), workers=mc.workers
    )


def r_log_r(logR: np.ndarray) -> np.ndarray:
    """``R log R`` from ``log R``; zero where ``R`` underflows."""
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.exp(logR) * logR
    return np.where(np.isneginf(logR), 0.0, out)


def _reliability(res: dict) -> dict:
    fail = float(np.mean(np.isinf(res["tau2"]) | res["first_failed"]))
    trunc = float(np.max(res["truncation_active_fraction"]))
    flags = []
    if trunc > MAX_TRUNCATION:
        flags.append(f"truncation_active_fraction {trunc:.3g} > {MAX_TRUNCATION:g}")
    if fail > MAX_COUPLING_FAILURE:
        flags.append(f"coupling failure rate {fail:.3g} > {MAX_COUPLING_FAILURE:g}")
    return {"coupling_failure_rate": fail, "max_truncation_active_fraction": trunc, "flags": flags}


def verify_entropy_chain(model: SdeModel, x, y, T: float, variant: str, mc: MCConfig) -> dict:
    """MC relative entropy of the coupling weight against the analytic bound of ``variant``."""
    if variant == "cor13":
        variant = "thm12"
    x, y = np.asarray(x, float), np.asarray(y, float)
    res = coupled_run(model, x, y, T, variant, mc)
    bound, bound_se, mom = analytic_bound(model, x, y, T, variant, mc)
    ent = estimate(r_log_r(res["logR1"] + res["logR2"]))
    ent1 = estimate(r_log_r(res["logR1"]))
    d0, _ = _deltas(model, x, y)
    b1 = entropy_bound_prop22(float(model.profile.K(T)), float(model.profile.lam(T)), T, d0)
    cse = combined_stderr(ent.stderr, bound_se)
    margin = (bound - ent.value) / cse if cse > 0 else (math.inf if bound >= ent.value else -math.inf)
    rel = _reliability(res)
    return {
        "variant": variant,
        "T": float(T),
        "x": x.tolist(),
        "y": y.tolist(),
        "entropy": ent.to_dict(),
        "bound": bound,
        "bound_stderr": bound_se,
        "margin_in_stderr": margin,
        "verdict": verdict_for(bound - ent.value, cse),
        "step1_entropy": ent1.to_dict(),
        "step1_bound": b1,
        "step1_verdict": verdict_for(b1 - ent1.value, ent1.stderr),
        "step1_half_xi_sq": estimate(0.5 * res["xi1_sq_int"]).to_dict(),
        "tail_diagnostic": tail_share(r_log_r(res["logR1"] + res["logR2"])),
        "moment": None if mom is None else mom.to_dict(),
        "unreliable": bool(rel["flags"]),
        **rel,
        "n_paths": mc.n_paths,
        "dt": float(res["dt"][0]),
        "seed": mc.seed,
    }


def verify_importance_sampling_many(
    model: SdeModel, x, y, T: float, gs: Sequence[TestFunction], variant: str, mc: MCConfig
) -> list[dict]:
    """Direct ``E g(X_2T(y))`` against the weighted ``E[R g(X_2T(x))]`` on coupled paths."""
    if variant == "cor13":
        variant = "thm12"
    x, y = np.asarray(x, float), np.asarray(y, float)
    res = coupled_run(model, x, y, T, variant, mc)
    direct_samples = _endpoints(model, y, T, mc, "direct_y")
    R = np.exp(res["logR1"] + res["logR2"])
    rel = _reliability(res)
    out = []
    for g in gs:
        direct = _values(direct_samples, g)
        weighted = estimate(R * g(res["X_end"]))
        cse = combined_stderr(direct.stderr, weighted.stderr)
        diff = weighted.value - direct.value
        out.append(
            {
                "variant": variant,
                "T": float(T),
                "x": x.tolist(),
                "y": y.tolist(),
                "g": g.to_dict(),
                "direct": direct.to_dict(),
                "weighted": weighted.to_dict(),
                "difference": diff,
                "combined_stderr": cse,
                "agrees": bool(abs(diff) <= Z_BAND * cse),
                "weight_mean": estimate(R).to_dict(),
                "unreliable": bool(rel["flags"]),
                **rel,
                "n_paths": mc.n_paths,
                "dt": float(res["dt"][0]),
                "seed": mc.seed,
            }
        )
    return out


def verify_importance_sampling(
    model: SdeModel, x, y, T: float, g: TestFunction, variant: str, mc: MCConfig
) -> dict:
    return verify_importance_sampling_many(model, x, y, T, [g], variant, mc)[0]


def _moments_chunk(ids, x1, l, rs, grid, seed):
    N = grid.n_steps
    half = N // 2
    dB = increments_batch(grid, seed, ids, 1)[:, :, 0]
    B = np.concatenate([np.zeros((dB.shape[0], 1)), np.cumsum(dB, axis=1)], axis=1) + x1
    absB = np.abs(B)
    run_max = absB[:, : half + 1].max(axis=1)
    out = {f"sup_r{j}": run_max ** (2.0 * r) for j, r in enumerate(rs)}
    seg = absB[:, half:] ** (2.0 * l)
    integral = grid.dt * (seg.sum(axis=1) - 0.5 * (seg[:, 0] + seg[:, -1]))
    out["inverse"] = integral**-2.0
    return out


def verify_moment_lemmas(
    l: float, x1: float, T_list: Sequence[float], mc: MCConfig, r_list: Optional[Sequence[float]] = None
) -> dict:
    """Running-max moments and the inverse time-integral moment of ``|B + x1|``.

    Checks that ``E(int_T^2T |B_t + x1|^{2l} dt)^{-2} * T^{2(l+1)}`` stays within a
    factor 3 across ``T_list``, and the Doob sandwich ``T <= E sup |B|^2 <= 4T``
    when ``x1 = 0``.
    """
    if not l > 0:
        raise ValueError("l must be positive")
    rs = list(r_list) if r_list is not None else sorted({0.0, max(l - 1.0, 0.0), 1.0})
    rows = []
    for T in T_list:
        grid = TimeGrid(0.0, 2.0 * T, 2 * mc.dt_divisor)
        res = map_chunks(
            _moments_chunk,
            ROLE_OFFSETS["moments"],
            mc.n_paths,
            workers=mc.workers,
            x1=float(x1),
            l=float(l),
            rs=rs,
            grid=grid,
            seed=mc.seed,
        )
        inv = estimate(res["inverse"])
        sups = {repr(r): estimate(res[f"sup_r{j}"]).to_dict() for j, r in enumerate(rs)}
        row = {
            "T": float(T),
            "sup_moments": sups,
            "inverse_moment": inv.to_dict(),
            "inverse_tail_diagnostic": tail_share(res["inverse"]),
            "scaled_inverse": inv.value * T ** (2.0 * (l + 1.0)),
        }
        if x1 == 0 and 1.0 in rs:
            v = sups[repr(1.0)]["value"]
            row["doob_sandwich"] = bool(T <= v + Z_BAND * sups[repr(1.0)]["stderr"] and v <= 4.0 * T)
        rows.append(row)
    scaled = [r["scaled_inverse"] for r in rows]
    ratio = max(scaled) / min(scaled)
    return {
        "l": float(l),
        "x1": float(x1),
        "r_list": rs,
        "rows": rows,
        "scaled_ratio": ratio,
        "ratio_ok": bool(ratio < 3.0),
        "doob_ok": all(r.get("doob_sandwich", True) for r in rows),
        "n_paths": mc.n_paths,
        "seed": mc.seed,
    }
