import numpy as np
import pytest

from logharnack.model import AssumptionProfile, GruschinParams, SdeModel, make_gruschin

# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE_RESULTS = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def gruschin(l=1.0, m=1, d=1, c1=1.0):
    return make_gruschin(GruschinParams(m=m, d=d, l=l, c1=c1))


def _ones(t, x1):
    return np.ones(x1.shape[0])


def constant_sigma_model(m=1, d=1, A=None):
    """Second component driven by plain Brownian noise: sigma2 == I, h == 1."""
    base = gruschin(1.0, m, d)
    prof = AssumptionProfile(
        lam=base.profile.lam,
        K=base.profile.K,
        Theta=base.profile.Theta,
        phi=lambda t, r: np.zeros_like(np.asarray(r, float)),
        h=lambda r: np.ones_like(np.asarray(r, float)),
    )
    return SdeModel(
        m=m,
        d=d,
        drift1=base.drift1,
        drift2=(lambda t, x1, x2: x2 @ np.asarray(A).T) if A is not None else base.drift2,
        sigma1=base.sigma1,
        sigma2=lambda t, x1: np.broadcast_to(np.eye(d), (x1.shape[0], d, d)),
        profile=prof,
        linear_part=np.zeros((d, d)) if A is None else np.asarray(A, float),
        sigma2_scale=_ones,
        driftless=True,
        name="constant-sigma",
    )


@pytest.fixture
def g1():
    return gruschin(1.0)
