import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logharnack.parallel import chunk_ids, map_chunks
from logharnack.paths import (
    MCConfig,
    NoiseStream,
    PathBlowUpError,
    TimeGrid,
    brownian_increments,
    em_batch,
    euler_maruyama,
    increments_batch,
    semigroup_mc,
    summarize_terminal,
    terminal_samples,
)
from logharnack.stats import estimate, tail_share

from conftest import gruschin


def test_grid_basics():
    g = TimeGrid(0.0, 2.0, 8)
    assert g.dt == 0.25
    assert np.all(np.diff(g.points()) > 0)
    assert g.points()[-1] == 2.0
    assert g.index_at(1.0) == 4
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 3)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0)


def test_increments_deterministic():
    g = TimeGrid(0.0, 1.0, 50)
    a = brownian_increments(g, NoiseStream(7, 3, 2))
    b = brownian_increments(g, NoiseStream(7, 3, 2))
    c = brownian_increments(g, NoiseStream(7, 4, 2))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(increments_batch(g, 7, [3, 4], 2), np.stack([a, c]))


def test_increment_moments():
    dt = 0.01
    n = 10**6
    inc = brownian_increments(TimeGrid(0.0, n * dt, n), NoiseStream(1, 0, 1))[:, 0]
    assert abs(inc.mean()) <= 4 * math.sqrt(dt / n)
    assert abs(inc.var() / dt - 1) < 0.01


def test_distinct_streams_uncorrelated():
    g = TimeGrid(0.0, 1.0, 20000)
    a = brownian_increments(g, NoiseStream(0, 10, 1))[:, 0]
    b = brownian_increments(g, NoiseStream(0, 11, 1))[:, 0]
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / math.sqrt(g.n_steps)


def test_first_component_exact(g1):
    g = TimeGrid(0.0, 1.0, 64)
    s = NoiseStream(3, 9, 2)
    p = euler_maruyama(g1, [0.4, -1.0], g, s)
    dB = brownian_increments(g, s)
    expect = np.cumsum(np.concatenate([[0.4], dB[:, 0]]))
    assert np.array_equal(p.states[:, 0], expect)
    assert p.states.shape == (65, 2)
    assert np.array_equal(p.states[0], [0.4, -1.0])
    # second component: Euler sum of |X1| dB2 at the left points
    x2 = -1.0 + np.concatenate([[0.0], np.cumsum(np.abs(expect[:-1]) * dB[:, 1])])
    assert np.allclose(p.states[:, 1], x2, rtol=0, atol=1e-14)


def test_em_rejects_bad_initial_state(g1):
    with pytest.raises(ValueError):
        euler_maruyama(g1, [0.0], TimeGrid(0.0, 1.0, 4), NoiseStream(0, 0, 2))


def test_paths_bit_reproducible(g1):
    g = TimeGrid(0.0, 1.0, 128)
    a = euler_maruyama(g1, [0.1, 0.2], g, NoiseStream(5, 1, 2))
    b = euler_maruyama(g1, [0.1, 0.2], g, NoiseStream(5, 1, 2))
    assert np.array_equal(a.states, b.states)


def test_blow_up_is_recorded():
    m = gruschin(1.0)
    dB = np.full((2, 4, 2), 1.0)
    dB[1, 1, 1] = np.inf
    res = em_batch(m, [0.0, 0.0], TimeGrid(0.0, 1.0, 4), dB)
    assert res["blown_step"].tolist() == [-1, 2]
    assert np.isnan(res["terminal"][1]).all()
    with pytest.raises(PathBlowUpError):
        summarize_terminal(np.ones(2), res["blown_step"])


@pytest.mark.slow
def test_second_component_variance():
    # Var X2_T = E int_0^T B_s^2 ds = T^2/2, minus the left-point bias T^2/(2N).
    m = gruschin(1.0)
    res = terminal_samples(m, [0.0, 0.0], 1.0, 100_000, seed=2, dt=1 / 1024)
    x2 = res["terminal"][:, 1]
    est = estimate(x2**2)
    assert est.within(0.5 * (1 - 1 / 1024), z=3)
    assert estimate(x2).within(0.0, z=4)


def test_semigroup_constant_and_mean():
    m = gruschin(0.5)
    one = semigroup_mc(m, lambda x: np.ones(x.shape[0]), 1.0, [0.7, 0.0], 500, 1, 1 / 64)
    assert one.value == 1.0 and one.stderr == 0.0
    x1 = semigroup_mc(m, lambda x: x[:, 0], 1.0, [0.7, 0.0], 20_000, 1, 1 / 64)
    assert x1.within(0.7, z=3)


def test_semigroup_second_moment():
    m = gruschin(1.0)
    est = semigroup_mc(m, lambda x: np.minimum(x[:, 1] ** 2, 1e6), 1.0, [0.0, 0.0], 20_000, 4, 1 / 512)
    assert est.within(0.5 * (1 - 1 / 512), z=3)


def test_stderr_scales_with_sample_size():
    m = gruschin(1.0)
    f = lambda x: np.tanh(x[:, 1])  # noqa: E731
    a = semigroup_mc(m, f, 1.0, [0.5, 0.0], 4000, 9, 1 / 32)
    b = semigroup_mc(m, f, 1.0, [0.5, 0.0], 16000, 9, 1 / 32)
    assert a.stderr / b.stderr == pytest.approx(2.0, rel=0.2)


def test_semigroup_worker_invariance():
    m = gruschin(1.0)
    f = lambda x: np.cos(x[:, 1])  # noqa: E731
    a = semigroup_mc(m, f, 1.0, [0.5, 0.0], 2500, 3, 1 / 16, workers=1)
    b = semigroup_mc(m, f, 1.0, [0.5, 0.0], 2500, 3, 1 / 16, workers=2)
    assert a == b


def test_path_csv_dump(g1):
    p = euler_maruyama(g1, [0.0, 0.0], TimeGrid(0.0, 1.0, 4), NoiseStream(0, 0, 2))
    buf = io.StringIO()
    p.to_csv(buf, 1)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "t,x1_0,x2_0"
    assert len(lines) == 6


@given(n=st.integers(1, 5000), size=st.integers(1, 700), offset=st.integers(0, 2**40))
def test_chunks_cover_range_in_order(n, size, offset):
    ids = np.concatenate(chunk_ids(offset, n, size))
    assert np.array_equal(ids, offset + np.arange(n, dtype=np.uint64))


def _echo(ids, scale):
    return {"v": ids.astype(float) * scale}


@settings(deadline=None, max_examples=10)
@given(n=st.integers(1, 3000), workers=st.integers(1, 3))
def test_map_chunks_order_stable(n, workers):
    out = map_chunks(_echo, 100, n, workers=workers, chunk_size=512, scale=2.0)
    assert np.array_equal(out["v"], 2.0 * (100 + np.arange(n)))


def test_tail_share():
    assert tail_share(np.ones(100)) == pytest.approx(0.01)
    x = np.ones(100)
    x[0] = 1000.0
    assert tail_share(x) == pytest.approx(1000 / 1099)


def test_mc_config_validation():
    with pytest.raises(ValueError):
        MCConfig(n_paths=1)
