"""Time grids, reproducible Brownian increments and Euler-Maruyama paths."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import SdeModel
from .parallel import DEFAULT_CHUNK, map_chunks
from .stats import EstimateWithCI, estimate

MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t1: float
    n_steps: int

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError(f"need t1 > t0, got [{self.t0}, {self.t1}]")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    def points(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def time(self, k: int) -> float:
        return self.t0 + k * self.dt

    def index_at(self, t: float) -> int:
        """Index of the grid point nearest ``t`` from below."""
        return int(math.floor((t - self.t0) / self.dt + 1e-9))


@dataclass(frozen=True)
class MCConfig:
    """Sample size, discretisation and seeding for one Monte Carlo estimate."""

    n_paths: int = 10_000
    dt_divisor: int = 2048
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n_paths < 2 or self.dt_divisor < 1 or self.workers < 1:
            raise ValueError("n_paths >= 2, dt_divisor >= 1 and workers >= 1 are required")


def grid_for(t_end: float, dt: float) -> TimeGrid:
    n = max(1, int(round(t_end / dt)))
    return TimeGrid(0.0, float(t_end), n)


@dataclass(frozen=True)
class NoiseStream:
    seed: int
    stream_id: int
    dimension: int

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")


def generator(seed: int, stream_id: int) -> np.random.Generator:
    """Philox generator keyed by ``(seed, stream_id)``; the counter walks the steps."""
    key = np.array([int(seed) & MASK64, int(stream_id) & MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def brownian_increments(grid: TimeGrid, stream: NoiseStream) -> np.ndarray:
    g = generator(stream.seed, stream.stream_id)
    return math.sqrt(grid.dt) * g.standard_normal((grid.n_steps, stream.dimension))


def increments_batch(grid: TimeGrid, seed: int, stream_ids, dimension: int) -> np.ndarray:
    """Stack of per-path increments, shape ``(len(stream_ids), n_steps, dimension)``."""
    ids = np.asarray(stream_ids, dtype=np.uint64)
    out = np.empty((ids.size, grid.n_steps, dimension))
    sq = math.sqrt(grid.dt)
    for i, sid in enumerate(ids):
        out[i] = generator(seed, int(sid)).standard_normal((grid.n_steps, dimension))
    out *= sq
    return out


@dataclass
class Path:
    grid: TimeGrid
    states: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def blown_up(self) -> bool:
        return bool(self.diagnostics.get("blown_up", False))

    def to_csv(self, fh, m: int) -> None:
        w = csv.writer(fh)
        d = self.states.shape[1] - m
        w.writerow(["t"] + [f"x1_{i}" for i in range(m)] + [f"x2_{j}" for j in range(d)])
        for t, row in zip(self.grid.points(), self.states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def _diffuse2(model: SdeModel, t: float, x1: np.ndarray, dB2: np.ndarray) -> np.ndarray:
    if model.sigma2_scale is not None:
        return model.sigma2_scale(t, x1)[:, None] * dB2
    return np.einsum("nij,nj->ni", model.sigma2(t, x1), dB2)


def _drift2(model: SdeModel, t, x1, x2):
    if model.driftless:
        A = model.linear_part
        if A is None or not np.any(A):
            return None
        return x2 @ np.asarray(A).T
    return model.drift2(t, x1, x2)


def em_step(model: SdeModel, t: float, dt: float, x1, x2, dB1, dB2):
    """One explicit Euler-Maruyama step of the triangular system."""
    s1 = np.asarray(model.sigma1(t), float)
    n1 = x1 + dB1 @ s1.T
    if not model.driftless:
        n1 = n1 + model.drift1(t, x1) * dt
    n2 = x2 + _diffuse2(model, t, x1, dB2)
    b2 = _drift2(model, t, x1, x2)
    if b2 is not None:
        n2 = n2 + b2 * dt
    return n1, n2


def em_batch(model: SdeModel, x0, grid: TimeGrid, dB: np.ndarray, store: bool = False) -> dict:
    """Integrate a batch of paths driven by ``dB`` of shape ``(n, n_steps, m+d)``.

    Paths that become non-finite are frozen at NaN and reported through
    ``blown_step`` (``-1`` for healthy paths).
    """
    n = dB.shape[0]
    m = model.m
    x0 = np.asarray(x0, float)
    x1 = np.broadcast_to(x0[:m], (n, m)).copy()
    x2 = np.broadcast_to(x0[m:], (n, model.d)).copy()
    blown = np.full(n, -1, dtype=np.int64)
    states = None
    if store:
        states = np.empty((n, grid.n_steps + 1, model.dim))
        states[:, 0, :m], states[:, 0, m:] = x1, x2
    dt = grid.dt
    for k in range(grid.n_steps):
        t = grid.time(k)
        with np.errstate(all="ignore"):
            x1, x2 = em_step(model, t, dt, x1, x2, dB[:, k, :m], dB[:, k, m:])
        bad = ~(np.isfinite(x1).all(axis=1) & np.isfinite(x2).all(axis=1))
        if bad.any():
            fresh = bad & (blown < 0)
            blown[fresh] = k + 1
            x1[bad], x2[bad] = np.nan, np.nan
        if store:
            states[:, k + 1, :m], states[:, k + 1, m:] = x1, x2
    out = {"terminal": np.concatenate([x1, x2], axis=1), "blown_step": blown}
    if store:
        out["states"] = states
    return out


def euler_maruyama(model: SdeModel, x0, grid: TimeGrid, stream: NoiseStream) -> Path:
    x0 = np.asarray(x0, float)
    if x0.shape != (model.dim,):
        raise ValueError(f"x0 must have {model.dim} coordinates, got shape {x0.shape}")
    dB = brownian_increments(grid, stream)[None]
    res = em_batch(model, x0, grid, dB, store=True)
    step = int(res["blown_step"][0])
    diag = {"blown_up": step >= 0}
    if step >= 0:
        diag["blown_step"] = step
        diag["blown_time"] = grid.time(step)
    return Path(grid=grid, states=res["states"][0], diagnostics=diag)


def _terminal_chunk(ids, model, x0, grid, seed):
    dB = increments_batch(grid, seed, ids, model.dim)
    return em_batch(model, x0, grid, dB)


def terminal_samples(
    model: SdeModel,
    x0,
    t: float,
    n_paths: int,
    seed: int,
    dt: float,
    stream_offset: int = 0,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
) -> dict:
    grid = grid_for(t, dt)
    return map_chunks(
        _terminal_chunk,
        stream_offset,
        n_paths,
        workers=workers,
        chunk_size=chunk_size,
        model=model,
        x0=np.asarray(x0, float),
        grid=grid,
        seed=seed,
    )


MAX_EXCLUDED_FRACTION = 1e-3


class PathBlowUpError(RuntimeError):
    pass


def summarize_terminal(values: np.ndarray, blown: np.ndarray) -> EstimateWithCI:
    ok = blown < 0
    n_bad = int((~ok).sum())
    if n_bad > MAX_EXCLUDED_FRACTION * blown.size:
        raise PathBlowUpError(f"{n_bad} of {blown.size} paths blew up (limit {MAX_EXCLUDED_FRACTION:.0e})")
    return estimate(values[ok], n_excluded=n_bad)


def semigroup_mc(
    model: SdeModel,
    f: Callable[[np.ndarray], np.ndarray],
    t: float,
    x,
    n_paths: int,
    base_seed: int,
    dt: float,
    workers: int = 1,
    stream_offset: int = 0,
) -> EstimateWithCI:
    """Monte Carlo estimate of ``E f(X_t(x))`` with its standard error.

    ``f`` maps a ``(n, m+d)`` array of terminal states to ``(n,)`` values.
    """
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    res = terminal_samples(model, x, t, n_paths, base_seed, dt, stream_offset, workers)
    term = res["terminal"]
    vals = np.full(term.shape[0], np.nan)
    ok = res["blown_step"] < 0
    vals[ok] = np.asarray(f(term[ok]), float)
    return summarize_terminal(vals, res["blown_step"])


def path_dump_rows(path: Path, m: int, stream_id: Optional[int] = None):
    for t, row in zip(path.grid.points(), path.states):
        yield ([stream_id] if stream_id is not None else []) + [float(t)] + [float(v) for v in row]
