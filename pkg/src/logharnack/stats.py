"""Sample means with standard errors, and the heavy-tail diagnostic."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class EstimateWithCI:
    value: float
    stderr: float
    n: int
    n_excluded: int = 0

    def interval(self, z: float = 4.0) -> tuple[float, float]:
        return self.value - z * self.stderr, self.value + z * self.stderr

    def within(self, target: float, z: float = 4.0) -> bool:
        return abs(self.value - target) <= z * self.stderr

    def to_dict(self) -> dict:
        return asdict(self)


def estimate(samples, n_excluded: int = 0) -> EstimateWithCI:
    s = np.asarray(samples, dtype=float).ravel()
    n = s.size
    if n == 0:
        return EstimateWithCI(math.nan, math.nan, 0, n_excluded)
    mean = float(np.mean(s))
    se = float(np.std(s, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return EstimateWithCI(mean, se, n, n_excluded)


def tail_share(samples, top: float = 0.01) -> float:
    """Fraction of the total carried by the largest ``top`` fraction of samples."""
    s = np.sort(np.abs(np.asarray(samples, dtype=float).ravel()))
    total = s.sum()
    if s.size == 0 or total == 0:
        return 0.0
    k = max(1, int(math.ceil(top * s.size)))
    return float(s[-k:].sum() / total)


def combined_stderr(*errs: float) -> float:
    return math.sqrt(sum(e * e for e in errs))
