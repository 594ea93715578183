"""Chunked path-parallel execution with an order-stable reduction.

Stream ids are cut into fixed-size chunks independent of the worker count, and
chunk results are concatenated in stream-id order. A chunk's numbers therefore
never depend on how many workers ran, which keeps reports bit-identical.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

import numpy as np

DEFAULT_CHUNK = 1024

# Disjoint stream-id ranges per role, so estimators that must be independent
# never share noise.
STREAM_BLOCK = 1 << 40
ROLE_OFFSETS = {
    "direct_x": 0,
    "direct_y": 1 * STREAM_BLOCK,
    "coupled": 2 * STREAM_BLOCK,
    "psi": 3 * STREAM_BLOCK,
    "moments": 4 * STREAM_BLOCK,
    "misc": 5 * STREAM_BLOCK,
}


def chunk_ids(offset: int, n: int, chunk_size: int = DEFAULT_CHUNK) -> list[np.ndarray]:
    return [
        np.arange(offset + s, offset + min(s + chunk_size, n), dtype=np.uint64)
        for s in range(0, n, chunk_size)
    ]


def _call(args):
    fn, ids, kwargs = args
    return fn(ids, **kwargs)


def map_chunks(fn, offset: int, n: int, workers: int = 1, chunk_size: int = DEFAULT_CHUNK, **kwargs):
    """Run ``fn(ids, **kwargs)`` over chunks of stream ids and concatenate the dict results."""
    chunks = chunk_ids(offset, n, chunk_size)
    jobs = [(fn, ids, kwargs) for ids in chunks]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_call, jobs))
    else:
        parts = [_call(j) for j in jobs]
    return {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}
