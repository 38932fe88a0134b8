"""Seed derivation and order-preserving parallel maps.

Every trajectory draws from its own stream derived from ``(seed, *keys)``, so
results never depend on how work is split across processes.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))


def _run_chunk(args):
    fn, items = args
    return [fn(x) for x in items]


def ordered_map(fn: Callable[..., T], items: Sequence, workers: int = 1, chunks_per_worker: int = 4) -> list[T]:
    """``[fn(x) for x in items]``, optionally spread over worker processes."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    n_chunks = min(len(items), workers * chunks_per_worker)
    bounds = np.linspace(0, len(items), n_chunks + 1).astype(int)
    parts = [(fn, items[a:b]) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    out: list[T] = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for chunk in pool.map(_run_chunk, parts):
            out.extend(chunk)
    return out
