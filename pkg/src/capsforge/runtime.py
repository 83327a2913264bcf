"""Worker-pool sizing and order-preserving parallel map."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

THREADS_ENV = "CAPSFORGE_THREADS"


def worker_count(requested: int | None = None) -> int:
    """Explicit request, else ``$CAPSFORGE_THREADS``, else the CPU count."""
    if requested is None:
        env = os.environ.get(THREADS_ENV, "").strip()
        if env:
            try:
                requested = int(env)
            except ValueError:
                raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        else:
            requested = os.cpu_count() or 1
    if requested < 1:
        raise ValueError(f"worker count must be positive, got {requested}")
    return requested


def parallel_map(fn, items, workers: int | None = None) -> list:
    """``[fn(x) for x in items]``; results keep input order whatever the pool size."""
    items = list(items)
    n = worker_count(workers)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# One id per purpose so no two consumers of the global seed share a stream.
SUBSTREAMS = {"subject": 0, "image": 1, "shuffle": 2, "dropout": 3, "svm": 4, "augment": 5, "split": 6, "pairing": 7}


def substream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Generator for ``purpose`` (and optional integer keys) derived from the global seed."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng([int(seed), SUBSTREAMS[purpose], *(int(k) for k in keys)])
