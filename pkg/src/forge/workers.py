"""Process-level parallelism for independent jobs, capped by FORGE_THREADS.

Results come back in submission order and each job seeds its own RNG
streams, so output does not depend on the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

from .numerics import ConfigError


def worker_count() -> int:
    cap = os.environ.get("FORGE_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            value = int(cap)
        except ValueError:
            raise ConfigError(f"FORGE_THREADS must be a positive integer, got {cap!r}") from None
        if value < 1:
            raise ConfigError(f"FORGE_THREADS must be a positive integer, got {cap!r}")
        n = min(n, value)
    return n


def pmap(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    """Ordered map, in worker processes when more than one is allowed."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))
