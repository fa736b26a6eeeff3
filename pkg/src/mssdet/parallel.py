"""Thread-pool helpers.  The MSS_THREADS environment variable caps the
worker count; results are merged in input order so parallel execution
never changes values.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

__all__ = ["worker_count", "parallel_map"]


def worker_count() -> int:
    env = os.environ.get("MSS_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"MSS_THREADS must be an integer, got {env!r}") from None
    return min(4, os.cpu_count() or 1)


def parallel_map(fn, items):
    items = list(items)
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
