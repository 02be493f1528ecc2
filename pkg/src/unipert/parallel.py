"""Ordered worker-pool map.

UNIPERT_WORKERS (the only env knob besides the backend flag) sets the pool
size; 1 means serial. Results always come back in submission order, so
parallel schedules cannot change any reduction.
"""

import os
from concurrent.futures import ProcessPoolExecutor

ENV_VAR = "UNIPERT_WORKERS"


def worker_count() -> int:
    raw = os.environ.get(ENV_VAR, "1").strip()
    count = int(raw) if raw else 1
    return max(count, 1)


def pmap(fn, items):
    items = list(items)
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
