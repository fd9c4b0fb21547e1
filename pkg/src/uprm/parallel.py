"""Thread-pool map with deterministic output order.

Thread count is capped by the UPRM_THREADS environment variable and
defaults to the machine's available parallelism. Results are returned in
input order no matter how the pool schedules the work, so parallel and
serial runs produce identical artifacts.
"""

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import ConfigError


def thread_count() -> int:
    raw = os.environ.get("UPRM_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"UPRM_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"UPRM_THREADS must be >= 1, got {n}")
    return n


def ordered_map(fn, items):
    """Apply fn to each item, in parallel if UPRM_THREADS > 1.

    Output order matches input order.
    """
    items = list(items)
    n = thread_count()
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
