"""Thread-count plumbing for per-slice work.

Results are always gathered in submission order so that output never
depends on the number of workers.
"""

import os
from concurrent.futures import ThreadPoolExecutor

_threads = None


def set_threads(n):
    global _threads
    if n is not None and int(n) < 1:
        raise ValueError("thread count must be >= 1")
    _threads = None if n is None else int(n)


def get_threads():
    if _threads is not None:
        return _threads
    env = os.environ.get("SERIREG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def pmap(fn, items, threads=None):
    """Ordered parallel map over `items`."""
    items = list(items)
    n = threads or get_threads()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
