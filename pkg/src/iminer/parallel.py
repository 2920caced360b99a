"""Worker-pool sizing and an order-preserving parallel map.

The pool width is capped by the ``IMINER_THREADS`` environment variable
(0 or unset = auto).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

__all__ = ["worker_count", "ordered_map"]


def worker_count() -> int:
    raw = os.environ.get("IMINER_THREADS", "0")
    try:
        requested = int(raw)
    except ValueError:
        raise ValueError(f"IMINER_THREADS must be an integer, got {raw!r}")
    if requested < 0:
        raise ValueError(f"IMINER_THREADS must be >= 0, got {requested}")
    if requested == 0:
        return min(os.cpu_count() or 1, 8)
    return requested


def ordered_map(fn: Callable[[T], R], items: Sequence[T] | Iterable[T]) -> list[R]:
    """Map preserving input order; runs threaded when the pool allows."""
    items = list(items)
    workers = min(worker_count(), max(len(items), 1))
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
