"""Bounded worker pools; ``CDRN_THREADS`` caps the number of threads."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "CDRN_THREADS"


def worker_count(default: int = 4) -> int:
    raw = os.environ.get(ENV_VAR)
    if raw is None or raw.strip() == "":
        return max(1, min(default, os.cpu_count() or 1))
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {n}")
    return n


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: int = None) -> List[R]:
    """Map ``fn`` over ``items`` on a thread pool; results keep input order."""
    items = list(items)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
