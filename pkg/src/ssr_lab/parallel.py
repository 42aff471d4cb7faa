"""Deterministic block-parallel execution.

Work is cut into fixed-size blocks of path indices.  Blocks are dealt to
workers round-robin, results are stored by block index, and the reduction
tree depends only on the number of blocks, so any worker count yields
bit-identical sums.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")

WORKERS_ENV = "SSRLAB_WORKERS"


def resolve_workers(workers=None) -> int:
    """``None`` falls back to ``$SSRLAB_WORKERS`` then 1; ``"auto"`` means all cores."""
    if workers is None:
        workers = os.environ.get(WORKERS_ENV, "1")
    if isinstance(workers, str):
        if workers.strip().lower() == "auto":
            return os.cpu_count() or 1
        workers = int(workers)
    if workers < 1:
        raise ValueError(f"worker count must be >= 1, got {workers}")
    return int(workers)


def map_blocks(fn: Callable[[int], T], n_blocks: int, workers: int = 1) -> list[T]:
    """Evaluate ``fn(b)`` for every block index and return results in block order."""
    results: list = [None] * n_blocks
    if workers <= 1 or n_blocks <= 1:
        for b in range(n_blocks):
            results[b] = fn(b)
        return results

    errors: list[BaseException] = []

    def run(worker_id: int):
        try:
            for b in range(worker_id, n_blocks, workers):
                results[b] = fn(b)
        except BaseException as exc:  # re-raised in the caller thread
            errors.append(exc)

    threads = [threading.Thread(target=run, args=(w,)) for w in range(min(workers, n_blocks))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results


def tree_reduce(items: Sequence[T], combine: Callable[[T, T], T]) -> T:
    """Pairwise reduction with a shape fixed by ``len(items)``."""
    if not items:
        raise ValueError("nothing to reduce")
    level = list(items)
    while len(level) > 1:
        nxt = [combine(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]
