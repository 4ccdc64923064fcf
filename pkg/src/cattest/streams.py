"""Seeded random substreams and schedule-independent chunked execution.

Every Monte Carlo iteration draws from its own generator keyed by
``(seed, stream, index)``, and work is split into chunks of a fixed size,
so results do not depend on the number of threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

import numpy as np

GENERATOR = f"numpy-{np.__version__}/PCG64/SeedSequence(seed,spawn_key=(stream,index))"

PERMUTATION = 1
BOOTSTRAP = 2
SIMULATION = 3

CHUNK = 32

T = TypeVar("T")


def substream(seed: int, stream: int, *index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(stream, *index))))


def run_chunked(n: int, fn: Callable[[int, int], T], threads: int = 1, chunk: int = CHUNK) -> list[T]:
    """Call ``fn(start, stop)`` over fixed-size chunks of ``range(n)``; results in chunk order."""
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(min(threads, len(bounds))) as pool:
            return list(pool.map(lambda b: fn(*b), bounds))
    return [fn(*b) for b in bounds]
