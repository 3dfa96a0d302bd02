"""Thread-parallel loop execution with a shared dynamic work list.

Work items are integers ``0..n-1``.  Idle workers grab the next ``chunking``
items from a shared counter, so uneven items balance themselves out.
:meth:`ParallelExecutor.run` returns only after every item has finished,
which is the per-layer barrier the forward pass relies on.
"""

from __future__ import annotations

import itertools
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from ..errors import ConfigError

CONV_ALGOS = ("direct", "im2col_gemm", "sparse_csr")


def default_threads() -> int:
    """Thread count from ``DLIS_THREADS``, falling back to 1."""
    raw = os.environ.get("DLIS_THREADS")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DLIS_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("DLIS_THREADS must be >= 1")
    return n


@dataclass(frozen=True)
class ExecConfig:
    """How a forward pass is executed.

    ``chunking`` is the number of work items a worker takes per grab and
    ``band_rows`` the number of output rows in one GEMM work item.  Neither
    affects the numerical result.
    """

    threads: int = 1
    conv_algo: str = "direct"
    chunking: int = 1
    band_rows: int = 16

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.conv_algo not in CONV_ALGOS:
            raise ConfigError(f"conv_algo must be one of {CONV_ALGOS}, got {self.conv_algo!r}")
        if self.chunking < 1 or self.band_rows < 1:
            raise ConfigError("chunking and band_rows must be >= 1")

    @classmethod
    def from_env(cls, **kwargs) -> "ExecConfig":
        kwargs.setdefault("threads", default_threads())
        return cls(**kwargs)


class ExecutionTrace:
    """Thread-safe log of ``(seq, event, tag, item)`` tuples for ordering checks."""

    def __init__(self):
        self._lock = threading.Lock()
        self._seq = itertools.count()
        self.events = []

    def record(self, event, tag, item):
        with self._lock:
            self.events.append((next(self._seq), event, tag, item))

    def span(self, tag):
        """``(first start seq, last end seq)`` of all items carrying ``tag``."""
        starts = [s for s, e, t, _ in self.events if t == tag and e == "start"]
        ends = [s for s, e, t, _ in self.events if t == tag and e == "end"]
        return min(starts), max(ends)

    def tags(self):
        seen = []
        for _, _, tag, _ in self.events:
            if tag not in seen:
                seen.append(tag)
        return seen


class ParallelExecutor:
    def __init__(self, threads=1, chunking=1, trace=None):
        if threads < 1 or chunking < 1:
            raise ConfigError("threads and chunking must be >= 1")
        self.threads = threads
        self.chunking = chunking
        self.trace = trace
        self._pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    @classmethod
    def from_config(cls, cfg: ExecConfig, trace=None) -> "ParallelExecutor":
        return cls(cfg.threads, cfg.chunking, trace)

    def run(self, n_items, fn, tag=None):
        """Call ``fn(i)`` for every ``i < n_items``; block until all are done."""
        if n_items <= 0:
            return
        trace = self.trace
        call = fn
        if trace is not None:
            def call(i):
                trace.record("start", tag, i)
                fn(i)
                trace.record("end", tag, i)

        if self._pool is None or n_items == 1:
            for i in range(n_items):
                call(i)
            return

        lock = threading.Lock()
        cursor = [0]
        chunk = self.chunking

        def worker():
            while True:
                with lock:
                    start = cursor[0]
                    if start >= n_items:
                        return
                    cursor[0] = start + chunk
                for i in range(start, min(start + chunk, n_items)):
                    call(i)

        futures = [self._pool.submit(worker) for _ in range(min(self.threads, n_items))]
        for f in futures:
            f.result()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


SERIAL = ParallelExecutor(1)
