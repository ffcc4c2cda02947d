"""Deterministic accounting of auxiliary allocations.

Search and aggregation report the arrays they allocate beyond their inputs
and outputs. Peaks are computed from these records rather than from the
process allocator, so they are reproducible run to run.
"""
from __future__ import annotations

from contextlib import contextmanager


class MemoryMeter:
    """Running total and peak of tracked bytes."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> int:
        self.current += int(nbytes)
        self.peak = max(self.peak, self.current)
        return int(nbytes)

    def free(self, nbytes: int) -> None:
        self.current -= int(nbytes)

    @contextmanager
    def hold(self, *arrays_or_sizes):
        n = sum(a if isinstance(a, int) else a.nbytes for a in arrays_or_sizes)
        self.alloc(n)
        try:
            yield
        finally:
            self.free(n)

    def merge_concurrent(self, chunk_peaks, workers: int) -> None:
        """Fold per-chunk transient peaks in as if ``workers`` chunks ran at once.

        The bound uses the largest ``workers`` chunk peaks, so it does not
        depend on how the scheduler actually interleaved them.
        """
        top = sorted(chunk_peaks, reverse=True)[:max(1, workers)]
        self.peak = max(self.peak, self.current + sum(top))


class NullMeter(MemoryMeter):
    def alloc(self, nbytes: int) -> int:
        return int(nbytes)

    def free(self, nbytes: int) -> None:
        pass

    def merge_concurrent(self, chunk_peaks, workers: int) -> None:
        pass
