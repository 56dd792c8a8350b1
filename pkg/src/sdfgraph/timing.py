"""Wall-time accounting per pipeline stage."""

import time
from collections import defaultdict
from contextlib import contextmanager

CATEGORIES = ("io", "integration", "esdf", "isosurface", "overlap", "optimization", "fusion",
              "export")


class Timings:
    def __init__(self):
        self.totals = defaultdict(float)
        self.counts = defaultdict(int)
        self._start = time.perf_counter()

    @contextmanager
    def __call__(self, category):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[category] += time.perf_counter() - t0
            self.counts[category] += 1

    def add(self, category, seconds):
        self.totals[category] += seconds
        self.counts[category] += 1

    def elapsed(self):
        return time.perf_counter() - self._start

    def report(self, total=None):
        total = self.elapsed() if total is None else total
        cats = {k: {"seconds": round(v, 6), "calls": self.counts[k]}
                for k, v in sorted(self.totals.items())}
        covered = sum(self.totals.values())
        return {"total_seconds": round(total, 6), "categories": cats,
                "covered_fraction": round(covered / total, 6) if total > 0 else 1.0}


class NullTimings(Timings):
    @contextmanager
    def __call__(self, category):
        yield
