"""Thread-pool fan-out for parameter sweeps."""

import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class SweepService:
    """Runs independent sweep points on a worker pool, keeping input order."""

    def __init__(self, max_workers: Optional[int] = None, on_done: Optional[Callable[[int], None]] = None):
        """Initialize the sweep service.

        Args:
            max_workers: Worker cap; None means os.cpu_count()
            on_done: Called with the number of finished items after each completion
        """
        self.max_workers = max(int(max_workers or os.cpu_count() or 1), 1)
        self.on_done = on_done
        self.completed = 0
        self._lock = threading.Lock()
        logger.debug(f"Sweep service with {self.max_workers} workers")

    def _finished(self):
        with self._lock:
            self.completed += 1
            done = self.completed
        if self.on_done:
            self.on_done(done)

    def map_ordered(self, fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
        """Apply fn to every item; results come back in input order.

        The first exception raised by any item propagates after all submitted work ends.
        """
        items = list(items)
        if self.max_workers == 1 or len(items) <= 1:
            results = []
            for item in items:
                results.append(fn(item))
                self._finished()
            return results

        def run(item):
            try:
                return fn(item)
            finally:
                self._finished()

        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            futures = [executor.submit(run, item) for item in items]
            return [future.result() for future in futures]

    def __call__(self, fn, items):
        return self.map_ordered(fn, items)
