"""Background maintenance: periodic expiry sweeps and master-sync triggers.

The protocol design leans on two recurring jobs: expired validity
windows must actually disappear from the registry, and master terminals
must periodically reconcile their local caches with the stores. The
daemon here drives both on one interval. Ticks use wall-clock sleeps
while the *decision* about what is expired comes from the server's own
clock, so tests can drive expiry with a virtual clock and a fast tick.
"""
from __future__ import annotations

import logging
import threading
from typing import Callable

from .als.service import AggregationLoginServer
from .errors import InvalidInput

log = logging.getLogger("nusa.sweep")


class SweepDaemon:
    def __init__(
        self,
        als: AggregationLoginServer,
        interval: float,
        *,
        sync_hooks: list[Callable[[], object]] | None = None,
    ):
        if interval <= 0:
            raise InvalidInput("sweep interval must be positive seconds")
        self.als = als
        self.interval = float(interval)
        self.sync_hooks = list(sync_hooks or [])
        self.ticks = 0
        self.removed_total = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> "SweepDaemon":
        if self._thread is not None:
            raise InvalidInput("sweep daemon already started")
        self._thread = threading.Thread(target=self._loop, name="nusa-sweep", daemon=True)
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.wait(self.interval):
            self.tick()

    def tick(self) -> int:
        """One sweep pass plus the registered sync triggers."""
        removed = self.als.sweep_expired()
        self.ticks += 1
        self.removed_total += removed
        log.info("sweep tick %d at %.3f: %d expired grants removed", self.ticks, self.als.now(), removed)
        for hook in self.sync_hooks:
            try:
                hook()
            except Exception:
                log.exception("sync hook failed")
        return removed

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=self.interval + 5)
            self._thread = None
