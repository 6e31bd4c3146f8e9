"""Logical time for the promise manager.

Durations and expiry instants are integer time units. The service takes
any object with a now() returning int; tests drive a LogicalClock by hand
while deployments map wall time onto units (seconds by default).
"""

from __future__ import annotations

import time


class LogicalClock:
    def __init__(self, start: int = 0):
        self._now = start

    def now(self) -> int:
        return self._now

    def advance(self, by: int = 1) -> int:
        if by < 0:
            raise ValueError("time does not run backwards")
        self._now += by
        return self._now


class WallClock:
    """Monotonic wall time quantized to integer units."""

    def __init__(self, unit_seconds: float = 1.0):
        self.unit_seconds = unit_seconds
        self._t0 = time.monotonic()

    def now(self) -> int:
        return int((time.monotonic() - self._t0) / self.unit_seconds)
