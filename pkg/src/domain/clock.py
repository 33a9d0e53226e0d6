"""
UTC clocks. Everything time-dependent takes a clock so runs can be replayed.
"""

import threading
from datetime import datetime, timedelta, timezone
from typing import Callable, Union

Clock = Callable[[], datetime]


def utc_now() -> datetime:
    """Return the current instant as an aware UTC datetime."""
    return datetime.now(timezone.utc)


def parse_instant(value: Union[str, datetime]) -> datetime:
    """Parse an ISO-8601 instant; naive values are taken as UTC."""
    if isinstance(value, datetime):
        instant = value
    else:
        text = value.strip()
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        instant = datetime.fromisoformat(text)
    if instant.tzinfo is None:
        instant = instant.replace(tzinfo=timezone.utc)
    return instant.astimezone(timezone.utc)


def format_instant(instant: datetime) -> str:
    """Render an instant as ``YYYY-MM-DDTHH:MM:SSZ`` (microseconds kept when present)."""
    instant = instant.astimezone(timezone.utc)
    if instant.microsecond:
        return instant.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return instant.strftime("%Y-%m-%dT%H:%M:%SZ")


class ManualClock:
    """
    A settable clock for tests, replays and scheduled-report simulations.

    Calling the instance returns the current simulated instant. ``sleep``
    advances time instead of blocking, so it can stand in for ``time.sleep``.
    """

    def __init__(self, start: Union[str, datetime] = "2025-04-17T12:00:00Z"):
        self._now = parse_instant(start)
        self._lock = threading.Lock()

    def __call__(self) -> datetime:
        with self._lock:
            return self._now

    def advance(self, seconds: float = 0.0, **kwargs) -> datetime:
        with self._lock:
            self._now = self._now + timedelta(seconds=seconds, **kwargs)
            return self._now

    def set(self, instant: Union[str, datetime]) -> None:
        with self._lock:
            self._now = parse_instant(instant)

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self.advance(seconds)
