"""
Transcript router: structured events emitted by running pipelines.

Every phase transition, provider call and executor call is published as a
``TranscriptEvent``. Subscribers receive events synchronously; the router
keeps a bounded history that tests and the replay harness read back.
"""

import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

from src.domain.clock import Clock, format_instant, utc_now
from src.domain.models import to_jsonable

logger = logging.getLogger(__name__)


class EventType(Enum):
    """Kinds of transcript events."""
    PHASE = "phase"
    PROVIDER_CALL = "provider_call"
    EXECUTOR_CALL = "executor_call"
    ROUTE = "route"
    TERMINAL = "terminal"


@dataclass(frozen=True)
class TranscriptEvent:
    sequence: int
    event_type: EventType
    run_id: int
    session_id: str
    timestamp: datetime
    attempt_number: Optional[int] = None
    payload: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sequence": self.sequence,
            "event_type": self.event_type.value,
            "run_id": self.run_id,
            "session_id": self.session_id,
            "timestamp": format_instant(self.timestamp),
            "attempt_number": self.attempt_number,
            "payload": to_jsonable(self.payload),
        }


class TranscriptRouter:
    """
    Publishes transcript events to subscribers and keeps a bounded history.
    """
    def __init__(self, clock: Clock = utc_now, max_history_size: int = 10000):
        self.clock = clock
        self.subscribers: Dict[str, List[Callable[[TranscriptEvent], None]]] = {}
        self.history: List[TranscriptEvent] = []
        self.max_history_size = max_history_size
        self._sequence = 0
        self._lock = threading.Lock()
        logger.info("TranscriptRouter initialized")

    def publish(
        self,
        event_type: EventType,
        run_id: int,
        session_id: str,
        attempt_number: Optional[int] = None,
        **payload: Any,
    ) -> TranscriptEvent:
        """
        Publish an event to every subscriber.

        Args:
            event_type: Kind of event
            run_id: Pipeline run the event belongs to
            session_id: Session of the question
            attempt_number: Attempt the event belongs to, if any
            payload: Event-specific fields

        Returns:
            The published event
        """
        with self._lock:
            self._sequence += 1
            event = TranscriptEvent(self._sequence, event_type, run_id, session_id,
                                    self.clock(), attempt_number, dict(payload))
            self.history.append(event)
            if len(self.history) > self.max_history_size:
                self.history.pop(0)
            callbacks = [cb for subscriber in self.subscribers.values() for cb in subscriber]

        for callback in callbacks:
            try:
                callback(event)
            except Exception as e:
                logger.error(f"Error delivering transcript event {event.sequence}: {e}", exc_info=True)
        logger.debug(f"Event {event.sequence} {event_type.value} published for run {run_id}")
        return event

    def subscribe(self, subscriber_id: str, callback: Callable[[TranscriptEvent], None]) -> None:
        with self._lock:
            self.subscribers.setdefault(subscriber_id, []).append(callback)
        logger.info(f"Transcript subscriber {subscriber_id} registered")

    def unsubscribe(self, subscriber_id: str) -> None:
        with self._lock:
            self.subscribers.pop(subscriber_id, None)
        logger.info(f"Transcript subscriber {subscriber_id} unsubscribed")

    def get_history(self, limit: Optional[int] = None) -> List[TranscriptEvent]:
        with self._lock:
            if limit:
                return self.history[-limit:]
            return list(self.history)

    def events_for_run(self, run_id: int) -> List[TranscriptEvent]:
        with self._lock:
            return [e for e in self.history if e.run_id == run_id]

    def call_counts(self, run_id: int) -> Dict[str, int]:
        """Provider calls per role plus executor calls for one run."""
        counts: Dict[str, int] = {"executor_call": 0, "provider_call": 0}
        for event in self.events_for_run(run_id):
            if event.event_type is EventType.EXECUTOR_CALL:
                counts["executor_call"] += 1
            elif event.event_type is EventType.PROVIDER_CALL:
                counts["provider_call"] += 1
                role = event.payload.get("role", "unknown")
                counts[role] = counts.get(role, 0) + 1
        return counts
