"""
Pipeline state machine and per-run context.
"""

import logging
import threading
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

from src.domain.constants import MAX_ATTEMPTS
from src.domain.errors import PreconditionViolation
from src.domain.models import AttemptTrace, FinalStatus
from src.orchestration.transcript import EventType, TranscriptRouter

logger = logging.getLogger(__name__)


class Phase(Enum):
    ROUTING = "routing"
    GENERATING = "generating"
    VALIDATING = "validating"
    EXECUTING = "executing"
    RATING = "rating"
    INTERPRETING = "interpreting"
    DONE = "done"


# Forward edges only; regeneration (validating/rating -> generating) goes
# through PipelineState.regenerate so it always consumes an attempt.
TRANSITIONS: Dict[Phase, Tuple[Phase, ...]] = {
    Phase.ROUTING: (Phase.GENERATING,),
    Phase.GENERATING: (Phase.VALIDATING,),
    Phase.VALIDATING: (Phase.EXECUTING, Phase.DONE),
    Phase.EXECUTING: (Phase.RATING,),
    Phase.RATING: (Phase.INTERPRETING, Phase.DONE),
    Phase.INTERPRETING: (Phase.DONE,),
    Phase.DONE: (),
}
REGENERATE_FROM = (Phase.VALIDATING, Phase.RATING)


class PipelineState:
    """
    Phase, attempt counter, traces and terminal status of one pipeline run.

    Illegal transitions raise PreconditionViolation; the terminal status is
    write-once.
    """
    def __init__(
        self,
        max_attempts: int = MAX_ATTEMPTS,
        on_transition: Optional[Callable[[Phase, Phase, int], None]] = None,
    ):
        self.phase = Phase.ROUTING
        self.attempt_number = 1
        self.max_attempts = max_attempts
        self.traces: List[AttemptTrace] = []
        self.terminal: Optional[FinalStatus] = None
        self.phase_history: List[Phase] = [Phase.ROUTING]
        self.on_transition = on_transition

    def _move(self, target: Phase) -> None:
        previous = self.phase
        self.phase = target
        self.phase_history.append(target)
        if self.on_transition:
            self.on_transition(previous, target, self.attempt_number)

    def advance(self, target: Phase) -> None:
        if target not in TRANSITIONS[self.phase]:
            raise PreconditionViolation(
                f"illegal phase transition {self.phase.value} -> {target.value}"
            )
        if target is Phase.DONE and self.terminal is None:
            raise PreconditionViolation("set the terminal status before finishing")
        self._move(target)

    @property
    def attempts_left(self) -> bool:
        return self.attempt_number < self.max_attempts

    def regenerate(self) -> None:
        """Start the next attempt; consumes one attempt."""
        if self.phase not in REGENERATE_FROM:
            raise PreconditionViolation(f"cannot regenerate from {self.phase.value}")
        if not self.attempts_left:
            raise PreconditionViolation(f"attempt budget of {self.max_attempts} is spent")
        self.attempt_number += 1
        self._move(Phase.GENERATING)

    def record(self, trace: AttemptTrace) -> None:
        if trace.attempt_number != self.attempt_number:
            raise PreconditionViolation(
                f"trace for attempt {trace.attempt_number} recorded during attempt {self.attempt_number}"
            )
        self.traces.append(trace)

    def finish(self, status: FinalStatus) -> None:
        if self.terminal is not None:
            raise PreconditionViolation(f"terminal status already set to {self.terminal.value}")
        self.terminal = status
        self.advance(Phase.DONE)


class RunContext:
    """
    Per-run bookkeeping shared by the agents of one pipeline.

    Provider and executor calls are published to the transcript and counted;
    the audit writer takes (and resets) the counts for each record so every
    call lands in exactly one audit record.
    """
    def __init__(self, run_id: int, session_id: str, router: TranscriptRouter):
        self.run_id = run_id
        self.session_id = session_id
        self.router = router
        self.attempt_number: Optional[int] = None
        self.provider_calls = 0
        self.executor_calls = 0
        self._lock = threading.Lock()

    def phase_changed(self, previous: Phase, target: Phase, attempt_number: int) -> None:
        self.attempt_number = attempt_number
        self.router.publish(EventType.PHASE, self.run_id, self.session_id, attempt_number,
                            previous=previous.value, phase=target.value)

    def provider_called(self, role: str, provider_id: str, truncated: bool = False) -> None:
        with self._lock:
            self.provider_calls += 1
        self.router.publish(EventType.PROVIDER_CALL, self.run_id, self.session_id,
                            self.attempt_number, role=role, provider_id=provider_id,
                            truncated=truncated)

    def executor_called(self, purpose: str, sql_text: str, status: str) -> None:
        with self._lock:
            self.executor_calls += 1
        self.router.publish(EventType.EXECUTOR_CALL, self.run_id, self.session_id,
                            self.attempt_number, purpose=purpose, sql_text=sql_text,
                            status=status)

    def take_counts(self) -> Tuple[int, int]:
        """Return (provider_calls, executor_calls) since the last call and reset them."""
        with self._lock:
            counts = (self.provider_calls, self.executor_calls)
            self.provider_calls = 0
            self.executor_calls = 0
            return counts
