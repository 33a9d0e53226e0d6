"""
Append-only audit trail.

Every question produces a route record, one record per attempt, one per
value introspection and a terminal record. Records are never updated or
deleted; ids increase by exactly one per append.
"""

import json
import logging
import os
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from src.domain.clock import Clock, format_instant, parse_instant, utc_now
from src.domain.errors import AuditStorageError

logger = logging.getLogger(__name__)


class RecordKind(Enum):
    ROUTE = "route"
    ATTEMPT = "attempt"
    INTROSPECTION = "introspection"
    TERMINAL = "terminal"


@dataclass(frozen=True)
class AuditRecord:
    """
    One audit entry.

    ``record_id`` and ``timestamp`` are assigned by the store on append.
    ``provider_calls`` and ``executor_calls`` count the calls made since
    the previous record of the same run.
    """
    kind: RecordKind
    session_id: str
    question_text: str
    record_id: int = 0
    timestamp: Optional[datetime] = None
    run_id: int = 0
    datasource_id: Optional[str] = None
    attempt_number: Optional[int] = None
    sql_text: Optional[str] = None
    guardrail_decision: Optional[str] = None
    refusal_reason: Optional[str] = None
    outcome_status: Optional[str] = None
    error_message: Optional[str] = None
    row_count: Optional[int] = None
    rating_score: Optional[float] = None
    rating_flags: List[str] = field(default_factory=list)
    final_status: Optional[str] = None
    duration_ms: float = 0.0
    provider_calls: int = 0
    executor_calls: int = 0
    detail: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "record_id": self.record_id,
            "timestamp": format_instant(self.timestamp) if self.timestamp else None,
            "kind": self.kind.value,
            "session_id": self.session_id,
            "run_id": self.run_id,
            "datasource_id": self.datasource_id,
            "question_text": self.question_text,
            "attempt_number": self.attempt_number,
            "sql_text": self.sql_text,
            "guardrail_decision": self.guardrail_decision,
            "refusal_reason": self.refusal_reason,
            "outcome_status": self.outcome_status,
            "error_message": self.error_message,
            "row_count": self.row_count,
            "rating_score": self.rating_score,
            "rating_flags": list(self.rating_flags),
            "final_status": self.final_status,
            "duration_ms": self.duration_ms,
            "provider_calls": self.provider_calls,
            "executor_calls": self.executor_calls,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AuditRecord":
        return cls(
            kind=RecordKind(data["kind"]),
            session_id=data.get("session_id", ""),
            question_text=data.get("question_text", ""),
            record_id=int(data.get("record_id", 0)),
            timestamp=parse_instant(data["timestamp"]) if data.get("timestamp") else None,
            run_id=int(data.get("run_id", 0)),
            datasource_id=data.get("datasource_id"),
            attempt_number=data.get("attempt_number"),
            sql_text=data.get("sql_text"),
            guardrail_decision=data.get("guardrail_decision"),
            refusal_reason=data.get("refusal_reason"),
            outcome_status=data.get("outcome_status"),
            error_message=data.get("error_message"),
            row_count=data.get("row_count"),
            rating_score=data.get("rating_score"),
            rating_flags=list(data.get("rating_flags") or []),
            final_status=data.get("final_status"),
            duration_ms=float(data.get("duration_ms") or 0.0),
            provider_calls=int(data.get("provider_calls") or 0),
            executor_calls=int(data.get("executor_calls") or 0),
            detail=data.get("detail") or "",
        )


@dataclass(frozen=True)
class AuditFilter:
    session_id: Optional[str] = None
    since: Optional[datetime] = None
    until: Optional[datetime] = None
    final_status: Optional[str] = None
    kind: Optional[str] = None

    def matches(self, record: AuditRecord) -> bool:
        if self.session_id is not None and record.session_id != self.session_id:
            return False
        if self.final_status is not None and record.final_status != self.final_status:
            return False
        if self.kind is not None and record.kind.value != self.kind:
            return False
        if self.since is not None and (record.timestamp is None or record.timestamp < parse_instant(self.since)):
            return False
        if self.until is not None and (record.timestamp is None or record.timestamp > parse_instant(self.until)):
            return False
        return True


class AuditStore(ABC):
    """Interface shared by the journal and database stores."""
    def __init__(self, clock: Clock = utc_now):
        self.clock = clock
        self._lock = threading.Lock()

    @abstractmethod
    def _write(self, record: AuditRecord) -> None:
        pass

    @abstractmethod
    def _next_id(self) -> int:
        pass

    @abstractmethod
    def records(self) -> List[AuditRecord]:
        """Snapshot of every record in ascending id order."""
        pass

    def append(self, record: AuditRecord) -> AuditRecord:
        """
        Append a record durably.

        Args:
            record: The record; its id and timestamp are assigned here

        Returns:
            The stored record

        Raises:
            AuditStorageError: when the record could not be persisted
        """
        with self._lock:
            stored = replace(record, record_id=self._next_id(), timestamp=self.clock())
            self._write(stored)
        logger.debug(f"Audit record {stored.record_id} ({stored.kind.value}) appended")
        return stored

    def query(self, audit_filter: Optional[AuditFilter] = None) -> List[AuditRecord]:
        audit_filter = audit_filter or AuditFilter()
        return [r for r in self.records() if audit_filter.matches(r)]

    def close(self) -> None:
        pass


class JournalAuditStore(AuditStore):
    """
    JSON-lines journal plus an in-memory index.

    ``path=None`` keeps the records in memory only. Reopening an existing
    journal resumes ids after its last record.
    """
    def __init__(self, path: Optional[Union[str, Path]] = None, clock: Clock = utc_now):
        super().__init__(clock)
        self.path = Path(path) if path is not None else None
        self._records: List[AuditRecord] = []
        if self.path is not None:
            self._load()

    def _load(self) -> None:
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            return
        try:
            with open(self.path, "r", encoding="utf-8") as handle:
                for line_number, line in enumerate(handle, start=1):
                    if not line.strip():
                        continue
                    record = AuditRecord.from_dict(json.loads(line))
                    expected = len(self._records) + 1
                    if record.record_id != expected:
                        raise AuditStorageError(
                            f"audit journal {self.path} line {line_number}: expected id {expected}, "
                            f"found {record.record_id}",
                            {"path": str(self.path)},
                        )
                    self._records.append(record)
        except (OSError, ValueError, KeyError) as e:
            raise AuditStorageError(f"cannot read audit journal {self.path}: {e}",
                                    {"path": str(self.path)}) from e
        logger.info(f"Loaded {len(self._records)} audit records from {self.path}")

    def _next_id(self) -> int:
        return len(self._records) + 1

    def _write(self, record: AuditRecord) -> None:
        if self.path is not None:
            line = json.dumps(record.to_dict(), sort_keys=True, ensure_ascii=False)
            try:
                with open(self.path, "a", encoding="utf-8") as handle:
                    handle.write(line + "\n")
                    handle.flush()
                    os.fsync(handle.fileno())
            except OSError as e:
                logger.error(f"Audit append to {self.path} failed: {e}", exc_info=True)
                raise AuditStorageError(f"cannot append to audit journal {self.path}: {e}",
                                        {"path": str(self.path)}) from e
        self._records.append(record)

    def records(self) -> List[AuditRecord]:
        with self._lock:
            return list(self._records)


def query_audit(
    store: AuditStore,
    session_id: Optional[str] = None,
    since: Optional[datetime] = None,
    until: Optional[datetime] = None,
    final_status: Optional[str] = None,
    kind: Optional[str] = None,
) -> List[AuditRecord]:
    """Records matching every given filter, ascending record_id."""
    return store.query(AuditFilter(session_id, since, until, final_status, kind))


def build_audit_store(backend: str, journal_path: Optional[str] = None,
                      database_url: Optional[str] = None, clock: Clock = utc_now) -> AuditStore:
    if backend == "database":
        from src.persistence.database import SqlAuditStore

        return SqlAuditStore(database_url, clock=clock)
    return JournalAuditStore(journal_path, clock=clock)
