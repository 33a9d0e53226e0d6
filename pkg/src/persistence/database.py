"""
Database-backed audit store.
"""

import json
import logging
from typing import Any, Dict, List

from sqlalchemy import Column, DateTime, Float, Integer, String, Text, create_engine, select
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import declarative_base, sessionmaker

from src.domain.clock import Clock, format_instant, parse_instant, utc_now
from src.domain.errors import AuditStorageError
from src.persistence.audit_store import AuditRecord, AuditStore

logger = logging.getLogger(__name__)

Base = declarative_base()


class AuditRecordModel(Base):
    """SQLAlchemy model for audit records."""
    __tablename__ = "audit_records"

    id = Column(Integer, primary_key=True, autoincrement=False)
    timestamp = Column(DateTime, nullable=False)
    kind = Column(String(32), nullable=False)
    session_id = Column(String(255), nullable=False, index=True)
    run_id = Column(Integer, nullable=False)
    datasource_id = Column(String(255), nullable=True)
    question_text = Column(Text, nullable=False)
    attempt_number = Column(Integer, nullable=True)
    sql_text = Column(Text, nullable=True)
    guardrail_decision = Column(String(32), nullable=True)
    refusal_reason = Column(Text, nullable=True)
    outcome_status = Column(String(32), nullable=True)
    error_message = Column(Text, nullable=True)
    row_count = Column(Integer, nullable=True)
    rating_score = Column(Float, nullable=True)
    rating_flags = Column(Text, nullable=True)  # JSON list
    final_status = Column(String(32), nullable=True, index=True)
    duration_ms = Column(Float, nullable=False, default=0.0)
    provider_calls = Column(Integer, nullable=False, default=0)
    executor_calls = Column(Integer, nullable=False, default=0)
    detail = Column(Text, nullable=True)

    def to_dict(self) -> Dict[str, Any]:
        """Convert model to the audit record document."""
        return {
            "record_id": self.id,
            "timestamp": format_instant(parse_instant(self.timestamp)),
            "kind": self.kind,
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
            "rating_flags": json.loads(self.rating_flags) if self.rating_flags else [],
            "final_status": self.final_status,
            "duration_ms": self.duration_ms,
            "provider_calls": self.provider_calls,
            "executor_calls": self.executor_calls,
            "detail": self.detail or "",
        }

    @classmethod
    def from_record(cls, record: AuditRecord) -> "AuditRecordModel":
        """Create model from an audit record."""
        return cls(
            id=record.record_id,
            timestamp=record.timestamp.replace(tzinfo=None),
            kind=record.kind.value,
            session_id=record.session_id,
            run_id=record.run_id,
            datasource_id=record.datasource_id,
            question_text=record.question_text,
            attempt_number=record.attempt_number,
            sql_text=record.sql_text,
            guardrail_decision=record.guardrail_decision,
            refusal_reason=record.refusal_reason,
            outcome_status=record.outcome_status,
            error_message=record.error_message,
            row_count=record.row_count,
            rating_score=record.rating_score,
            rating_flags=json.dumps(list(record.rating_flags)),
            final_status=record.final_status,
            duration_ms=record.duration_ms,
            provider_calls=record.provider_calls,
            executor_calls=record.executor_calls,
            detail=record.detail,
        )

    def to_record(self) -> AuditRecord:
        return AuditRecord.from_dict(self.to_dict())


class SqlAuditStore(AuditStore):
    """Audit store on any SQLAlchemy database (SQLite file, PostgreSQL)."""
    def __init__(self, database_url: str, clock: Clock = utc_now):
        super().__init__(clock)
        self.database_url = database_url
        try:
            self.engine = create_engine(database_url)
            Base.metadata.create_all(bind=self.engine)
        except SQLAlchemyError as e:
            raise AuditStorageError(f"cannot open audit database: {e}", {"url": database_url}) from e
        self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
        with self.SessionLocal() as session:
            last = session.execute(select(AuditRecordModel.id).order_by(AuditRecordModel.id.desc())).first()
        self._last_id = last[0] if last else 0
        logger.info(f"Audit database ready at {database_url} (last id {self._last_id})")

    def _next_id(self) -> int:
        return self._last_id + 1

    def _write(self, record: AuditRecord) -> None:
        try:
            with self.SessionLocal() as session:
                session.add(AuditRecordModel.from_record(record))
                session.commit()
        except SQLAlchemyError as e:
            logger.error(f"Audit insert failed: {e}", exc_info=True)
            raise AuditStorageError(f"cannot append audit record: {e}") from e
        self._last_id = record.record_id

    def records(self) -> List[AuditRecord]:
        with self.SessionLocal() as session:
            rows = session.execute(select(AuditRecordModel).order_by(AuditRecordModel.id)).scalars().all()
            return [row.to_record() for row in rows]

    def close(self) -> None:
        self.engine.dispose()
