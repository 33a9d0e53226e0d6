"""
Immutable value objects shared by every stage of the query pipeline.

All types are frozen dataclasses validated on construction, so a value that
exists satisfies its invariants and can be shared between concurrent
pipelines without synchronization.
"""

import logging
from dataclasses import dataclass, field, replace
from datetime import date, datetime
from decimal import Decimal
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from src.domain.clock import format_instant, parse_instant, utc_now
from src.domain.constants import MAX_ATTEMPTS
from src.domain.errors import PreconditionViolation

logger = logging.getLogger(__name__)


class DataKind(Enum):
    """Coarse column type used for prompts and heuristics."""
    INTEGER = "integer"
    DECIMAL = "decimal"
    TEXT = "text"
    TIMESTAMP = "timestamp"
    BOOLEAN = "boolean"
    OTHER = "other"


class Classification(Enum):
    """Parse classification of a candidate statement."""
    SINGLE_SELECT = "single_select"
    WRITE = "write"
    DDL = "ddl"
    MULTI_STATEMENT = "multi_statement"
    LOCKING_SELECT = "locking_select"
    UNPARSEABLE = "unparseable"
    OTHER = "other"


class Decision(Enum):
    ALLOWED = "allowed"
    REFUSED = "refused"


class RefusalReason(Enum):
    """Guardrail refusal reasons, listed in enforcement precedence order."""
    TOO_LONG = "too_long"
    UNPARSEABLE = "unparseable"
    MULTI_STATEMENT = "multi_statement"
    WRITE_DETECTED = "write_detected"
    DDL_DETECTED = "ddl_detected"
    NOT_SELECT = "not_select"
    LOCKING_CLAUSE = "locking_clause"
    DENIED_FUNCTION = "denied_function"
    UNAUTHORIZED_COLUMN = "unauthorized_column"


class OutcomeStatus(Enum):
    ROWS = "rows"
    EMPTY = "empty"
    ERROR = "error"
    TRUNCATED = "truncated"


class ErrorReason(Enum):
    TIMEOUT = "timeout"
    QUERY_ERROR = "query_error"


class Verdict(Enum):
    ACCEPT = "accept"
    REGENERATE = "regenerate"


class RatingFlag(Enum):
    EMPTY_RESULT = "empty_result"
    EXECUTION_ERROR = "execution_error"
    FUTURE_DATES_PRESENT = "future_dates_present"
    UNIT_MISMATCH = "unit_mismatch"
    EXACT_MATCH_ZERO_ROWS = "exact_match_zero_rows"
    SUSPICIOUS_AGGREGATE_TRUNCATION = "suspicious_aggregate_truncation"
    LOW_LLM_SCORE = "low_llm_score"


SANITY_FLAGS = frozenset({
    RatingFlag.FUTURE_DATES_PRESENT,
    RatingFlag.UNIT_MISMATCH,
    RatingFlag.EXACT_MATCH_ZERO_ROWS,
    RatingFlag.SUSPICIOUS_AGGREGATE_TRUNCATION,
})


class FinalStatus(Enum):
    ANSWERED = "answered"
    REFUSED = "refused"
    EXHAUSTED = "exhausted"


class Verbosity(Enum):
    CONCISE = "concise"
    DETAILED = "detailed"


def to_jsonable(value: Any) -> Any:
    """Convert domain values and database cells into JSON-safe values."""
    if value is None or isinstance(value, (bool, int, str)):
        return value
    if isinstance(value, float):
        return value
    if isinstance(value, Decimal):
        return float(value)
    if isinstance(value, datetime):
        if value.tzinfo is None:
            return value.isoformat(sep=" ")
        return format_instant(value)
    if isinstance(value, date):
        return value.isoformat()
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (bytes, bytearray, memoryview)):
        return bytes(value).hex()
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, (set, frozenset)):
        return sorted(to_jsonable(v) for v in value)
    return str(value)


def qualify(table: str, column: str) -> str:
    """Return the lowercase fully-qualified ``table.column`` name."""
    return f"{table.lower()}.{column.lower()}"


@dataclass(frozen=True)
class Question:
    """A natural-language question addressed to one datasource."""
    text: str
    datasource_id: str
    asked_at: datetime = field(default_factory=utc_now)
    session_id: str = "default"

    def __post_init__(self):
        text = (self.text or "").strip()
        if not text:
            raise PreconditionViolation("question text must be non-empty")
        object.__setattr__(self, "text", text)
        object.__setattr__(self, "asked_at", parse_instant(self.asked_at))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "text": self.text,
            "datasource_id": self.datasource_id,
            "asked_at": format_instant(self.asked_at),
            "session_id": self.session_id,
        }


@dataclass(frozen=True)
class ColumnMeta:
    name: str
    data_kind: DataKind
    nullable: bool = True
    unit_hint: Optional[str] = None
    sampled_values: Optional[Tuple[Any, ...]] = None
    description: Optional[str] = None

    def __post_init__(self):
        if self.sampled_values is not None:
            values = tuple(self.sampled_values)
            if len(set(values)) != len(values):
                raise PreconditionViolation(f"sampled values of {self.name} must be distinct")
            object.__setattr__(self, "sampled_values", values)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "data_kind": self.data_kind.value,
            "nullable": self.nullable,
            "unit_hint": self.unit_hint,
            "sampled_values": to_jsonable(self.sampled_values),
            "description": self.description,
        }


@dataclass(frozen=True)
class TableMeta:
    name: str
    columns: Tuple[ColumnMeta, ...]
    row_count_estimate: Optional[int] = None
    description: Optional[str] = None

    def __post_init__(self):
        columns = tuple(self.columns)
        names = [c.name.lower() for c in columns]
        if len(set(names)) != len(names):
            raise PreconditionViolation(f"column names must be unique within table {self.name}")
        if self.row_count_estimate is not None and self.row_count_estimate < 0:
            raise PreconditionViolation(f"row count of {self.name} must be non-negative")
        object.__setattr__(self, "columns", columns)

    def column(self, name: str) -> Optional[ColumnMeta]:
        lowered = name.lower()
        for column in self.columns:
            if column.name.lower() == lowered:
                return column
        return None

    def column_names(self) -> List[str]:
        return [c.name for c in self.columns]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "columns": [c.to_dict() for c in self.columns],
            "row_count_estimate": self.row_count_estimate,
            "description": self.description,
        }


@dataclass(frozen=True)
class ForeignKey:
    table: str
    column: str
    ref_table: str
    ref_column: str

    def render(self) -> str:
        return f"{self.table}.{self.column} → {self.ref_table}.{self.ref_column}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "table": self.table,
            "column": self.column,
            "ref_table": self.ref_table,
            "ref_column": self.ref_column,
        }


@dataclass(frozen=True)
class SchemaCatalog:
    """
    Point-in-time snapshot of a datasource schema plus its column deny-list.

    The catalog is immutable: value introspection and annotation produce
    new catalogs through the ``with_*`` helpers.
    """
    datasource_id: str
    tables: Tuple[TableMeta, ...] = ()
    foreign_keys: Tuple[ForeignKey, ...] = ()
    denied_columns: FrozenSet[str] = frozenset()
    snapshot_at: datetime = field(default_factory=utc_now)

    def __post_init__(self):
        tables = tuple(self.tables)
        names = [t.name.lower() for t in tables]
        if len(set(names)) != len(names):
            raise PreconditionViolation("table names must be unique within a catalog")
        object.__setattr__(self, "tables", tables)
        object.__setattr__(self, "foreign_keys", tuple(self.foreign_keys))
        object.__setattr__(self, "denied_columns", frozenset(c.lower() for c in self.denied_columns))
        object.__setattr__(self, "snapshot_at", parse_instant(self.snapshot_at))

        for fk in self.foreign_keys:
            for table, column in ((fk.table, fk.column), (fk.ref_table, fk.ref_column)):
                if self.column(table, column) is None:
                    raise PreconditionViolation(
                        f"foreign key endpoint {table}.{column} does not exist"
                    )
        for denied in self.denied_columns:
            table, _, column = denied.partition(".")
            if not column or self.column(table, column) is None:
                raise PreconditionViolation(f"denied column {denied} does not exist")

    def table(self, name: str) -> Optional[TableMeta]:
        lowered = name.lower()
        for table in self.tables:
            if table.name.lower() == lowered:
                return table
        return None

    def column(self, table: str, column: str) -> Optional[ColumnMeta]:
        meta = self.table(table)
        return meta.column(column) if meta else None

    def table_names(self) -> List[str]:
        return [t.name for t in self.tables]

    def with_table(self, table: TableMeta) -> "SchemaCatalog":
        tables = tuple(table if t.name.lower() == table.name.lower() else t for t in self.tables)
        return replace(self, tables=tables)

    def with_column(self, table: str, column: ColumnMeta) -> "SchemaCatalog":
        meta = self.table(table)
        if meta is None:
            raise PreconditionViolation(f"table {table} does not exist")
        columns = tuple(
            column if c.name.lower() == column.name.lower() else c for c in meta.columns
        )
        return self.with_table(replace(meta, columns=columns))

    def with_denied_columns(self, denied: Iterable[str]) -> "SchemaCatalog":
        return replace(self, denied_columns=frozenset(d.lower() for d in denied))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "datasource_id": self.datasource_id,
            "tables": [t.to_dict() for t in self.tables],
            "foreign_keys": [fk.to_dict() for fk in self.foreign_keys],
            "denied_columns": sorted(self.denied_columns),
            "snapshot_at": format_instant(self.snapshot_at),
        }


@dataclass(frozen=True)
class SqlCandidate:
    """One generated statement together with its parse classification."""
    sql_text: str
    attempt_number: int
    classification: Classification
    referenced_columns: Optional[FrozenSet[str]] = None
    referenced_tables: FrozenSet[str] = frozenset()
    referenced_functions: FrozenSet[str] = frozenset()
    uses_ctes: bool = False
    uses_set_operations: bool = False
    parse_detail: str = ""

    def __post_init__(self):
        if not 1 <= self.attempt_number <= MAX_ATTEMPTS:
            raise PreconditionViolation(
                f"attempt_number must lie in [1, {MAX_ATTEMPTS}] (got {self.attempt_number})"
            )
        if self.classification is Classification.SINGLE_SELECT and self.referenced_columns is None:
            raise PreconditionViolation("single_select candidates must list referenced columns")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sql_text": self.sql_text,
            "attempt_number": self.attempt_number,
            "classification": self.classification.value,
            "referenced_columns": (
                sorted(self.referenced_columns) if self.referenced_columns is not None else None
            ),
            "referenced_tables": sorted(self.referenced_tables),
        }


@dataclass(frozen=True)
class GuardrailVerdict:
    decision: Decision
    refusal_reason: Optional[RefusalReason] = None
    offending: Tuple[str, ...] = ()
    detail: str = ""
    referenced_columns: Optional[FrozenSet[str]] = None

    def __post_init__(self):
        if self.decision is Decision.ALLOWED and self.refusal_reason is not None:
            raise PreconditionViolation("allowed verdicts carry no refusal reason")
        if self.decision is Decision.REFUSED and self.refusal_reason is None:
            raise PreconditionViolation("refused verdicts must name a refusal reason")

    @property
    def allowed(self) -> bool:
        return self.decision is Decision.ALLOWED

    @property
    def reason_text(self) -> Optional[str]:
        """Reason rendered as ``name`` or ``name(arg, ...)``."""
        if self.refusal_reason is None:
            return None
        if self.offending:
            return f"{self.refusal_reason.value}({', '.join(self.offending)})"
        return self.refusal_reason.value

    def to_dict(self) -> Dict[str, Any]:
        return {
            "decision": self.decision.value,
            "refusal_reason": self.refusal_reason.value if self.refusal_reason else None,
            "offending": list(self.offending),
            "detail": self.detail,
            "referenced_columns": (
                sorted(self.referenced_columns) if self.referenced_columns is not None else None
            ),
        }


@dataclass(frozen=True)
class ExecutionOutcome:
    status: OutcomeStatus
    rows: Tuple[Tuple[Any, ...], ...] = ()
    column_names: Tuple[str, ...] = ()
    error_message: Optional[str] = None
    error_reason: Optional[ErrorReason] = None
    elapsed_ms: float = 0.0
    row_limit_applied: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        object.__setattr__(self, "column_names", tuple(self.column_names))
        if self.elapsed_ms < 0:
            raise PreconditionViolation("elapsed_ms must be non-negative")
        if self.status is OutcomeStatus.EMPTY and self.rows:
            raise PreconditionViolation("empty outcomes carry no rows")
        if self.status is OutcomeStatus.ERROR:
            if self.error_message is None or self.rows:
                raise PreconditionViolation("error outcomes carry a message and no rows")
        elif self.error_message is not None:
            raise PreconditionViolation("only error outcomes carry an error message")
        if self.status is OutcomeStatus.TRUNCATED and len(self.rows) != self.row_limit_applied:
            raise PreconditionViolation("truncated outcomes hold exactly row_limit_applied rows")

    @classmethod
    def from_rows(
        cls,
        column_names: Sequence[str],
        rows: Sequence[Sequence[Any]],
        row_limit: int,
        elapsed_ms: float = 0.0,
    ) -> "ExecutionOutcome":
        """Classify fetched rows; ``rows`` may hold one extra row to detect truncation."""
        if not rows:
            return cls(OutcomeStatus.EMPTY, (), column_names, elapsed_ms=elapsed_ms,
                       row_limit_applied=row_limit)
        if len(rows) > row_limit:
            return cls(OutcomeStatus.TRUNCATED, rows[:row_limit], column_names,
                       elapsed_ms=elapsed_ms, row_limit_applied=row_limit)
        return cls(OutcomeStatus.ROWS, rows, column_names, elapsed_ms=elapsed_ms,
                   row_limit_applied=row_limit)

    @classmethod
    def failure(
        cls, message: str, reason: ErrorReason = ErrorReason.QUERY_ERROR, elapsed_ms: float = 0.0
    ) -> "ExecutionOutcome":
        return cls(OutcomeStatus.ERROR, error_message=message, error_reason=reason,
                   elapsed_ms=elapsed_ms)

    @property
    def has_rows(self) -> bool:
        return self.status in (OutcomeStatus.ROWS, OutcomeStatus.TRUNCATED)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "status": self.status.value,
            "column_names": list(self.column_names),
            "rows": to_jsonable(self.rows),
            "row_count": len(self.rows),
            "error_message": self.error_message,
            "error_reason": self.error_reason.value if self.error_reason else None,
            "elapsed_ms": self.elapsed_ms,
            "row_limit_applied": self.row_limit_applied,
        }


@dataclass(frozen=True)
class RatingReport:
    score: float
    verdict: Verdict
    flags: FrozenSet[RatingFlag] = frozenset()
    rationale: str = ""

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise PreconditionViolation(f"rating score must lie in [0, 1] (got {self.score})")
        object.__setattr__(self, "flags", frozenset(self.flags))
        if self.verdict is Verdict.ACCEPT and self.flags:
            raise PreconditionViolation("accepted ratings carry no flags")

    @classmethod
    def build(
        cls,
        score: float,
        flags: Iterable[RatingFlag],
        threshold: float,
        rationale: str = "",
        llm_scored: bool = True,
    ) -> "RatingReport":
        """Derive the verdict: accept iff the score clears the threshold and no flag is raised."""
        flags = set(flags)
        if llm_scored and score < threshold:
            flags.add(RatingFlag.LOW_LLM_SCORE)
        verdict = Verdict.ACCEPT if not flags else Verdict.REGENERATE
        return cls(score, verdict, frozenset(flags), rationale)

    @property
    def accepted(self) -> bool:
        return self.verdict is Verdict.ACCEPT

    def to_dict(self) -> Dict[str, Any]:
        return {
            "score": self.score,
            "verdict": self.verdict.value,
            "flags": sorted(f.value for f in self.flags),
            "rationale": self.rationale,
        }


@dataclass(frozen=True)
class SanityCheckResult:
    """
    Deterministic sanity flags for one executed attempt.

    ``evidence`` pairs each raised flag with a human-readable detail string;
    ``predicate_columns`` lists the qualified text columns behind an
    exact-match predicate, which drive value introspection. ``conversions``
    holds (column, stored unit, requested unit) for each unit mismatch.
    """
    flags: FrozenSet[RatingFlag] = frozenset()
    evidence: Tuple[Tuple[RatingFlag, str], ...] = ()
    predicate_columns: Tuple[str, ...] = ()
    conversions: Tuple[Tuple[str, str, str], ...] = ()
    checked_at: Optional[datetime] = None

    def __post_init__(self):
        object.__setattr__(self, "flags", frozenset(self.flags))
        object.__setattr__(self, "evidence", tuple(self.evidence))
        if not self.flags <= SANITY_FLAGS:
            raise PreconditionViolation("sanity results only carry sanity flags")
        evidenced = {flag for flag, _ in self.evidence}
        if not self.flags <= evidenced:
            raise PreconditionViolation("every sanity flag must carry evidence")

    def evidence_for(self, flag: RatingFlag) -> List[str]:
        return [text for f, text in self.evidence if f is flag]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "flags": sorted(f.value for f in self.flags),
            "evidence": [[f.value, text] for f, text in self.evidence],
            "predicate_columns": list(self.predicate_columns),
            "conversions": [list(c) for c in self.conversions],
        }


@dataclass(frozen=True)
class AttemptTrace:
    """The full record of one generate, validate, execute and rate cycle."""
    candidate: SqlCandidate
    guardrail_verdict: GuardrailVerdict
    outcome: Optional[ExecutionOutcome] = None
    rating: Optional[RatingReport] = None
    correction_hint: Optional[str] = None
    sanity: Optional[SanityCheckResult] = None

    def __post_init__(self):
        if self.outcome is not None and not self.guardrail_verdict.allowed:
            raise PreconditionViolation("refused attempts are never executed")
        if self.rating is not None and self.outcome is None:
            raise PreconditionViolation("only executed attempts are rated")

    @property
    def attempt_number(self) -> int:
        return self.candidate.attempt_number

    def to_dict(self) -> Dict[str, Any]:
        return {
            "attempt_number": self.attempt_number,
            "candidate": self.candidate.to_dict(),
            "guardrail_verdict": self.guardrail_verdict.to_dict(),
            "outcome": self.outcome.to_dict() if self.outcome else None,
            "rating": self.rating.to_dict() if self.rating else None,
            "sanity": self.sanity.to_dict() if self.sanity else None,
            "correction_hint": self.correction_hint,
        }


@dataclass(frozen=True)
class QueryAnswer:
    final_status: FinalStatus
    question: Question
    attempts: Tuple[AttemptTrace, ...]
    rows: Tuple[Tuple[Any, ...], ...] = ()
    column_names: Tuple[str, ...] = ()
    narrative: str = ""
    key_values: Tuple[Tuple[str, Any], ...] = ()
    best_attempt: Optional[int] = None
    verbosity: Verbosity = Verbosity.CONCISE

    def __post_init__(self):
        attempts = tuple(self.attempts)
        object.__setattr__(self, "attempts", attempts)
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        object.__setattr__(self, "column_names", tuple(self.column_names))
        object.__setattr__(self, "key_values", tuple(tuple(kv) for kv in self.key_values))
        if not 1 <= len(attempts) <= MAX_ATTEMPTS:
            raise PreconditionViolation(
                f"answers carry between 1 and {MAX_ATTEMPTS} attempts (got {len(attempts)})"
            )
        if self.final_status is FinalStatus.ANSWERED and not self.narrative.strip():
            raise PreconditionViolation("answered queries carry a narrative")

    @property
    def refusal_reason(self) -> Optional[str]:
        if self.final_status is not FinalStatus.REFUSED:
            return None
        return self.attempts[-1].guardrail_verdict.reason_text

    def to_dict(self) -> Dict[str, Any]:
        return {
            "final_status": self.final_status.value,
            "question": self.question.to_dict(),
            "column_names": list(self.column_names),
            "rows": to_jsonable(self.rows),
            "narrative": self.narrative,
            "key_values": [[label, to_jsonable(value)] for label, value in self.key_values],
            "best_attempt": self.best_attempt,
            "refusal_reason": self.refusal_reason,
            "verbosity": self.verbosity.value,
            "attempts": [a.to_dict() for a in self.attempts],
        }
