"""
SQL execution tool.

Runs guardrail-approved statements against a datasource through a session
that is read-only at the connection level, with a statement timeout and a
row cap, and classifies the result into an ExecutionOutcome.
"""

import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Dict, Optional

import sqlglot
from sqlalchemy import create_engine, event
from sqlalchemy.engine import Engine
from sqlalchemy.exc import DBAPIError, SQLAlchemyError
from sqlalchemy.pool import NullPool
from sqlglot import exp

from src.config import DatasourceConfig
from src.domain.clock import Clock, format_instant, parse_instant, utc_now
from src.domain.errors import DatasourceUnavailable, ReadOnlyViolation
from src.domain.models import ErrorReason, ExecutionOutcome
from src.tools.base_tool import BaseTool

logger = logging.getLogger(__name__)

PROBE_TABLE = "__sentinel_probe"
SQLITE_TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
PROGRESS_HANDLER_STEPS = 1000

# Postgres-style format tokens understood by the to_char UDF, longest first
_TO_CHAR_TOKENS = (
    ("HH24", "%H"),
    ("YYYY", "%Y"),
    ("MON", "%b"),
    ("MI", "%M"),
    ("SS", "%S"),
    ("MM", "%m"),
    ("DD", "%d"),
    ("YY", "%y"),
)

# Constructs the reference backend lacks; their presence triggers a rewrite
_REWRITE_TYPES = (exp.ILike, exp.Interval, exp.CurrentTimestamp, exp.CurrentDate)


@dataclass(frozen=True)
class ProbeReport:
    """Result of the startup write probe."""
    datasource_id: str
    writes_rejected: bool
    detail: str = ""
    checked_at: datetime = field(default_factory=utc_now)

    @property
    def message(self) -> str:
        return "writes rejected" if self.writes_rejected else "writes accepted"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "datasource_id": self.datasource_id,
            "writes_rejected": self.writes_rejected,
            "message": self.message,
            "detail": self.detail,
            "checked_at": format_instant(self.checked_at),
        }


def _parse_cell_timestamp(value: Any) -> Optional[datetime]:
    if value is None:
        return None
    try:
        return datetime.fromisoformat(str(value).replace("Z", "+00:00").replace("T", " "))
    except ValueError:
        return None


def sqlite_date_trunc(unit: Optional[str], value: Any) -> Optional[str]:
    """``date_trunc(unit, ts)`` for SQLite, returning ``YYYY-MM-DD HH:MM:SS`` text."""
    instant = _parse_cell_timestamp(value)
    if instant is None or unit is None:
        return None
    unit = unit.lower()
    if unit == "year":
        instant = instant.replace(month=1, day=1, hour=0, minute=0, second=0, microsecond=0)
    elif unit == "quarter":
        month = 3 * ((instant.month - 1) // 3) + 1
        instant = instant.replace(month=month, day=1, hour=0, minute=0, second=0, microsecond=0)
    elif unit == "month":
        instant = instant.replace(day=1, hour=0, minute=0, second=0, microsecond=0)
    elif unit == "week":
        instant = (instant - timedelta(days=instant.weekday())).replace(
            hour=0, minute=0, second=0, microsecond=0
        )
    elif unit == "day":
        instant = instant.replace(hour=0, minute=0, second=0, microsecond=0)
    elif unit == "hour":
        instant = instant.replace(minute=0, second=0, microsecond=0)
    else:
        return None
    return instant.strftime(SQLITE_TIMESTAMP_FORMAT)


def sqlite_to_char(value: Any, pattern: Optional[str]) -> Optional[str]:
    """``to_char(ts, pattern)`` for SQLite with the common Postgres date tokens."""
    instant = _parse_cell_timestamp(value)
    if instant is None or pattern is None:
        return None
    output = []
    index = 0
    while index < len(pattern):
        for token, directive in _TO_CHAR_TOKENS:
            if pattern.startswith(token, index):
                output.append(instant.strftime(directive))
                index += len(token)
                break
        else:
            output.append(pattern[index])
            index += 1
    return "".join(output)


def _interval_modifier(interval: exp.Interval, sign: str) -> Optional[str]:
    amount = interval.this.name if interval.this is not None else ""
    unit = interval.args.get("unit")
    text = f"{amount} {unit.name}" if unit is not None else amount
    parts = text.lower().split()
    if len(parts) != 2:
        return None
    number, unit_name = parts
    unit_name = unit_name.rstrip("s")
    try:
        quantity = float(number)
    except ValueError:
        return None
    if unit_name == "week":
        quantity, unit_name = quantity * 7, "day"
    elif unit_name == "quarter":
        quantity, unit_name = quantity * 3, "month"
    if unit_name not in ("year", "month", "day", "hour", "minute", "second"):
        return None
    rendered = int(quantity) if quantity.is_integer() else quantity
    return f"{sign}{rendered} {unit_name}s"


def _rewrite_node(node: exp.Expression) -> exp.Expression:
    if isinstance(node, exp.ILike):
        return exp.Like(this=node.this.transform(_rewrite_node), expression=node.expression)
    if isinstance(node, exp.CurrentTimestamp):
        return exp.Anonymous(this="now", expressions=[])
    if isinstance(node, exp.CurrentDate):
        return exp.Anonymous(this="date", expressions=[exp.Anonymous(this="now", expressions=[])])
    if isinstance(node, (exp.Sub, exp.Add)) and isinstance(node.expression, exp.Interval):
        modifier = _interval_modifier(node.expression, "-" if isinstance(node, exp.Sub) else "+")
        if modifier is not None:
            return exp.Anonymous(
                this="datetime",
                expressions=[node.this.transform(_rewrite_node), exp.Literal.string(modifier)],
            )
    if isinstance(node, (exp.DateTrunc, exp.TimestampTrunc)) and node.args.get("unit") is not None:
        return exp.Anonymous(
            this="date_trunc",
            expressions=[exp.Literal.string(node.args["unit"].name.lower()), node.this.transform(_rewrite_node)],
        )
    return node


def normalize_for_sqlite(sql_text: str) -> str:
    """
    Rewrite constructs SQLite lacks (ILIKE, INTERVAL arithmetic, CURRENT_DATE).

    Statements that need no rewrite are returned unchanged so the engine's
    error text always refers to what the model wrote.
    """
    tree = None
    for dialect in ("sqlite", "postgres"):
        try:
            tree = sqlglot.parse_one(sql_text, read=dialect)
            break
        except Exception:
            continue
    if tree is None or not any(tree.find(t) is not None for t in _REWRITE_TYPES):
        return sql_text
    try:
        return tree.transform(_rewrite_node).sql(dialect="sqlite")
    except Exception as e:
        logger.debug(f"SQLite rewrite failed, executing statement as written: {e}")
        return sql_text


class SqlExecutorTool(BaseTool):
    """
    Tool for running read-only SQL against one datasource.

    Each call opens its own connection (no pooling), so concurrent pipelines
    never share session state.
    """
    def __init__(
        self,
        config: DatasourceConfig,
        clock: Clock = utc_now,
        row_limit: Optional[int] = None,
        engine: Optional[Engine] = None,
        tool_id: Optional[str] = None,
    ):
        super().__init__(
            tool_id=tool_id or f"executor:{config.id}",
            name="SqlExecutor",
            description=f"Read-only SQL execution against datasource {config.id}",
            metadata={
                "datasource_id": config.id,
                "statement_timeout_ms": config.statement_timeout_ms,
            },
            clock=clock,
        )
        self.config = config
        self.datasource_id = config.id
        self.row_limit = row_limit or config.row_limit
        self.timeout_ms = config.statement_timeout_ms
        self.engine = engine or self._create_engine()
        self.metadata["row_limit"] = self.row_limit
        self.metadata["dialect"] = self.dialect

    @property
    def dialect(self) -> str:
        return self.engine.dialect.name

    def _create_engine(self) -> Engine:
        if self.config.is_sqlite_file:
            path = Path(self.config.connection).expanduser().resolve()
            url = f"sqlite:///file:{path}?mode=ro&uri=true"
            engine = create_engine(url, poolclass=NullPool)
        else:
            engine = create_engine(self.config.connection, poolclass=NullPool, pool_pre_ping=True)
        event.listen(engine, "connect", self._on_connect)
        logger.info(f"Created read-only engine for datasource {self.datasource_id} ({engine.dialect.name})")
        return engine

    def _now_text(self) -> str:
        return parse_instant(self.clock()).strftime(SQLITE_TIMESTAMP_FORMAT)

    def _on_connect(self, dbapi_connection, connection_record) -> None:
        cursor = dbapi_connection.cursor()
        try:
            if self.engine_is_sqlite(dbapi_connection):
                cursor.execute("PRAGMA query_only = ON")
                dbapi_connection.create_function("date_trunc", 2, sqlite_date_trunc, deterministic=True)
                dbapi_connection.create_function("to_char", 2, sqlite_to_char, deterministic=True)
                dbapi_connection.create_function("now", 0, self._now_text)
            else:
                cursor.execute("SET SESSION CHARACTERISTICS AS TRANSACTION READ ONLY")
                cursor.execute(f"SET statement_timeout = {int(self.timeout_ms)}")
        finally:
            cursor.close()

    @staticmethod
    def engine_is_sqlite(dbapi_connection) -> bool:
        return hasattr(dbapi_connection, "create_function")

    def _elapsed_ms(self, started: datetime) -> float:
        return max(0.0, (self.clock() - started).total_seconds() * 1000.0)

    def _connect(self):
        try:
            return self.engine.connect()
        except SQLAlchemyError as e:
            logger.error(f"Datasource {self.datasource_id} is unavailable: {e}")
            raise DatasourceUnavailable(
                f"datasource {self.datasource_id} is unavailable",
                {"datasource_id": self.datasource_id, "error": str(getattr(e, "orig", e))},
            ) from e

    def execute(self, sql_text: str) -> ExecutionOutcome:
        """
        Execute one statement.

        Args:
            sql_text: A statement the guardrail allowed

        Returns:
            ExecutionOutcome with rows, empty, truncated or error status

        Raises:
            DatasourceUnavailable: when no connection can be opened
        """
        self.mark_used()
        started = self.clock()
        statement = normalize_for_sqlite(sql_text) if self.dialect == "sqlite" else sql_text
        if statement != sql_text:
            logger.debug(f"Rewrote statement for sqlite: {statement}")

        connection = self._connect()
        deadline = time.monotonic() + self.timeout_ms / 1000.0
        timed_out = [False]
        raw = None
        with connection:
            try:
                raw = connection.connection.dbapi_connection
                if hasattr(raw, "set_progress_handler"):
                    def _progress() -> int:
                        if time.monotonic() > deadline:
                            timed_out[0] = True
                            return 1
                        return 0
                    raw.set_progress_handler(_progress, PROGRESS_HANDLER_STEPS)

                result = connection.exec_driver_sql(statement)
                if result.returns_rows:
                    column_names = tuple(result.keys())
                    rows = [tuple(row) for row in result.fetchmany(self.row_limit + 1)]
                else:
                    column_names, rows = (), []
                result.close()
                connection.rollback()
            except DBAPIError as e:
                message = str(e.orig)
                if e.connection_invalidated:
                    logger.error(f"Lost the connection to {self.datasource_id}: {message}")
                    raise DatasourceUnavailable(
                        f"lost the connection to datasource {self.datasource_id}: {message}",
                        {"datasource_id": self.datasource_id},
                    ) from e
                reason = ErrorReason.QUERY_ERROR
                if timed_out[0] or "statement timeout" in message.lower():
                    reason = ErrorReason.TIMEOUT
                    message = f"statement exceeded {self.timeout_ms} ms: {message}"
                logger.info(f"Statement failed on {self.datasource_id}: {message}")
                return ExecutionOutcome.failure(message, reason, self._elapsed_ms(started))
            except SQLAlchemyError as e:
                logger.info(f"Statement failed on {self.datasource_id}: {e}")
                return ExecutionOutcome.failure(str(e), ErrorReason.QUERY_ERROR, self._elapsed_ms(started))
            finally:
                if raw is not None and hasattr(raw, "set_progress_handler"):
                    raw.set_progress_handler(None, 0)

        outcome = ExecutionOutcome.from_rows(column_names, rows, self.row_limit, self._elapsed_ms(started))
        logger.debug(f"Statement on {self.datasource_id} returned {outcome.status.value} ({len(outcome.rows)} rows)")
        return outcome

    def probe_readonly(self) -> ProbeReport:
        """
        Attempt a trivial write and report whether the session rejected it.

        Returns:
            ProbeReport; ``writes_rejected`` is False for a misconfigured session

        Raises:
            DatasourceUnavailable: when no connection can be opened
        """
        connection = self._connect()
        with connection:
            try:
                connection.exec_driver_sql(f"CREATE TABLE {PROBE_TABLE} (probe INTEGER)")
            except DBAPIError as e:
                connection.rollback()
                report = ProbeReport(self.datasource_id, True, str(e.orig), self.clock())
                logger.info(f"Read-only probe on {self.datasource_id}: {report.message}")
                return report
            try:
                connection.exec_driver_sql(f"DROP TABLE {PROBE_TABLE}")
            finally:
                connection.rollback()
        logger.error(f"Read-only probe on {self.datasource_id} succeeded in writing")
        return ProbeReport(self.datasource_id, False, f"created table {PROBE_TABLE}", self.clock())

    def ensure_readonly(self) -> ProbeReport:
        """Run the probe and raise ReadOnlyViolation when the session accepted a write."""
        report = self.probe_readonly()
        if not report.writes_rejected:
            raise ReadOnlyViolation(
                f"datasource {self.datasource_id} accepted a write; refusing to start",
                report.to_dict(),
            )
        return report

    def dispose(self) -> None:
        self.engine.dispose()
