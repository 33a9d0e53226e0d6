"""
Exception hierarchy for the query engine.

Query-quality problems (bad SQL, empty results) are data and travel inside
ExecutionOutcome and RatingReport. The exceptions below are reserved for
infrastructure failures, contract violations and configuration mistakes.
Every error carries a stable ``code`` used by the HTTP and CLI surfaces.
"""

from typing import Optional


class SentinelError(Exception):
    """Base class for all engine errors."""

    code = "sentinel_error"

    def __init__(self, message: str = "", detail: Optional[dict] = None):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.detail = detail or {}

    def to_dict(self) -> dict:
        """Convert the error to a JSON-safe dictionary."""
        return {"code": self.code, "message": self.message, "detail": self.detail}


class DatasourceUnavailable(SentinelError):
    """The datasource could not be reached. Never retried by the correction loop."""

    code = "datasource_unavailable"


class UnknownDatasource(SentinelError):
    code = "unknown_datasource"


class RankingUnavailable(SentinelError):
    code = "ranking_unavailable"


class ColumnNotFound(SentinelError):
    code = "column_not_found"


class ProviderUnavailable(SentinelError):
    """The language-model provider failed after exhausting transport retries."""

    code = "provider_unavailable"


class ScenarioViolation(SentinelError):
    """A scripted scenario was consumed out of order (a test-authoring error)."""

    code = "scenario_violation"


class ScenarioParseError(SentinelError):
    code = "scenario_parse_error"

    def __init__(self, scenario_name: str, line_number: int, message: str):
        super().__init__(
            f"{scenario_name}:{line_number}: {message}",
            {"scenario": scenario_name, "line": line_number},
        )
        self.scenario_name = scenario_name
        self.line_number = line_number


class ExtractionFailed(SentinelError):
    code = "extraction_failed"


class PreconditionViolation(SentinelError):
    code = "precondition_violation"


class AuditStorageError(SentinelError):
    """Raised when an audit record cannot be made durable. Pipelines abort on it."""

    code = "audit_storage_error"


class ConfigError(SentinelError):
    code = "config_error"


class ReadOnlyViolation(SentinelError):
    """A datasource session accepted a write during the startup probe."""

    code = "read_only_violation"


class OutOfScope(SentinelError):
    """The router decided the question is not a data question."""

    code = "out_of_scope"
