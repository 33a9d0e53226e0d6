"""
Prompt templates for the five provider roles, plus the parsers that read
provider replies back (SQL extraction and the SCORE/REASON rating format).

Every template is a pure function of its inputs, so identical pipeline
state always renders byte-identical prompts.
"""

import logging
import re
from enum import Enum
from typing import Any, Optional, Sequence, Tuple

from src.domain.clock import format_instant
from src.domain.errors import ExtractionFailed, PreconditionViolation
from src.domain.models import AttemptTrace, ExecutionOutcome, Question, Verbosity, to_jsonable

logger = logging.getLogger(__name__)

READ_ONLY_INSTRUCTION = "produce exactly one read-only SELECT statement"
SAMPLE_ROW_LIMIT = 10

ROUTE_T2S = "T2S"
ROUTE_OUT_OF_SCOPE = "OUT_OF_SCOPE"


class PromptRole(Enum):
    """The pipeline stage that issues a provider call."""
    GENERATE_SQL = "generate_sql"
    CORRECT_SQL = "correct_sql"
    RATE_RESULT = "rate_result"
    INTERPRET_RESULT = "interpret_result"
    ROUTE_TASK = "route_task"


def format_rows(column_names: Sequence[str], rows: Sequence[Sequence[Any]], limit: int = SAMPLE_ROW_LIMIT) -> str:
    """Render up to ``limit`` rows as a pipe-separated table."""
    lines = [" | ".join(column_names)]
    for row in list(rows)[:limit]:
        lines.append(" | ".join("NULL" if v is None else str(to_jsonable(v)) for v in row))
    if len(rows) > limit:
        lines.append(f"... {len(rows) - limit} more rows")
    return "\n".join(lines)


def describe_outcome(outcome: Optional[ExecutionOutcome]) -> str:
    if outcome is None:
        return "The statement was not executed."
    if outcome.error_message is not None:
        return f"The statement failed with error: {outcome.error_message}"
    if not outcome.rows:
        return "The statement returned 0 rows."
    note = f"The statement returned {len(outcome.rows)} rows"
    if outcome.row_limit_applied and len(outcome.rows) >= outcome.row_limit_applied:
        note += f" (truncated at the row limit of {outcome.row_limit_applied})"
    return note + ":\n" + format_rows(outcome.column_names, outcome.rows)


def _generate_prompt(question: Question, schema_text: str) -> str:
    return (
        "You translate business questions into SQL.\n"
        "Rules:\n"
        f"- {READ_ONLY_INSTRUCTION}.\n"
        "- Use only the tables and columns listed in the schema.\n"
        "- Common table expressions and joins are fine; never emit a second statement.\n"
        "- Reply with the SQL only.\n"
        "\n"
        "Schema:\n"
        f"{schema_text}\n"
        f"Current time (UTC): {format_instant(question.asked_at)}\n"
        f"Question: {question.text}\n"
    )


def _attempt_summary(trace: AttemptTrace) -> str:
    lines = [f"Attempt {trace.attempt_number}:", trace.candidate.sql_text.strip()]
    verdict = trace.guardrail_verdict
    if not verdict.allowed:
        lines.append(f"Refused by the guardrail: {verdict.reason_text}")
    else:
        lines.append(describe_outcome(trace.outcome))
    if trace.rating is not None and trace.rating.flags:
        lines.append("Rating flags: " + ", ".join(sorted(f.value for f in trace.rating.flags)))
    return "\n".join(lines)


def _correct_prompt(question: Question, schema_text: str, history: Sequence[AttemptTrace]) -> str:
    if not history:
        raise PreconditionViolation("correct_sql prompts need at least one prior attempt")
    previous = history[-1]
    earlier = "\n\n".join(_attempt_summary(t) for t in history[:-1])
    parts = [
        "The previous SQL did not answer the question correctly. Write a corrected query.",
        "Rules:",
        f"- {READ_ONLY_INSTRUCTION}.",
        "- Use only the tables and columns listed in the schema.",
        "- Reply with the SQL only.",
        "",
        "Schema:",
        schema_text,
        f"Current time (UTC): {format_instant(question.asked_at)}",
        f"Question: {question.text}",
        "",
    ]
    if earlier:
        parts += ["Earlier attempts:", earlier, ""]
    parts += ["Previous attempt:", _attempt_summary(previous)]
    if previous.correction_hint:
        parts += ["", "Correction hint:", previous.correction_hint]
    return "\n".join(parts) + "\n"


def _rate_prompt(question: Question, history: Sequence[AttemptTrace]) -> str:
    if not history:
        raise PreconditionViolation("rate_result prompts need the attempt being rated")
    trace = history[-1]
    row_count = len(trace.outcome.rows) if trace.outcome is not None else 0
    return (
        "Rate how well the query result answers the question.\n"
        f"Question: {question.text}\n"
        f"SQL:\n{trace.candidate.sql_text.strip()}\n"
        f"Row count: {row_count}\n"
        f"{describe_outcome(trace.outcome)}\n"
        "\n"
        "Reply in exactly this format:\n"
        "SCORE: <number between 0 and 1>\n"
        "REASON: <one sentence>\n"
    )


def _interpret_prompt(
    question: Question,
    outcome: Optional[ExecutionOutcome],
    key_values: Sequence[Tuple[str, Any]],
    verbosity: Verbosity,
) -> str:
    if outcome is None or not outcome.rows:
        raise PreconditionViolation("interpret_result prompts need a result with rows")
    if verbosity is Verbosity.DETAILED:
        length = "Explain the result in a short paragraph, pointing out notable values."
    else:
        length = "Answer in at most two sentences."
    facts = "\n".join(f"- {label}: {to_jsonable(value)}" for label, value in key_values)
    return (
        "Summarize the query result for a business reader.\n"
        f"Question: {question.text}\n"
        f"Columns: {', '.join(outcome.column_names)}\n"
        f"Key values:\n{facts}\n"
        f"Sample rows:\n{format_rows(outcome.column_names, outcome.rows)}\n"
        "\n"
        f"{length} Use only numbers that appear in the data above.\n"
    )


def _route_prompt(question: Question, schema_text: str) -> str:
    return (
        "Decide whether the request asks for data that can be answered from the database.\n"
        f"Schema:\n{schema_text}\n"
        f"Request: {question.text}\n"
        f"Reply with exactly one word: {ROUTE_T2S} or {ROUTE_OUT_OF_SCOPE}.\n"
    )


def render_prompt(
    role: PromptRole,
    question: Question,
    schema_text: str = "",
    history: Sequence[AttemptTrace] = (),
    outcome: Optional[ExecutionOutcome] = None,
    key_values: Sequence[Tuple[str, Any]] = (),
    verbosity: Verbosity = Verbosity.CONCISE,
) -> str:
    """
    Render the prompt for one provider call.

    Args:
        role: The pipeline stage issuing the call
        question: The question being answered
        schema_text: Rendered schema blocks (already within the prompt budget)
        history: Prior attempts; ``correct_sql`` needs at least one and
            ``rate_result`` rates the last one
        outcome: The result being interpreted (``interpret_result`` only)
        key_values: Extracted key values (``interpret_result`` only)
        verbosity: Requested narrative length (``interpret_result`` only)

    Returns:
        The rendered prompt text

    Raises:
        PreconditionViolation: when the role's required inputs are missing
    """
    if role is PromptRole.GENERATE_SQL:
        return _generate_prompt(question, schema_text)
    if role is PromptRole.CORRECT_SQL:
        return _correct_prompt(question, schema_text, history)
    if role is PromptRole.RATE_RESULT:
        return _rate_prompt(question, history)
    if role is PromptRole.INTERPRET_RESULT:
        return _interpret_prompt(question, outcome, key_values, verbosity)
    return _route_prompt(question, schema_text)


_FENCE = re.compile(r"```[ \t]*(?:([A-Za-z0-9_+-]+)[ \t]*\n)?(.*?)(?:```|\Z)", re.DOTALL)
_STATEMENT_WORDS = (
    "SELECT", "WITH", "INSERT", "UPDATE", "DELETE", "MERGE", "REPLACE", "CREATE", "DROP",
    "ALTER", "TRUNCATE", "PRAGMA", "ATTACH", "DETACH", "VACUUM", "GRANT", "REVOKE",
    "EXPLAIN", "VALUES", "DESCRIBE", "SHOW", "COPY", "CALL", "EXEC", "EXECUTE",
)
_CLAUSE_WORDS = _STATEMENT_WORDS + (
    "FROM", "WHERE", "JOIN", "LEFT", "RIGHT", "INNER", "OUTER", "FULL", "CROSS", "ON",
    "GROUP", "ORDER", "HAVING", "LIMIT", "OFFSET", "UNION", "INTERSECT", "EXCEPT", "AND",
    "OR", "NOT", "AS", "CASE", "WHEN", "THEN", "ELSE", "END", "WINDOW", "FETCH", "FOR",
    "INTO", "SET", "RETURNING", "USING",
)
_START_UPPER = re.compile(r"\b(?:" + "|".join(_STATEMENT_WORDS) + r")\b(?=\s|\(|\*|$)")
_START_ANY = re.compile(_START_UPPER.pattern, re.IGNORECASE)
_SQL_LEAD = re.compile(
    r"^\s*(?:--|/\*|\(|\)|,|\*|;|(?:" + "|".join(_CLAUSE_WORDS) + r")\b)", re.IGNORECASE
)
_PROSE_LEAD = re.compile(r"^\s*[A-Z][a-z']*(?:[ ,:.]|$)")
# A lowercase statement word inside prose only counts when real SQL follows it.
_IDENT = r"[\w.\"`]+"
_LOWER_STATEMENT = re.compile(
    r"(?:explain\s+(?:query\s+plan\s+)?)?"
    r"(?:select\s+(?:distinct\s+)?(?:\*|\(|" + _IDENT + r"\s*(?:\(|,|\bfrom\b|\bas\b))"
    r"|with\s+(?:recursive\s+)?" + _IDENT + r"\s*(?:\([^)]*\)\s*)?as\s*\("
    r"|values\s*\("
    r"|insert\s+into\s+" + _IDENT +
    r"|update\s+" + _IDENT + r"\s+set\b"
    r"|delete\s+from\s+" + _IDENT +
    r"|(?:create|drop|alter)\s+(?:table|view|index)\b"
    r"|truncate\s+(?:table\s+)?" + _IDENT + r")",
    re.IGNORECASE,
)


def _looks_like_sql(text: str) -> bool:
    return bool(_SQL_LEAD.match(text))


def _is_prose(text: str) -> bool:
    return bool(text.strip()) and not _looks_like_sql(text) and bool(_PROSE_LEAD.match(text))


def _statement_start(text: str) -> Optional[int]:
    upper = _START_UPPER.search(text)
    if upper is not None:
        return upper.start()
    for match in _START_ANY.finditer(text):
        if _LOWER_STATEMENT.match(text, match.start()):
            return match.start()
    return None


def _drop_trailing_prose(span: str) -> str:
    kept = []
    for paragraph in re.split(r"\n[ \t]*\n", span):
        if kept and _is_prose(paragraph):
            break
        kept.append(paragraph)
    span = "\n\n".join(kept)
    head, sep, tail = span.rpartition(";")
    if sep and _is_prose(tail) and not _START_ANY.search(tail):
        span = head + sep
    return span.strip()


def extract_sql(response_text: str) -> str:
    """
    Pull the statement out of a provider reply.

    Code fences, leading prose and trailing commentary are removed; a reply
    that already starts with SQL is returned as-is apart from trailing
    commentary. Extraction is idempotent.

    Raises:
        ExtractionFailed: when the reply holds nothing statement-like
    """
    text = response_text or ""
    fence = _FENCE.search(text)
    if fence:
        text = fence.group(2)
    text = text.strip()
    if not text:
        raise ExtractionFailed("provider reply is empty", {"response": response_text})

    if not _looks_like_sql(text):
        start = _statement_start(text)
        if start is None:
            raise ExtractionFailed(
                "provider reply holds no SQL statement", {"response": response_text}
            )
        text = text[start:]

    sql = _drop_trailing_prose(text)
    if not sql or not (_START_ANY.match(sql.lstrip("( \t\n")) or _statement_start(sql) is not None):
        raise ExtractionFailed("provider reply holds no SQL statement", {"response": response_text})
    return sql


_SCORE = re.compile(
    r"SCORE\s*[:=]\s*([0-9]*\.?[0-9]+)\s*(%|/\s*([0-9]*\.?[0-9]+))?", re.IGNORECASE
)
_REASON = re.compile(r"REASON\s*[:=]\s*(.+)", re.IGNORECASE | re.DOTALL)


def parse_rating(text: str) -> Tuple[float, str, bool]:
    """
    Parse a ``SCORE: <0-1>`` / ``REASON: <text>`` rating reply.

    Percentages and ``n/10`` style scores are normalized. Anything that does
    not yield a score inside [0, 1] maps to 0.0.

    Returns:
        (score, reason, parsed)
    """
    text = text or ""
    reason_match = _REASON.search(text)
    reason = reason_match.group(1).strip().splitlines()[0].strip() if reason_match else ""
    match = _SCORE.search(text)
    if match is None:
        logger.warning("Unparseable rating reply, scoring 0.0")
        return 0.0, reason or "unparseable rating", False

    score = float(match.group(1))
    if match.group(2) == "%":
        score /= 100.0
    elif match.group(3):
        scale = float(match.group(3))
        score = score / scale if scale > 0 else -1.0
    if not 0.0 <= score <= 1.0:
        logger.warning(f"Rating score {match.group(0)!r} out of range, scoring 0.0")
        return 0.0, reason or "rating out of range", False
    return score, reason, True


def parse_route(text: str) -> Optional[str]:
    """Read a route_task reply; ``None`` when it names neither lane."""
    upper = (text or "").upper()
    if ROUTE_OUT_OF_SCOPE in upper or "OUT OF SCOPE" in upper:
        return ROUTE_OUT_OF_SCOPE
    if re.search(r"\bT2S\b", upper):
        return ROUTE_T2S
    return None
