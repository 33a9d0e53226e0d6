"""
Rating agent and the deterministic sanity checks that back it.

Sanity checks look for known answer-quality pitfalls (future-dated rows,
unconverted units, exact-match predicates that matched nothing and
truncated totals). Any raised flag forces regeneration whatever score the
language model gives.
"""

import logging
import re
from datetime import date, datetime
from typing import Any, Dict, List, Optional, Set, Tuple

from sqlglot import exp

from src.agents.base_agent import BaseAgent
from src.domain.clock import format_instant, parse_instant
from src.domain.constants import DEFAULT_CONSTANTS, EngineConstants
from src.domain.models import (
    AttemptTrace,
    DataKind,
    Decision,
    ExecutionOutcome,
    GuardrailVerdict,
    OutcomeStatus,
    Question,
    RatingFlag,
    RatingReport,
    SanityCheckResult,
    SchemaCatalog,
    SqlCandidate,
)
from src.llm.prompts import PromptRole, parse_rating, render_prompt
from src.orchestration.pipeline_state import RunContext
from src.tools.sql_guardrail import column_owners, parse_statement, table_aliases

logger = logging.getLogger(__name__)

_NUMBER_WORDS = (
    "a|an|one|two|three|four|five|six|seven|eight|nine|ten|eleven|twelve|"
    "fourteen|thirty|ninety|few|several|couple of"
)
PAST_WINDOW = re.compile(
    rf"\b(?:last|past|previous|prior|trailing)\s+(?:(?:\d+|{_NUMBER_WORDS})\s+)?"
    r"(?:days?|weeks?|months?|quarters?|years?)\b",
    re.IGNORECASE,
)
AGGREGATE_INTENT = re.compile(
    r"\b(?:total|totals|count|how many|sum|number of|overall|altogether)\b", re.IGNORECASE
)
_TIMESTAMP_TEXT = re.compile(
    r"^\d{4}-\d{2}-\d{2}(?:[ T]\d{2}:\d{2}(?::\d{2}(?:\.\d+)?)?)?(?:Z|[+-]\d{2}:?\d{2})?$"
)

REQUESTED_UNITS: Tuple[Tuple[str, re.Pattern], ...] = (
    ("miles", re.compile(r"\bmiles?\b", re.IGNORECASE)),
    ("km", re.compile(r"\b(?:km|kilomet(?:er|re)s?)\b", re.IGNORECASE)),
    ("hours", re.compile(r"\b(?:hours?|hrs?|hourly)\b", re.IGNORECASE)),
    ("minutes", re.compile(r"\b(?:minutes?|mins?)\b", re.IGNORECASE)),
    ("seconds", re.compile(r"\b(?:seconds?|secs?)\b", re.IGNORECASE)),
)
UNIT_ALIASES = {
    "m": "meters", "meter": "meters", "meters": "meters", "metre": "meters", "metres": "meters",
    "km": "km", "kilometer": "km", "kilometers": "km", "kilometre": "km", "kilometres": "km",
    "mi": "miles", "mile": "miles", "miles": "miles",
    "ms": "milliseconds", "millisecond": "milliseconds", "milliseconds": "milliseconds",
    "s": "seconds", "sec": "seconds", "second": "seconds", "seconds": "seconds",
    "min": "minutes", "minute": "minutes", "minutes": "minutes",
    "h": "hours", "hr": "hours", "hour": "hours", "hours": "hours",
}
UNIT_SINGULAR = {
    "meters": "meter", "km": "km", "miles": "mile", "milliseconds": "millisecond",
    "seconds": "second", "minutes": "minute", "hours": "hour",
}

_WRAPPERS = (exp.Lower, exp.Upper, exp.Trim, exp.Paren, exp.Cast)


def conversion_factors(constants: EngineConstants = DEFAULT_CONSTANTS) -> Dict[Tuple[str, str], float]:
    """Divisors that convert a stored unit into a requested unit."""
    return {
        ("meters", "miles"): constants.meters_per_mile,
        ("meters", "km"): 1000.0,
        ("km", "miles"): constants.meters_per_mile / 1000.0,
        ("milliseconds", "seconds"): 1000.0,
        ("milliseconds", "minutes"): 60000.0,
        ("milliseconds", "hours"): 3600000.0,
        ("seconds", "minutes"): 60.0,
        ("seconds", "hours"): 3600.0,
        ("minutes", "hours"): 60.0,
    }


def conversion_phrase(stored: str, requested: str, constants: EngineConstants = DEFAULT_CONSTANTS) -> str:
    """E.g. ``1609.34 meters per mile``."""
    factor = conversion_factors(constants)[(stored, requested)]
    return f"{factor:.10g} {stored} per {UNIT_SINGULAR.get(requested, requested)}"


def _normalize_unit(hint: Optional[str]) -> Optional[str]:
    if not hint:
        return None
    return UNIT_ALIASES.get(hint.strip().lower())


def _unwrap(node: exp.Expression) -> exp.Expression:
    while isinstance(node, _WRAPPERS):
        node = node.this
    return node


def _is_number_literal(node: Optional[exp.Expression]) -> bool:
    if node is None:
        return False
    node = _unwrap(node)
    return isinstance(node, exp.Literal) and not node.is_string


def _is_converted(column: exp.Column, stop: exp.Expression) -> bool:
    """True when the column is divided or multiplied by a numeric literal on its way up."""
    child: exp.Expression = column
    node = column.parent
    while node is not None:
        if isinstance(node, exp.Div) and child is node.this and _is_number_literal(node.expression):
            return True
        if isinstance(node, exp.Mul):
            other = node.expression if child is node.this else node.this
            if _is_number_literal(other):
                return True
        if node is stop:
            break
        child, node = node, node.parent
    return False


def _as_instant(value: Any) -> Optional[datetime]:
    if isinstance(value, datetime):
        return parse_instant(value)
    if isinstance(value, date):
        return parse_instant(datetime(value.year, value.month, value.day))
    if isinstance(value, str) and _TIMESTAMP_TEXT.match(value.strip()):
        try:
            return parse_instant(value.strip())
        except ValueError:
            return None
    return None


def _check_future_dates(question: Question, outcome: ExecutionOutcome) -> List[str]:
    if not PAST_WINDOW.search(question.text) or not outcome.rows:
        return []
    now = question.asked_at
    future = []
    for row in outcome.rows:
        for name, value in zip(outcome.column_names, row):
            instant = _as_instant(value)
            if instant is not None and instant > now:
                future.append((name, value))
    if not future:
        return []
    name, value = future[0]
    return [f"{len(future)} returned values are later than {format_instant(now)}, e.g. {name}={value}"]


def _check_units(
    question: Question,
    root: Optional[exp.Expression],
    catalog: SchemaCatalog,
    constants: EngineConstants,
) -> List[Tuple[str, str, str]]:
    if root is None:
        return []
    requested = [unit for unit, pattern in REQUESTED_UNITS if pattern.search(question.text)]
    if not requested:
        return []
    factors = conversion_factors(constants)
    alias_map = table_aliases(root)
    mismatches: List[Tuple[str, str, str]] = []
    for select in root.find_all(exp.Select):
        for projection in select.expressions:
            for column in projection.find_all(exp.Column):
                for owner in column_owners(column, alias_map):
                    meta = catalog.column(owner, column.name)
                    stored = _normalize_unit(meta.unit_hint) if meta else None
                    if stored is None:
                        continue
                    for target in requested:
                        if (stored, target) not in factors or _is_converted(column, projection):
                            continue
                        entry = (f"{owner.lower()}.{column.name.lower()}", stored, target)
                        if entry not in mismatches:
                            mismatches.append(entry)
    return mismatches


def _is_zero_aggregate(root: Optional[exp.Expression], outcome: ExecutionOutcome) -> bool:
    if root is None or len(outcome.rows) != 1:
        return False
    if not all(v is None or (isinstance(v, (int, float)) and v == 0) for v in outcome.rows[0]):
        return False
    select = root if isinstance(root, exp.Select) else root.find(exp.Select)
    return select is not None and any(p.find(exp.AggFunc) for p in select.expressions)


def _exact_predicates(root: exp.Expression, catalog: SchemaCatalog) -> List[Tuple[str, str]]:
    """(qualified column, rendered predicate) for exact text matches in filters."""
    alias_map = table_aliases(root)
    found: List[Tuple[str, str]] = []

    def text_columns(node: exp.Expression) -> List[str]:
        node = _unwrap(node)
        if not isinstance(node, exp.Column):
            return []
        names = []
        for owner in column_owners(node, alias_map):
            meta = catalog.column(owner, node.name)
            if meta is not None and meta.data_kind is DataKind.TEXT:
                names.append(f"{owner.lower()}.{node.name.lower()}")
        return names

    def string_literal(node: Optional[exp.Expression]) -> Optional[str]:
        if node is None:
            return None
        node = _unwrap(node)
        return node.this if isinstance(node, exp.Literal) and node.is_string else None

    for predicate in root.find_all(exp.EQ, exp.In, exp.Like, exp.ILike):
        if predicate.find_ancestor(exp.Where, exp.Having, exp.Join) is None:
            continue
        columns: List[str] = []
        if isinstance(predicate, exp.EQ):
            for side, other in ((predicate.this, predicate.expression), (predicate.expression, predicate.this)):
                if string_literal(other) is not None:
                    columns = text_columns(side)
                    if columns:
                        break
        elif isinstance(predicate, exp.In):
            values = predicate.expressions
            if values and all(string_literal(v) is not None for v in values):
                columns = text_columns(predicate.this)
        else:
            pattern = string_literal(predicate.expression)
            if pattern is not None and "%" not in pattern and "_" not in pattern:
                columns = text_columns(predicate.this)
        for name in columns:
            found.append((name, predicate.sql()))
    return found


def sanity_check(
    question: Question,
    candidate: SqlCandidate,
    outcome: ExecutionOutcome,
    catalog: SchemaCatalog,
    constants: EngineConstants = DEFAULT_CONSTANTS,
) -> SanityCheckResult:
    """
    Run the deterministic sanity checks for one executed attempt.

    ``question.asked_at`` is the reference "now" for the future-date check.

    Args:
        question: The question
        candidate: The executed candidate
        outcome: Its outcome
        catalog: Catalog with unit hints and column kinds
        constants: Engine constants (conversion factors)

    Returns:
        The raised flags with evidence; never raises
    """
    if outcome.status is OutcomeStatus.ERROR:
        return SanityCheckResult(checked_at=question.asked_at)
    try:
        root = parse_statement(candidate.sql_text)
    except Exception as e:
        logger.warning(f"Sanity check could not parse the candidate: {e}")
        root = None

    flags: Set[RatingFlag] = set()
    evidence: List[Tuple[RatingFlag, str]] = []

    for text in _check_future_dates(question, outcome):
        flags.add(RatingFlag.FUTURE_DATES_PRESENT)
        evidence.append((RatingFlag.FUTURE_DATES_PRESENT, text))

    conversions = _check_units(question, root, catalog, constants)
    for column, stored, requested in conversions:
        flags.add(RatingFlag.UNIT_MISMATCH)
        evidence.append((
            RatingFlag.UNIT_MISMATCH,
            f"{column} is stored in {stored} but the question asks for {requested}",
        ))

    predicate_columns: List[str] = []
    nothing_matched = outcome.status is OutcomeStatus.EMPTY or _is_zero_aggregate(root, outcome)
    if nothing_matched and root is not None:
        for column, predicate in _exact_predicates(root, catalog):
            flags.add(RatingFlag.EXACT_MATCH_ZERO_ROWS)
            evidence.append((RatingFlag.EXACT_MATCH_ZERO_ROWS, f"{predicate} matched nothing"))
            if column not in predicate_columns:
                predicate_columns.append(column)

    if outcome.status is OutcomeStatus.TRUNCATED and AGGREGATE_INTENT.search(question.text):
        flags.add(RatingFlag.SUSPICIOUS_AGGREGATE_TRUNCATION)
        evidence.append((
            RatingFlag.SUSPICIOUS_AGGREGATE_TRUNCATION,
            f"result truncated at {outcome.row_limit_applied} rows but the question asks for a total",
        ))

    if flags:
        logger.info(f"Sanity flags for attempt {candidate.attempt_number}: "
                    f"{', '.join(sorted(f.value for f in flags))}")
    return SanityCheckResult(
        flags=frozenset(flags),
        evidence=tuple(evidence),
        predicate_columns=tuple(predicate_columns),
        conversions=tuple(conversions),
        checked_at=question.asked_at,
    )


class RatingAgent(BaseAgent):
    """
    Rates executed attempts.

    Execution errors and empty results are rated without a provider call;
    results with rows are scored by the rate_result role and combined with
    the sanity flags.
    """
    def __init__(self, provider, accept_threshold: float = DEFAULT_CONSTANTS.accept_threshold, **kwargs):
        kwargs.setdefault("name", "Rating")
        kwargs.setdefault("description", "Scores results and raises sanity flags")
        super().__init__(provider=provider, **kwargs)
        self.accept_threshold = accept_threshold

    def rate(
        self,
        question: Question,
        candidate: SqlCandidate,
        outcome: ExecutionOutcome,
        sanity: SanityCheckResult,
        context: Optional[RunContext] = None,
    ) -> RatingReport:
        """
        Rate one attempt.

        Returns:
            accept iff the score clears the threshold and no flag is raised
        """
        if outcome.status is OutcomeStatus.ERROR:
            return RatingReport.build(
                0.0, {RatingFlag.EXECUTION_ERROR}, self.accept_threshold,
                rationale=f"execution error: {outcome.error_message}", llm_scored=False,
            )
        if outcome.status is OutcomeStatus.EMPTY:
            return RatingReport.build(
                0.0, {RatingFlag.EMPTY_RESULT} | set(sanity.flags), self.accept_threshold,
                rationale="query returned no rows", llm_scored=False,
            )

        trace = AttemptTrace(candidate, GuardrailVerdict(Decision.ALLOWED), outcome)
        prompt = render_prompt(PromptRole.RATE_RESULT, question, history=[trace])
        response = self.ask_provider(PromptRole.RATE_RESULT, prompt, context)
        score, reason, parsed = parse_rating(response.text)
        if not parsed:
            logger.warning(f"Attempt {candidate.attempt_number}: rating reply unparseable")
        report = RatingReport.build(score, sanity.flags, self.accept_threshold, rationale=reason)
        logger.info(f"Attempt {candidate.attempt_number} rated {score:.2f} -> {report.verdict.value}")
        return report
