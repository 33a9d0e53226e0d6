"""
Result interpretation agent.

Extracts key values (row count, extrema, trend) from a result table and asks
the provider for a short narrative. Narratives are checked so they never
quote a number that is absent from the data; offending narratives are
replaced by a deterministic template.
"""

import logging
import re
from dataclasses import dataclass
from datetime import date, datetime
from decimal import Decimal
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.agents.base_agent import BaseAgent
from src.domain.errors import PreconditionViolation, ProviderUnavailable
from src.domain.models import ExecutionOutcome, Question, Verbosity, to_jsonable
from src.llm.prompts import PromptRole, render_prompt
from src.orchestration.pipeline_state import RunContext

logger = logging.getLogger(__name__)

NO_ROWS_NARRATIVE = "Query returned no matching rows."
TREND_EPSILON = 1e-9
NUMERIC_TOKEN = re.compile(r"\d+(?:\.\d+)?")
_TIME_TEXT = re.compile(r"^\d{4}-\d{2}(?:-\d{2})?(?:[ T]\d{2}:\d{2}(?::\d{2}(?:\.\d+)?)?)?$")


@dataclass(frozen=True)
class KeyValueExtract:
    total_rows: int
    leading_row_summary: str
    extrema: Optional[Tuple[str, Any, Any]] = None
    trend: Optional[str] = None
    time_column: Optional[str] = None

    def key_values(self) -> Tuple[Tuple[str, Any], ...]:
        pairs: List[Tuple[str, Any]] = [("total_rows", self.total_rows)]
        if self.extrema is not None:
            column, low, high = self.extrema
            pairs.append((f"min {column}", low))
            pairs.append((f"max {column}", high))
        if self.trend is not None:
            pairs.append(("trend", self.trend))
        pairs.append(("top_row", self.leading_row_summary))
        return tuple(pairs)

    def to_dict(self):
        return {
            "total_rows": self.total_rows,
            "extrema": to_jsonable(self.extrema),
            "leading_row_summary": self.leading_row_summary,
            "trend": self.trend,
            "time_column": self.time_column,
        }


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float, Decimal)) and not isinstance(value, bool)


def _display(value: Any) -> str:
    if value is None:
        return "NULL"
    return str(to_jsonable(value))


def _is_identifier(name: str) -> bool:
    lowered = name.lower()
    return lowered == "id" or lowered.endswith("_id")


def _as_time(series: pd.Series) -> Optional[pd.Series]:
    values = series.dropna()
    if values.empty:
        return None
    if all(isinstance(v, (datetime, date)) for v in values):
        return pd.to_datetime(values.map(lambda v: v.isoformat()), errors="coerce")
    if not all(isinstance(v, str) and _TIME_TEXT.match(v) for v in values):
        return None
    padded = values.map(lambda v: v + "-01" if len(v) == 7 else v)
    parsed = pd.to_datetime(padded, errors="coerce")
    return None if parsed.isna().any() else parsed


def extract_key_values(outcome: ExecutionOutcome) -> KeyValueExtract:
    """
    Extract key values from a result with rows.

    Args:
        outcome: An outcome with status rows or truncated

    Returns:
        The extract; identical outcomes give identical extracts

    Raises:
        PreconditionViolation: for outcomes without rows
    """
    if not outcome.has_rows:
        raise PreconditionViolation("key values need a result with rows")

    names = list(outcome.column_names)
    frame = pd.DataFrame([list(r) for r in outcome.rows], columns=range(len(names)), dtype=object)
    summary = ", ".join(f"{name}={_display(value)}" for name, value in zip(names, outcome.rows[0]))

    numeric: List[int] = []
    time_index: Optional[int] = None
    times: Optional[pd.Series] = None
    for i, name in enumerate(names):
        column = frame.iloc[:, i]
        non_null = column.dropna()
        if not non_null.empty and all(_is_number(v) for v in non_null):
            if not _is_identifier(name):
                numeric.append(i)
        elif time_index is None:
            parsed = _as_time(column)
            if parsed is not None:
                time_index, times = i, parsed

    extrema = None
    trend = None
    if numeric:
        index = numeric[-1]
        values = frame.iloc[:, index].dropna()
        low, high = min(values), max(values)
        extrema = (names[index], low, high)

        if times is not None and len(outcome.rows) >= 3:
            paired = pd.DataFrame({"t": times, "y": pd.to_numeric(frame.iloc[:, index], errors="coerce")})
            paired = paired.dropna().sort_values("t")
            if len(paired) >= 3 and paired["t"].nunique() >= 2:
                x = (paired["t"] - paired["t"].min()).dt.total_seconds().to_numpy() / 86400.0
                y = paired["y"].to_numpy(dtype=float)
                slope = float(np.polyfit(x, y, 1)[0])
                value_range = float(y.max() - y.min())
                if value_range == 0.0 or abs(slope) <= TREND_EPSILON * value_range:
                    trend = "flat"
                else:
                    trend = "rising" if slope > 0 else "falling"

    return KeyValueExtract(
        total_rows=len(outcome.rows),
        leading_row_summary=summary,
        extrema=extrema,
        trend=trend,
        time_column=names[time_index] if time_index is not None and trend is not None else None,
    )


def _numbers_in(value: Any) -> List[float]:
    if value is None or isinstance(value, bool):
        return []
    if _is_number(value):
        return [abs(float(value))]
    return [float(token) for token in NUMERIC_TOKEN.findall(_display(value))]


def supplied_numbers(extract: KeyValueExtract, outcome: ExecutionOutcome) -> List[float]:
    """Every number a narrative may quote: result cells plus extracted key values."""
    numbers: List[float] = [float(extract.total_rows)]
    for _, value in extract.key_values():
        numbers.extend(_numbers_in(value))
    for row in outcome.rows:
        for value in row:
            numbers.extend(_numbers_in(value))
    return numbers


def unsupported_numbers(narrative: str, supplied: Sequence[float]) -> List[str]:
    """
    Numeric tokens of the narrative that match no supplied value.

    A token matches a value that equals it once rounded to the token's
    own number of decimals.
    """
    unsupported = []
    for token in NUMERIC_TOKEN.findall(narrative):
        decimals = len(token.partition(".")[2])
        target = float(token)
        if not any(abs(round(v, decimals) - target) < 1e-9 for v in supplied):
            unsupported.append(token)
    return unsupported


def fallback_narrative(extract: KeyValueExtract) -> str:
    plural = "" if extract.total_rows == 1 else "s"
    return f"Query returned {extract.total_rows} row{plural}; top row: {extract.leading_row_summary}."


class InterpreterAgent(BaseAgent):
    """Writes the narrative that accompanies an accepted result."""
    def __init__(self, provider, **kwargs):
        kwargs.setdefault("name", "Interpreter")
        kwargs.setdefault("description", "Summarizes result tables in plain language")
        super().__init__(provider=provider, **kwargs)

    def narrate(
        self,
        question: Question,
        extract: KeyValueExtract,
        outcome: ExecutionOutcome,
        verbosity: Verbosity = Verbosity.CONCISE,
        context: Optional[RunContext] = None,
    ) -> str:
        """
        Produce the narrative for a result.

        Falls back to the deterministic template when the provider is
        unavailable, replies with nothing, or quotes numbers that are not in
        the data.
        """
        prompt = render_prompt(
            PromptRole.INTERPRET_RESULT, question, outcome=outcome,
            key_values=extract.key_values(), verbosity=verbosity,
        )
        try:
            response = self.ask_provider(PromptRole.INTERPRET_RESULT, prompt, context)
        except ProviderUnavailable as e:
            logger.warning(f"Narrative provider unavailable, using fallback: {e.message}")
            return fallback_narrative(extract)

        narrative = " ".join(response.text.split())
        if not narrative:
            return fallback_narrative(extract)
        unsupported = unsupported_numbers(narrative, supplied_numbers(extract, outcome))
        if unsupported:
            logger.warning(f"Narrative quotes numbers absent from the data ({', '.join(unsupported)}); "
                           f"using fallback")
            return fallback_narrative(extract)
        return narrative
