"""
Schema retrieval: introspection, relevance ranking and prompt rendering.

The catalog is introspected once per datasource and is immutable. Ranking
is a deterministic lexical overlap score so identical questions always
produce byte-identical prompt schema blocks.
"""

import logging
import re
from dataclasses import dataclass
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from sqlalchemy import inspect, types as sqltypes
from sqlalchemy.exc import SQLAlchemyError

from src.domain.clock import Clock, utc_now
from src.domain.constants import PROMPT_SCHEMA_BUDGET, SAMPLE_VALUE_LIMIT
from src.domain.errors import (
    ColumnNotFound,
    DatasourceUnavailable,
    PreconditionViolation,
    RankingUnavailable,
)
from src.domain.models import (
    ColumnMeta,
    DataKind,
    ForeignKey,
    OutcomeStatus,
    Question,
    SchemaCatalog,
    TableMeta,
)
from src.tools.sql_executor import SqlExecutorTool
from src.tools.sql_guardrail import GuardrailPolicy, classify, enforce

logger = logging.getLogger(__name__)

TABLE_NAME_WEIGHT = 3.0
COLUMN_NAME_WEIGHT = 2.0
DESCRIPTION_WEIGHT = 1.0
NEIGHBOR_BONUS = 0.5

INTROSPECTABLE_KINDS = frozenset({DataKind.TEXT, DataKind.INTEGER, DataKind.BOOLEAN})

STOPWORDS = frozenset({
    "a", "an", "the", "of", "in", "on", "at", "by", "per", "with", "for", "to", "from",
    "and", "or", "is", "are", "was", "were", "be", "been", "do", "does", "did", "what",
    "which", "who", "whom", "how", "many", "much", "me", "my", "our", "show", "list",
    "give", "tell", "each", "every", "all", "that", "this", "these", "those", "there",
    "their", "its", "it", "as", "i", "we", "you", "have", "has", "had",
})

_CAMEL_BOUNDARY = re.compile(r"([a-z0-9])([A-Z])")
_WORD = re.compile(r"[a-z]+|[0-9]+")


def fold_plural(token: str) -> str:
    """Fold an English plural to its singular form (``deliveries`` -> ``delivery``)."""
    if len(token) <= 3 or token.isdigit():
        return token
    if token.endswith("ies") and len(token) > 4:
        return token[:-3] + "y"
    if token.endswith("sses"):
        return token[:-2]
    if token.endswith(("ss", "us", "is")):
        return token
    if token.endswith("s"):
        return token[:-1]
    return token


def tokenize(text: Optional[str]) -> List[str]:
    """
    Normalize text into scoring tokens.

    Lowercases, splits snake_case and camelCase, folds plurals and drops
    stopwords. Order is preserved; duplicates are kept.
    """
    if not text:
        return []
    spaced = _CAMEL_BOUNDARY.sub(r"\1 \2", text).lower()
    return [fold_plural(word) for word in _WORD.findall(spaced) if word not in STOPWORDS]


def _data_kind(column_type: Any) -> DataKind:
    if isinstance(column_type, sqltypes.Boolean):
        return DataKind.BOOLEAN
    if isinstance(column_type, sqltypes.Integer):
        return DataKind.INTEGER
    if isinstance(column_type, sqltypes.Numeric):
        return DataKind.DECIMAL
    if isinstance(column_type, (sqltypes.DateTime, sqltypes.Date)):
        return DataKind.TIMESTAMP
    if isinstance(column_type, sqltypes.String):
        return DataKind.TEXT
    return DataKind.OTHER


def _quote(identifier: str) -> str:
    return '"' + identifier.replace('"', '""') + '"'


def introspect(
    executor: SqlExecutorTool,
    denied_columns: Iterable[str] = (),
    clock: Optional[Clock] = None,
) -> SchemaCatalog:
    """
    Introspect a datasource into a SchemaCatalog.

    Args:
        executor: Executor bound to the datasource
        denied_columns: Fully-qualified columns the policy denies
        clock: Clock used for ``snapshot_at``

    Returns:
        The catalog, with exact row counts

    Raises:
        DatasourceUnavailable: when the datasource cannot be reached
    """
    clock = clock or executor.clock or utc_now
    try:
        inspector = inspect(executor.engine)
        tables = []
        foreign_keys = []
        with executor.engine.connect() as connection:
            for table_name in sorted(inspector.get_table_names()):
                columns = tuple(
                    ColumnMeta(
                        name=column["name"],
                        data_kind=_data_kind(column["type"]),
                        nullable=bool(column.get("nullable", True)),
                    )
                    for column in inspector.get_columns(table_name)
                )
                row_count = connection.exec_driver_sql(
                    f"SELECT COUNT(*) FROM {_quote(table_name)}"
                ).scalar()
                tables.append(TableMeta(table_name, columns, row_count_estimate=int(row_count or 0)))
                for fk in inspector.get_foreign_keys(table_name):
                    for column, ref_column in zip(fk["constrained_columns"], fk["referred_columns"]):
                        foreign_keys.append(ForeignKey(table_name, column, fk["referred_table"], ref_column))
            connection.rollback()
    except SQLAlchemyError as e:
        logger.error(f"Introspection of {executor.datasource_id} failed: {e}")
        raise DatasourceUnavailable(
            f"datasource {executor.datasource_id} is unavailable",
            {"datasource_id": executor.datasource_id, "error": str(getattr(e, "orig", e))},
        ) from e

    catalog = SchemaCatalog(
        datasource_id=executor.datasource_id,
        tables=tuple(tables),
        foreign_keys=tuple(foreign_keys),
        denied_columns=frozenset(denied_columns),
        snapshot_at=clock(),
    )
    logger.info(
        f"Introspected {executor.datasource_id}: {len(tables)} tables, {len(foreign_keys)} foreign keys"
    )
    return catalog


def annotate(
    catalog: SchemaCatalog,
    unit_hints: Optional[Mapping[str, str]] = None,
    descriptions: Optional[Mapping[str, str]] = None,
    column_descriptions: Optional[Mapping[str, str]] = None,
) -> SchemaCatalog:
    """
    Merge configured unit hints and descriptions into a catalog.

    Keys of ``unit_hints`` and ``column_descriptions`` are ``table.column``;
    keys of ``descriptions`` are table names. Unknown keys are logged and skipped.
    """
    unit_hints = {k.lower(): v for k, v in (unit_hints or {}).items()}
    column_descriptions = {k.lower(): v for k, v in (column_descriptions or {}).items()}
    descriptions = {k.lower(): v for k, v in (descriptions or {}).items()}

    known = {f"{t.name.lower()}.{c.name.lower()}" for t in catalog.tables for c in t.columns}
    for key in sorted((set(unit_hints) | set(column_descriptions)) - known):
        logger.warning(f"Annotation for unknown column {key} in {catalog.datasource_id} ignored")

    tables = []
    for table in catalog.tables:
        columns = []
        for column in table.columns:
            key = f"{table.name.lower()}.{column.name.lower()}"
            columns.append(ColumnMeta(
                name=column.name,
                data_kind=column.data_kind,
                nullable=column.nullable,
                unit_hint=unit_hints.get(key, column.unit_hint),
                sampled_values=column.sampled_values,
                description=column_descriptions.get(key, column.description),
            ))
        tables.append(TableMeta(
            table.name,
            tuple(columns),
            table.row_count_estimate,
            descriptions.get(table.name.lower(), table.description),
        ))
    return SchemaCatalog(
        datasource_id=catalog.datasource_id,
        tables=tuple(tables),
        foreign_keys=catalog.foreign_keys,
        denied_columns=catalog.denied_columns,
        snapshot_at=catalog.snapshot_at,
    )


def render_table_block(table: TableMeta, catalog: SchemaCatalog) -> str:
    """
    Render one table as prompt text.

    The block is a header line, one line per column and one line per
    foreign key owned by the table; it always ends with a newline.
    """
    header = f"table {table.name}"
    if table.description:
        header += f"  -- {table.description}"
    lines = [header]
    for column in table.columns:
        line = f"  {column.name} {column.data_kind.value}"
        if column.nullable:
            line += " nullable"
        if column.unit_hint:
            line += f" unit: {column.unit_hint}"
        if column.sampled_values is not None:
            line += " values: " + ", ".join(str(v) for v in column.sampled_values)
        lines.append(line)
    for fk in catalog.foreign_keys:
        if fk.table.lower() == table.name.lower():
            lines.append(f"  {fk.render()}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RelevanceRanking:
    """
    Tables ranked by relevance to a question plus the budget-fitting selection.
    """
    scored_tables: Tuple[Tuple[str, float], ...]
    selected: Tuple[str, ...]
    blocks: Tuple[str, ...]
    budget: int = PROMPT_SCHEMA_BUDGET

    def __post_init__(self):
        if len(self.selected) != len(self.blocks):
            raise PreconditionViolation("every selected table needs exactly one rendered block")
        if sum(len(b) for b in self.blocks) > self.budget:
            raise PreconditionViolation("selected schema exceeds the prompt budget")

    @property
    def rendered_schema_text(self) -> str:
        return "".join(self.blocks)

    def score_of(self, table_name: str) -> Optional[float]:
        for name, score in self.scored_tables:
            if name == table_name:
                return score
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scored_tables": [[name, score] for name, score in self.scored_tables],
            "selected": list(self.selected),
            "rendered_schema_text": self.rendered_schema_text,
            "budget": self.budget,
        }


def score_tables(question_text: str, catalog: SchemaCatalog) -> List[Tuple[str, float]]:
    """
    Score every catalog table against the question.

    Returns:
        ``(table_name, score)`` pairs sorted by descending score, then name
    """
    query = set(tokenize(question_text))
    scores: Dict[str, float] = {}
    for table in catalog.tables:
        score = TABLE_NAME_WEIGHT * len(query & set(tokenize(table.name)))
        score += COLUMN_NAME_WEIGHT * sum(len(query & set(tokenize(c.name))) for c in table.columns)
        score += DESCRIPTION_WEIGHT * len(query & set(tokenize(table.description)))
        scores[table.name] = score

    lowered = {name.lower(): name for name in scores}
    positive = {name.lower() for name, score in scores.items() if score > 0}
    neighbors = set()
    for fk in catalog.foreign_keys:
        source, target = fk.table.lower(), fk.ref_table.lower()
        if source in positive and target not in positive:
            neighbors.add(target)
        if target in positive and source not in positive:
            neighbors.add(source)
    for name in neighbors:
        if name in lowered:
            scores[lowered[name]] += NEIGHBOR_BONUS

    return sorted(scores.items(), key=lambda item: (-item[1], item[0]))


def select_within_budget(block_lengths: Sequence[int], budget: int) -> List[int]:
    """Greedily take blocks in order, skipping any block that would overflow the budget."""
    chosen = []
    used = 0
    for index, length in enumerate(block_lengths):
        if used + length <= budget:
            chosen.append(index)
            used += length
    return chosen


def rank_relevance(
    question: Question,
    catalog: SchemaCatalog,
    budget: int = PROMPT_SCHEMA_BUDGET,
) -> RelevanceRanking:
    """
    Rank catalog tables for a question and select those that fit the budget.

    Args:
        question: The question being answered
        catalog: The datasource catalog
        budget: Maximum rendered schema length in characters

    Returns:
        RelevanceRanking

    Raises:
        RankingUnavailable: when the catalog has no tables
    """
    if not catalog.tables:
        raise RankingUnavailable(f"catalog {catalog.datasource_id} has no tables to rank")
    scored = score_tables(question.text, catalog)
    rendered = [render_table_block(catalog.table(name), catalog) for name, _ in scored]
    chosen = select_within_budget([len(block) for block in rendered], budget)
    ranking = RelevanceRanking(
        scored_tables=tuple(scored),
        selected=tuple(scored[i][0] for i in chosen),
        blocks=tuple(rendered[i] for i in chosen),
        budget=budget,
    )
    logger.debug(f"Ranked {len(scored)} tables, selected {list(ranking.selected)}")
    return ranking


def render_schema_prompt(ranking: RelevanceRanking) -> str:
    """
    Render the selected tables as the prompt schema block.

    Raises:
        PreconditionViolation: when nothing fits the budget
    """
    if not ranking.selected:
        raise PreconditionViolation(
            f"no table fits the prompt schema budget of {ranking.budget} characters"
        )
    return ranking.rendered_schema_text


def value_sample_sql(table_name: str, column_name: str, limit: int = SAMPLE_VALUE_LIMIT) -> str:
    """The statement that samples the distinct values of one column."""
    return (
        f"SELECT DISTINCT {_quote(column_name)} FROM {_quote(table_name)} "
        f"WHERE {_quote(column_name)} IS NOT NULL ORDER BY {_quote(column_name)} LIMIT {int(limit)}"
    )


def introspect_values(
    catalog: SchemaCatalog,
    table: str,
    column: str,
    executor: SqlExecutorTool,
    policy: Optional[GuardrailPolicy] = None,
    limit: int = SAMPLE_VALUE_LIMIT,
) -> SchemaCatalog:
    """
    Sample the distinct values of one column.

    The sampling statement passes through the guardrail like any other
    query. A column that already carries sampled values is returned as is.

    Args:
        catalog: Current catalog snapshot
        table: Table name
        column: Column name
        executor: Executor bound to the catalog's datasource
        policy: Guardrail policy applied to the sampling statement
        limit: Maximum number of values

    Returns:
        A new catalog whose column carries ``sampled_values``

    Raises:
        ColumnNotFound: when the column does not exist
        PreconditionViolation: for non-categorical columns or a refused statement
        DatasourceUnavailable: when the statement fails
    """
    meta = catalog.column(table, column)
    if meta is None:
        raise ColumnNotFound(f"column {table}.{column} does not exist", {"table": table, "column": column})
    if meta.data_kind not in INTROSPECTABLE_KINDS:
        raise PreconditionViolation(
            f"column {table}.{column} of kind {meta.data_kind.value} cannot be sampled"
        )
    if meta.sampled_values is not None:
        return catalog

    table_name = catalog.table(table).name
    sql_text = value_sample_sql(table_name, meta.name, limit)
    verdict = enforce(classify(sql_text), policy or GuardrailPolicy(), catalog)
    if not verdict.allowed:
        raise PreconditionViolation(
            f"value introspection of {table}.{column} refused: {verdict.reason_text}",
            verdict.to_dict(),
        )

    outcome = executor.execute(sql_text)
    if outcome.status is OutcomeStatus.ERROR:
        raise DatasourceUnavailable(
            f"value introspection of {table}.{column} failed: {outcome.error_message}",
            {"table": table, "column": column},
        )
    values = []
    for row in outcome.rows:
        if row[0] not in values:
            values.append(row[0])
    logger.info(f"Sampled {len(values)} values of {table_name}.{meta.name}")
    return catalog.with_column(table_name, ColumnMeta(
        name=meta.name,
        data_kind=meta.data_kind,
        nullable=meta.nullable,
        unit_hint=meta.unit_hint,
        sampled_values=tuple(values[:limit]),
        description=meta.description,
    ))


def sampled_columns(catalog: SchemaCatalog) -> FrozenSet[str]:
    """Qualified names of the columns that carry sampled values."""
    return frozenset(
        f"{t.name.lower()}.{c.name.lower()}"
        for t in catalog.tables
        for c in t.columns
        if c.sampled_values is not None
    )
