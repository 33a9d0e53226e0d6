"""
Read-only SQL guardrail.

Candidate statements are parsed into an AST, classified, and checked
against a column/function policy. Only a single read-only SELECT (CTEs and
set operations allowed) that touches no denied column or function passes.
Classification and enforcement never raise: every input maps to a verdict.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

import sqlglot
from sqlglot import exp
from sqlglot.tokens import TokenType

from src.config import PolicyConfig
from src.domain.models import (
    Classification,
    Decision,
    GuardrailVerdict,
    RefusalReason,
    SchemaCatalog,
    SqlCandidate,
)

logger = logging.getLogger(__name__)

# The executor's dialect is tried first; the fallback accepts warehouse-style listings.
PARSE_DIALECTS = ("sqlite", "postgres")

DEFAULT_DENIED_FUNCTIONS = frozenset({
    "load_extension",
    "readfile",
    "writefile",
    "edit",
    "fts3_tokenizer",
    "sqlite_offset",
    "pg_read_file",
    "pg_read_binary_file",
    "pg_ls_dir",
    "pg_sleep",
    "pg_terminate_backend",
    "lo_import",
    "lo_export",
    "dblink",
    "dblink_exec",
})


def _optional_exp(name: str) -> Optional[type]:
    candidate = getattr(exp, name, None)
    if isinstance(candidate, type) and issubclass(candidate, exp.Expression):
        return candidate
    return None


def _exp_types(*names: str) -> Tuple[type, ...]:
    return tuple(t for t in (_optional_exp(n) for n in names) if t is not None)


def _token_types(*names: str) -> FrozenSet[TokenType]:
    return frozenset(getattr(TokenType, n) for n in names if hasattr(TokenType, n))


_QUERY_TYPES = _exp_types("Query", "Select", "Union", "Intersect", "Except", "Subquery")
_SET_OPERATION_TYPES = _exp_types("Union", "Intersect", "Except")
_WRITE_TYPES = _exp_types("Insert", "Update", "Delete", "Merge", "Into")
_DDL_TYPES = _exp_types(
    "Create", "Drop", "Alter", "AlterTable", "TruncateTable", "Command", "Pragma",
    "Grant", "Revoke", "Copy", "Attach", "Detach", "Set", "Transaction", "Commit",
    "Rollback", "LoadData", "Analyze", "Use",
)

_WRITE_TOKENS = _token_types("INSERT", "UPDATE", "DELETE", "MERGE", "UPSERT")
_DDL_TOKENS = _token_types(
    "CREATE", "DROP", "ALTER", "TRUNCATE", "ATTACH", "DETACH", "PRAGMA", "GRANT",
    "REVOKE", "COMMAND", "VACUUM",
)


@dataclass(frozen=True)
class GuardrailPolicy:
    """
    Column and function policy applied to every candidate.

    Names are normalized to lowercase. ``enforcement`` exists only for
    negative-control replays; production configs cannot turn it off.
    """
    allow_ctes: bool = True
    allow_set_operations: bool = True
    denied_columns: FrozenSet[str] = frozenset()
    denied_functions: FrozenSet[str] = DEFAULT_DENIED_FUNCTIONS
    max_statement_length: int = 20000
    enforcement: bool = True

    def __post_init__(self):
        object.__setattr__(self, "denied_columns", frozenset(c.lower() for c in self.denied_columns))
        object.__setattr__(self, "denied_functions", frozenset(f.lower() for f in self.denied_functions))

    @classmethod
    def from_config(cls, config: PolicyConfig) -> "GuardrailPolicy":
        return cls(
            allow_ctes=config.allow_ctes,
            allow_set_operations=config.allow_set_operations,
            denied_columns=frozenset(config.denied_columns),
            denied_functions=(
                frozenset(config.denied_functions)
                if config.denied_functions is not None
                else DEFAULT_DENIED_FUNCTIONS
            ),
            max_statement_length=config.max_statement_length,
        )

    def with_denied_columns(self, denied: Iterable[str]) -> "GuardrailPolicy":
        return replace(self, denied_columns=frozenset(self.denied_columns | set(denied)))

    def without_enforcement(self) -> "GuardrailPolicy":
        return replace(self, enforcement=False)


@dataclass(frozen=True)
class ColumnResolution:
    resolved: FrozenSet[str] = frozenset()
    unresolved: Tuple[str, ...] = ()
    ambiguous: Dict[str, Tuple[str, ...]] = field(default_factory=dict)


def parse_statements(sql_text: str) -> Tuple[Optional[List[exp.Expression]], str]:
    """
    Parse SQL text with the supported dialects.

    Returns:
        The non-empty statements and the dialect that parsed them, or
        ``None`` and the last parse error
    """
    last_error = "empty statement"
    for dialect in PARSE_DIALECTS:
        try:
            statements = sqlglot.parse(sql_text, read=dialect)
        except Exception as e:  # sqlglot raises ParseError, TokenError and occasionally others
            message = str(e).strip().splitlines()
            last_error = message[0] if message else type(e).__name__
            continue
        return [s for s in statements if s is not None], dialect
    return None, last_error


def parse_statement(sql_text: str) -> Optional[exp.Expression]:
    """Return the single parsed statement, or None if the text is not exactly one statement."""
    statements, _ = parse_statements(sql_text)
    if not statements or len(statements) != 1:
        return None
    return statements[0]


def _scan_tokens(sql_text: str) -> Tuple[int, bool, bool]:
    """Tokenize as the executor's engine would: (statement count, write keyword, ddl keyword)."""
    tokens = sqlglot.tokenize(sql_text, read=PARSE_DIALECTS[0])
    statements = 0
    pending = False
    has_write = False
    has_ddl = False
    for token in tokens:
        if token.token_type == TokenType.SEMICOLON:
            if pending:
                statements += 1
            pending = False
            continue
        pending = True
        if token.token_type in _WRITE_TOKENS:
            has_write = True
        elif token.token_type in _DDL_TOKENS:
            has_ddl = True
    if pending:
        statements += 1
    return statements, has_write, has_ddl


def _scope_sources(select: exp.Select) -> List[str]:
    """Names of the tables and derived tables read directly by ``select``."""
    sources = []
    for table in select.find_all(exp.Table):
        if table.find_ancestor(exp.Select) is select and table.name:
            sources.append(table.name.lower())
    for subquery in select.find_all(exp.Subquery):
        if subquery.alias and subquery.find_ancestor(exp.Select) is select:
            sources.append(subquery.alias.lower())
    return sources


def table_aliases(root: exp.Expression) -> Dict[str, Set[str]]:
    """Map every table name and alias in ``root`` to the table names it may denote."""
    alias_map: Dict[str, Set[str]] = {}
    for table in root.find_all(exp.Table):
        name = table.name.lower()
        if not name:
            continue
        alias_map.setdefault(name, set()).add(name)
        if table.alias:
            alias_map.setdefault(table.alias.lower(), set()).add(name)
    for subquery in root.find_all(exp.Subquery):
        if subquery.alias:
            alias_map.setdefault(subquery.alias.lower(), set()).add(subquery.alias.lower())
    return alias_map


def column_owners(column: exp.Column, alias_map: Dict[str, Set[str]]) -> List[str]:
    """
    Tables a column reference may belong to.

    Qualified references resolve through ``alias_map``; unqualified ones
    resolve only when their SELECT reads from exactly one source.
    """
    qualifier = column.table.lower()
    if qualifier:
        return sorted(alias_map.get(qualifier, {qualifier}))
    select = column.find_ancestor(exp.Select)
    sources = _scope_sources(select) if select is not None else []
    return sources if len(sources) == 1 else []


def _collect_references(root: exp.Expression) -> Tuple[Set[str], Set[str], Set[str]]:
    cte_names = {cte.alias_or_name.lower() for cte in root.find_all(exp.CTE)}
    alias_map = table_aliases(root)
    physical: Set[str] = set()
    for table in root.find_all(exp.Table):
        name = table.name.lower()
        if name and (name not in cte_names or table.args.get("db")):
            physical.add(name)

    columns: Set[str] = set()
    for column in root.find_all(exp.Column):
        name = "*" if isinstance(column.this, exp.Star) else column.name.lower()
        if not name:
            continue
        owners = column_owners(column, alias_map)
        if owners:
            columns.update(f"{owner}.{name}" for owner in owners)
        else:
            columns.add(name)

    for select in root.find_all(exp.Select):
        for projection in select.expressions:
            if isinstance(projection, exp.Star):
                sources = _scope_sources(select)
                if sources:
                    columns.update(f"{source}.*" for source in sources)
                else:
                    columns.add("*")

    functions: Set[str] = set()
    for func in root.find_all(exp.Func):
        if isinstance(func, exp.Anonymous):
            functions.add(str(func.name).lower())
        else:
            functions.add(func.sql_name().lower())
    return columns, physical, functions


def _classify_root(root: exp.Expression) -> Tuple[Classification, str]:
    write = next(iter(root.find_all(*_WRITE_TYPES)), None) if _WRITE_TYPES else None
    if isinstance(root, _WRITE_TYPES) or write is not None:
        node = root if isinstance(root, _WRITE_TYPES) else write
        return Classification.WRITE, f"{type(node).__name__.upper()} statement"
    ddl = next(iter(root.find_all(*_DDL_TYPES)), None) if _DDL_TYPES else None
    if isinstance(root, _DDL_TYPES) or ddl is not None:
        node = root if isinstance(root, _DDL_TYPES) else ddl
        return Classification.DDL, f"{type(node).__name__.upper()} statement"
    if not isinstance(root, _QUERY_TYPES):
        return Classification.OTHER, f"{type(root).__name__.upper()} is not a query"
    if next(iter(root.find_all(exp.Lock)), None) is not None:
        return Classification.LOCKING_SELECT, "locking clause"
    return Classification.SINGLE_SELECT, ""


def classify(sql_text: str, attempt_number: int = 1) -> SqlCandidate:
    """
    Parse and classify one candidate statement.

    Args:
        sql_text: The candidate SQL
        attempt_number: Attempt that produced the candidate

    Returns:
        A SqlCandidate; unparseable text yields classification=unparseable
    """
    def candidate(classification: Classification, detail: str, **kwargs) -> SqlCandidate:
        return SqlCandidate(sql_text, attempt_number, classification, parse_detail=detail, **kwargs)

    if not sql_text or not sql_text.strip():
        return candidate(Classification.UNPARSEABLE, "empty statement")
    try:
        statements, dialect_or_error = parse_statements(sql_text)
        if statements is None:
            return candidate(Classification.UNPARSEABLE, dialect_or_error)
        if not statements:
            return candidate(Classification.UNPARSEABLE, "statement contains only comments")
        if len(statements) > 1:
            return candidate(Classification.MULTI_STATEMENT, f"{len(statements)} statements")

        root = statements[0]
        columns, tables, functions = _collect_references(root)
        references = dict(
            referenced_columns=frozenset(columns),
            referenced_tables=frozenset(tables),
            referenced_functions=frozenset(functions),
            uses_ctes=next(iter(root.find_all(exp.CTE)), None) is not None,
            uses_set_operations=next(iter(root.find_all(*_SET_OPERATION_TYPES)), None) is not None,
        )
        classification, detail = _classify_root(root)
        if classification is Classification.SINGLE_SELECT:
            count, has_write, has_ddl = _scan_tokens(sql_text)
            if count > 1:
                classification, detail = Classification.MULTI_STATEMENT, f"{count} statements"
            elif has_write:
                classification, detail = Classification.WRITE, "write keyword outside the parsed query"
            elif has_ddl:
                classification, detail = Classification.DDL, "ddl keyword outside the parsed query"
        return candidate(classification, detail, **references)
    except Exception as e:
        logger.warning(f"Classification failed, treating statement as unparseable: {e}")
        return candidate(Classification.UNPARSEABLE, f"classification failed: {e}")


def resolve_columns(
    referenced: Iterable[str],
    catalog: SchemaCatalog,
    from_tables: Optional[Iterable[str]] = None,
) -> ColumnResolution:
    """
    Resolve referenced column names against the catalog.

    Args:
        referenced: Names as produced by classify (``t.c``, ``c``, ``t.*`` or ``*``)
        catalog: The schema catalog
        from_tables: Tables in the statement's FROM set, defaults to every catalog table

    Returns:
        Fully-qualified resolved names plus the names that could not be resolved
    """
    scope = [t.lower() for t in (from_tables if from_tables is not None else catalog.table_names())]
    scope_tables = [catalog.table(t) for t in sorted(set(scope))]
    scope_tables = [t for t in scope_tables if t is not None]

    resolved: Set[str] = set()
    unresolved: Set[str] = set()
    ambiguous: Dict[str, Tuple[str, ...]] = {}
    for name in referenced:
        name = name.lower()
        table_name, _, column_name = name.rpartition(".")
        if name == "*":
            for table in scope_tables:
                resolved.update(f"{table.name.lower()}.{c.name.lower()}" for c in table.columns)
            continue
        if table_name:
            table = catalog.table(table_name)
            if table is None:
                unresolved.add(name)
            elif column_name == "*":
                resolved.update(f"{table.name.lower()}.{c.name.lower()}" for c in table.columns)
            elif table.column(column_name) is not None:
                resolved.add(f"{table.name.lower()}.{column_name}")
            else:
                unresolved.add(name)
            continue
        owners = [t for t in scope_tables if t.column(column_name) is not None]
        if len(owners) == 1:
            resolved.add(f"{owners[0].name.lower()}.{column_name}")
        else:
            unresolved.add(name)
            if owners:
                ambiguous[name] = tuple(f"{t.name.lower()}.{column_name}" for t in owners)
    return ColumnResolution(frozenset(resolved), tuple(sorted(unresolved)), ambiguous)


def _refuse(
    reason: RefusalReason,
    detail: str = "",
    offending: Tuple[str, ...] = (),
    candidate: Optional[SqlCandidate] = None,
) -> GuardrailVerdict:
    return GuardrailVerdict(
        Decision.REFUSED,
        reason,
        offending=offending,
        detail=detail,
        referenced_columns=candidate.referenced_columns if candidate else None,
    )


def enforce(
    candidate: SqlCandidate,
    policy: GuardrailPolicy,
    catalog: Optional[SchemaCatalog] = None,
) -> GuardrailVerdict:
    """
    Apply the policy to a classified candidate.

    Rules are checked in a fixed precedence order and the first failing rule
    names the refusal: too_long, unparseable, multi_statement, write/ddl,
    not_select, locking_clause, denied_function, unauthorized_column.

    Args:
        candidate: Classified candidate
        policy: Guardrail policy
        catalog: Catalog used to resolve unqualified columns

    Returns:
        The verdict
    """
    if not policy.enforcement:
        return GuardrailVerdict(Decision.ALLOWED, referenced_columns=candidate.referenced_columns)

    if len(candidate.sql_text) > policy.max_statement_length:
        return _refuse(
            RefusalReason.TOO_LONG,
            f"{len(candidate.sql_text)} characters exceeds {policy.max_statement_length}",
        )

    classification = candidate.classification
    if classification is Classification.UNPARSEABLE:
        return _refuse(RefusalReason.UNPARSEABLE, candidate.parse_detail)
    if classification is Classification.MULTI_STATEMENT:
        return _refuse(RefusalReason.MULTI_STATEMENT, candidate.parse_detail, candidate=candidate)
    if classification is Classification.WRITE:
        return _refuse(RefusalReason.WRITE_DETECTED, candidate.parse_detail, candidate=candidate)
    if classification is Classification.DDL:
        return _refuse(RefusalReason.DDL_DETECTED, candidate.parse_detail, candidate=candidate)
    if classification is Classification.OTHER:
        return _refuse(RefusalReason.NOT_SELECT, candidate.parse_detail, candidate=candidate)
    if candidate.uses_ctes and not policy.allow_ctes:
        return _refuse(RefusalReason.NOT_SELECT, "common table expressions are disabled", candidate=candidate)
    if candidate.uses_set_operations and not policy.allow_set_operations:
        return _refuse(RefusalReason.NOT_SELECT, "set operations are disabled", candidate=candidate)
    if classification is Classification.LOCKING_SELECT:
        return _refuse(RefusalReason.LOCKING_CLAUSE, candidate.parse_detail, candidate=candidate)

    denied_functions = sorted(candidate.referenced_functions & policy.denied_functions)
    if denied_functions:
        return _refuse(
            RefusalReason.DENIED_FUNCTION,
            f"function {denied_functions[0]} is not permitted",
            (denied_functions[0],),
            candidate,
        )

    denied_columns = set(policy.denied_columns)
    if catalog is not None:
        denied_columns |= catalog.denied_columns
    if denied_columns:
        referenced = candidate.referenced_columns or frozenset()
        hits = {name for name in referenced if name in denied_columns}
        if catalog is not None:
            resolution = resolve_columns(referenced, catalog, candidate.referenced_tables)
            hits |= resolution.resolved & denied_columns
            for owners in resolution.ambiguous.values():
                hits |= set(owners) & denied_columns
        if hits:
            names = tuple(sorted(hits))
            return _refuse(
                RefusalReason.UNAUTHORIZED_COLUMN,
                f"statement reads restricted columns: {', '.join(names)}",
                names,
                candidate,
            )

    return GuardrailVerdict(Decision.ALLOWED, referenced_columns=candidate.referenced_columns)


def lint(
    sql_text: str,
    policy: Optional[GuardrailPolicy] = None,
    catalog: Optional[SchemaCatalog] = None,
) -> Dict[str, object]:
    """Classify and enforce without executing; returns a machine-readable report."""
    candidate = classify(sql_text)
    verdict = enforce(candidate, policy or GuardrailPolicy(), catalog)
    report = verdict.to_dict()
    report["classification"] = candidate.classification.value
    report["reason"] = verdict.reason_text
    logger.debug(f"Lint verdict {report['decision']} for statement of {len(sql_text)} characters")
    return report
