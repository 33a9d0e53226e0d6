"""
Supervisor agent: routes questions and drives the self-correction loop.

One pipeline run is strictly sequential: generate, validate, execute, rate,
and either interpret the accepted result or regenerate with a correction
hint. Every attempt is written to the audit store before the next phase
starts; a failing store aborts the run.
"""

import logging
import re
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Set, Tuple

from src.agents.base_agent import BaseAgent
from src.agents.interpreter import NO_ROWS_NARRATIVE, InterpreterAgent, extract_key_values
from src.agents.rating import RatingAgent, conversion_phrase, sanity_check
from src.agents.sql_generator import SqlGeneratorAgent
from src.domain.constants import DEFAULT_CONSTANTS, EngineConstants
from src.domain.errors import (
    AuditStorageError,
    ColumnNotFound,
    DatasourceUnavailable,
    OutOfScope,
    PreconditionViolation,
    ProviderUnavailable,
    RankingUnavailable,
    SentinelError,
)
from src.domain.models import (
    AttemptTrace,
    ExecutionOutcome,
    FinalStatus,
    OutcomeStatus,
    Question,
    QueryAnswer,
    RatingFlag,
    RatingReport,
    RefusalReason,
    SanityCheckResult,
    SchemaCatalog,
    Verbosity,
    Verdict,
    to_jsonable,
)
from src.llm.prompts import ROUTE_T2S, PromptRole, parse_route, render_prompt
from src.orchestration.pipeline_state import Phase, PipelineState, RunContext
from src.persistence.audit_store import AuditRecord, AuditStore, RecordKind
from src.tools.schema_retrieval import (
    introspect_values,
    rank_relevance,
    render_schema_prompt,
    tokenize,
    value_sample_sql,
)
from src.tools.sql_executor import SqlExecutorTool
from src.tools.sql_guardrail import GuardrailPolicy, enforce

logger = logging.getLogger(__name__)

T2S_LANE = "t2s_lane"
OUT_OF_SCOPE_LANE = "out_of_scope"

INTERROGATIVES = re.compile(
    r"\b(?:what|which|who|whom|whose|how|when|where|list|show|give|find|display|tell|compare)\b",
    re.IGNORECASE,
)
DATA_VOCABULARY = re.compile(
    r"\b(?:how many|how much|count|counts|total|totals|sum|average|avg|mean|median|top|bottom|"
    r"highest|lowest|most|least|max|maximum|min|minimum|number of|per|ratio|percent|percentage|"
    r"trend|rank|daily|weekly|monthly|yearly|last|past|since|week|weeks|month|months|"
    r"quarter|quarters|year|years)\b|\d",
    re.IGNORECASE,
)

EXHAUSTED_NARRATIVE = (
    "No attempt met the acceptance threshold; returning the best-rated attempt for review."
)
LEGITIMATE_EMPTY_RATIONALE = "predicate values were introspected and still matched nothing"


@dataclass(frozen=True)
class RouteDecision:
    lane: str
    explanation: str
    matched_terms: Tuple[str, ...] = ()
    method: str = "heuristic"

    @property
    def in_scope(self) -> bool:
        return self.lane == T2S_LANE

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lane": self.lane,
            "explanation": self.explanation,
            "matched_terms": list(self.matched_terms),
            "method": self.method,
        }


def route_heuristic(question: Question, catalog: Optional[SchemaCatalog] = None) -> RouteDecision:
    """
    Decide the lane from data-query markers in the question text.

    A question goes to the text-to-SQL lane when it has an interrogative plus
    at least one schema term, or any aggregate, number or date vocabulary.
    """
    text = question.text
    schema_terms: Set[str] = set()
    if catalog is not None:
        for table in catalog.tables:
            schema_terms.update(tokenize(table.name))
            for column in table.columns:
                schema_terms.update(tokenize(column.name))
    overlap = sorted(set(tokenize(text)) & schema_terms)
    interrogative = INTERROGATIVES.search(text)
    vocabulary = sorted({m.group(0).lower() for m in DATA_VOCABULARY.finditer(text)})

    if interrogative and overlap:
        return RouteDecision(T2S_LANE, f"question asks about schema terms: {', '.join(overlap)}",
                             tuple(overlap))
    if vocabulary:
        return RouteDecision(T2S_LANE, f"question uses data vocabulary: {', '.join(vocabulary)}",
                             tuple(vocabulary))
    return RouteDecision(
        OUT_OF_SCOPE_LANE,
        "no data-query intent detected: the question has no aggregate, number or date "
        "vocabulary and no interrogative about known tables or columns",
    )


def _render_value(value: Any) -> str:
    return str(to_jsonable(value))


def build_correction_hint(
    trace: AttemptTrace,
    catalog: SchemaCatalog,
    constants: EngineConstants = DEFAULT_CONSTANTS,
) -> str:
    """
    Deterministic correction hint for a failed attempt.

    Sampled values are read from the catalog; the supervisor introspects the
    predicate columns before calling this.

    Args:
        trace: An attempt that was refused or executed and rated
        catalog: Catalog snapshot carrying any sampled values
        constants: Engine constants for conversion factors

    Returns:
        The hint text; identical inputs give identical text

    Raises:
        PreconditionViolation: when the trace was neither refused nor executed
    """
    verdict = trace.guardrail_verdict
    if not verdict.allowed:
        detail = f": {verdict.detail}" if verdict.detail else ""
        return (
            f"The previous statement was refused by the guardrail ({verdict.reason_text}){detail}. "
            "Write a single read-only SELECT statement; never modify data or schema."
        )
    outcome = trace.outcome
    if outcome is None:
        raise PreconditionViolation("a correction hint needs a refusal or an outcome")
    if outcome.status is OutcomeStatus.ERROR:
        return f"Database error: {outcome.error_message}. Please fix the SQL so it runs against the schema."

    sanity = trace.sanity or SanityCheckResult()
    lines: List[str] = []
    if RatingFlag.EXACT_MATCH_ZERO_ROWS in sanity.flags:
        for name in sanity.predicate_columns:
            table, _, column = name.partition(".")
            meta = catalog.column(table, column)
            if meta is not None and meta.sampled_values:
                values = ", ".join(_render_value(v) for v in meta.sampled_values)
                lines.append(f"Sampled values of {name}: {values}.")
            else:
                lines.append(f"No sampled values are available for {name}.")
        lines.append(
            "The exact-match predicate matched nothing; prefer pattern matching over exact "
            "equality (for example ILIKE '%term%') or use the sampled values."
        )
    elif outcome.status is OutcomeStatus.EMPTY:
        lines.append("The query returned no rows; relax or correct the filter predicates.")
    if RatingFlag.FUTURE_DATES_PRESENT in sanity.flags:
        lines.append(
            "The result contains rows dated after now; add a strict upper date bound of now "
            "(for example <= now())."
        )
    if RatingFlag.UNIT_MISMATCH in sanity.flags:
        for column, stored, requested in sanity.conversions:
            lines.append(
                f"{column} is stored in {stored}; apply conversion factor "
                f"{conversion_phrase(stored, requested, constants)} to report {requested}."
            )
    if RatingFlag.SUSPICIOUS_AGGREGATE_TRUNCATION in sanity.flags:
        lines.append(
            f"The result was truncated at {outcome.row_limit_applied} rows; compute the total "
            "with an aggregate in SQL instead of listing rows."
        )
    rating = trace.rating
    if rating is not None and RatingFlag.LOW_LLM_SCORE in rating.flags:
        reason = f": {rating.rationale}" if rating.rationale else ""
        lines.append(f"The result was rated {rating.score:.2f}{reason}.")
    if not lines:
        lines.append("Revise the statement so it answers the question exactly.")
    return " ".join(lines)


@dataclass
class _RunTimer:
    started: Any
    attempt_started: Any = None
    introspected: Set[str] = field(default_factory=set)


class SupervisorAgent(BaseAgent):
    """
    Routes questions and runs the bounded generate/validate/execute/rate loop.
    """
    def __init__(
        self,
        provider,
        generator: SqlGeneratorAgent,
        rating: RatingAgent,
        interpreter: InterpreterAgent,
        policy: GuardrailPolicy,
        audit_store: AuditStore,
        constants: EngineConstants = DEFAULT_CONSTANTS,
        routing: str = "heuristic",
        **kwargs,
    ):
        kwargs.setdefault("name", "Supervisor")
        kwargs.setdefault("description", "Routes questions and supervises the self-correction loop")
        super().__init__(provider=provider, **kwargs)
        self.generator = generator
        self.rating = rating
        self.interpreter = interpreter
        self.policy = policy
        self.audit_store = audit_store
        self.constants = constants
        self.routing = routing

    # Routing

    def route(
        self,
        question: Question,
        catalog: Optional[SchemaCatalog] = None,
        context: Optional[RunContext] = None,
    ) -> RouteDecision:
        """
        Route a question to the text-to-SQL lane or out of scope.

        The heuristic router is the default; ``routing="llm"`` asks the
        route_task role first and falls back to the heuristic when the reply
        is unusable or the provider is down.
        """
        if self.routing == "llm" and self.provider is not None:
            schema_text = ""
            if catalog is not None:
                try:
                    schema_text = rank_relevance(question, catalog, self.constants.prompt_schema_budget).rendered_schema_text
                except RankingUnavailable:
                    schema_text = ""
            try:
                response = self.ask_provider(
                    PromptRole.ROUTE_TASK, render_prompt(PromptRole.ROUTE_TASK, question, schema_text), context
                )
                lane = parse_route(response.text)
            except ProviderUnavailable as e:
                logger.warning(f"Router provider unavailable, using heuristic: {e.message}")
                lane = None
            if lane is not None:
                if lane == ROUTE_T2S:
                    return RouteDecision(T2S_LANE, "language model routed the question to SQL", method="llm")
                return RouteDecision(OUT_OF_SCOPE_LANE, "language model found no data-query intent",
                                     method="llm")
        return route_heuristic(question, catalog)

    def handle(
        self,
        question: Question,
        catalog: SchemaCatalog,
        executor: SqlExecutorTool,
        context: RunContext,
        verbosity: Verbosity = Verbosity.CONCISE,
    ) -> QueryAnswer:
        """
        Route a question, audit the decision and run the pipeline.

        Raises:
            OutOfScope: when the router rejects the question
            DatasourceUnavailable, ProviderUnavailable, AuditStorageError: infrastructure failures
        """
        started = self.clock()
        decision = self.route(question, catalog, context)
        self._audit(context, question, RecordKind.ROUTE, started, detail=f"{decision.lane}: {decision.explanation}")
        if not decision.in_scope:
            logger.info(f"Run {context.run_id}: question out of scope")
            raise OutOfScope(decision.explanation, decision.to_dict())
        try:
            return self.run_pipeline(question, catalog, executor, context, verbosity)
        except AuditStorageError:
            raise
        except SentinelError as e:
            logger.error(f"Run {context.run_id} aborted: {e.code}: {e.message}")
            self._audit(context, question, RecordKind.TERMINAL, started, detail=f"aborted: {e.code}: {e.message}")
            raise

    # Pipeline

    def _audit(self, context: RunContext, question: Question, kind: RecordKind, started, **fields) -> AuditRecord:
        provider_calls, executor_calls = context.take_counts()
        duration_ms = max((self.clock() - started).total_seconds() * 1000.0, 0.0)
        return self.audit_store.append(AuditRecord(
            kind=kind,
            session_id=question.session_id,
            question_text=question.text,
            run_id=context.run_id,
            datasource_id=question.datasource_id,
            duration_ms=duration_ms,
            provider_calls=provider_calls,
            executor_calls=executor_calls,
            **fields,
        ))

    def _audit_attempt(self, context: RunContext, question: Question, trace: AttemptTrace, started) -> None:
        verdict = trace.guardrail_verdict
        outcome = trace.outcome
        rating = trace.rating
        detail = verdict.detail if not verdict.allowed else ""
        if trace.sanity is not None and trace.sanity.evidence:
            detail = "; ".join(text for _, text in trace.sanity.evidence)
        self._audit(
            context, question, RecordKind.ATTEMPT, started,
            attempt_number=trace.attempt_number,
            sql_text=trace.candidate.sql_text,
            guardrail_decision=verdict.decision.value,
            refusal_reason=verdict.reason_text,
            outcome_status=outcome.status.value if outcome else None,
            error_message=outcome.error_message if outcome else None,
            row_count=len(outcome.rows) if outcome else None,
            rating_score=rating.score if rating else None,
            rating_flags=sorted(f.value for f in rating.flags) if rating else [],
            detail=detail,
        )

    def _schema_text(self, question: Question, catalog: SchemaCatalog) -> str:
        ranking = rank_relevance(question, catalog, self.constants.prompt_schema_budget)
        return render_schema_prompt(ranking)

    def _is_legitimately_empty(self, sanity: SanityCheckResult, introspected: Set[str]) -> bool:
        if RatingFlag.EXACT_MATCH_ZERO_ROWS not in sanity.flags or not sanity.predicate_columns:
            return False
        return all(name in introspected for name in sanity.predicate_columns)

    def _introspect(
        self,
        question: Question,
        sanity: SanityCheckResult,
        catalog: SchemaCatalog,
        executor: SqlExecutorTool,
        context: RunContext,
        timer: _RunTimer,
    ) -> SchemaCatalog:
        """Sample each exact-match predicate column once per run."""
        if RatingFlag.EXACT_MATCH_ZERO_ROWS not in sanity.flags:
            return catalog
        for name in sanity.predicate_columns:
            if name in timer.introspected:
                continue
            timer.introspected.add(name)
            table, _, column = name.partition(".")
            meta = catalog.column(table, column)
            if meta is None or meta.sampled_values is not None:
                continue
            started = self.clock()
            sql_text = value_sample_sql(catalog.table(table).name, meta.name, self.constants.sample_value_limit)
            try:
                catalog = introspect_values(catalog, table, column, executor, self.policy,
                                            limit=self.constants.sample_value_limit)
                status = OutcomeStatus.ROWS.value
            except (ColumnNotFound, PreconditionViolation) as e:
                logger.warning(f"Introspection of {name} skipped: {e.message}")
                continue
            except DatasourceUnavailable as e:
                logger.error(f"Introspection of {name} failed: {e.message}")
                context.executor_called("introspection", sql_text, OutcomeStatus.ERROR.value)
                self._audit(
                    context, question, RecordKind.INTROSPECTION, started,
                    attempt_number=context.attempt_number,
                    sql_text=sql_text,
                    outcome_status=OutcomeStatus.ERROR.value,
                    row_count=0,
                    detail=f"{name}: {e.message}",
                )
                raise
            context.executor_called("introspection", sql_text, status)
            sampled = catalog.column(table, column).sampled_values or ()
            self._audit(
                context, question, RecordKind.INTROSPECTION, started,
                attempt_number=context.attempt_number,
                sql_text=sql_text,
                outcome_status=status,
                row_count=len(sampled),
                detail=f"{name}: {', '.join(_render_value(v) for v in sampled)}",
            )
        return catalog

    def _refused(self, question: Question, state: PipelineState, context: RunContext,
                 verbosity: Verbosity, timer: _RunTimer) -> QueryAnswer:
        state.finish(FinalStatus.REFUSED)
        reason = state.traces[-1].guardrail_verdict.refusal_reason
        answer = QueryAnswer(
            final_status=FinalStatus.REFUSED,
            question=question,
            attempts=tuple(state.traces),
            narrative=f"The request was refused: {reason.value}.",
            verbosity=verbosity,
        )
        self._audit(context, question, RecordKind.TERMINAL, timer.started,
                    attempt_number=len(state.traces), final_status=FinalStatus.REFUSED.value,
                    refusal_reason=answer.refusal_reason, detail=answer.narrative)
        logger.info(f"Run {context.run_id}: refused ({answer.refusal_reason})")
        return answer

    def _exhausted(self, question: Question, state: PipelineState, context: RunContext,
                   verbosity: Verbosity, timer: _RunTimer) -> QueryAnswer:
        state.finish(FinalStatus.EXHAUSTED)
        best: Optional[AttemptTrace] = None
        for trace in state.traces:
            if trace.rating is not None and (best is None or trace.rating.score > best.rating.score):
                best = trace
        rows: Tuple = ()
        column_names: Tuple = ()
        key_values: Tuple = ()
        if best is not None and best.outcome.has_rows:
            rows, column_names = best.outcome.rows, best.outcome.column_names
            key_values = extract_key_values(best.outcome).key_values()
        answer = QueryAnswer(
            final_status=FinalStatus.EXHAUSTED,
            question=question,
            attempts=tuple(state.traces),
            rows=rows,
            column_names=column_names,
            narrative=EXHAUSTED_NARRATIVE,
            key_values=key_values,
            best_attempt=best.attempt_number if best is not None else None,
            verbosity=verbosity,
        )
        self._audit(context, question, RecordKind.TERMINAL, timer.started,
                    attempt_number=len(state.traces), final_status=FinalStatus.EXHAUSTED.value,
                    row_count=len(rows), detail=f"best_attempt={answer.best_attempt}")
        logger.warning(f"Run {context.run_id}: exhausted after {len(state.traces)} attempts")
        return answer

    def _answered(self, question: Question, trace: AttemptTrace, state: PipelineState,
                  context: RunContext, verbosity: Verbosity, timer: _RunTimer) -> QueryAnswer:
        state.advance(Phase.INTERPRETING)
        outcome: ExecutionOutcome = trace.outcome
        key_values: Tuple = ()
        if outcome.has_rows:
            extract = extract_key_values(outcome)
            narrative = self.interpreter.narrate(question, extract, outcome, verbosity, context)
            key_values = extract.key_values()
        else:
            narrative = NO_ROWS_NARRATIVE
        state.finish(FinalStatus.ANSWERED)
        answer = QueryAnswer(
            final_status=FinalStatus.ANSWERED,
            question=question,
            attempts=tuple(state.traces),
            rows=outcome.rows,
            column_names=outcome.column_names,
            narrative=narrative,
            key_values=key_values,
            best_attempt=trace.attempt_number,
            verbosity=verbosity,
        )
        self._audit(context, question, RecordKind.TERMINAL, timer.started,
                    attempt_number=trace.attempt_number, final_status=FinalStatus.ANSWERED.value,
                    row_count=len(outcome.rows), rating_score=trace.rating.score, detail=narrative)
        logger.info(f"Run {context.run_id}: answered after {len(state.traces)} attempt(s)")
        return answer

    def run_pipeline(
        self,
        question: Question,
        catalog: SchemaCatalog,
        executor: SqlExecutorTool,
        context: RunContext,
        verbosity: Verbosity = Verbosity.CONCISE,
    ) -> QueryAnswer:
        """
        Run the self-correction loop for a routed question.

        Args:
            question: A question routed to the text-to-SQL lane
            catalog: Catalog of the question's datasource
            executor: Executor bound to that datasource
            context: Run context for transcript events and call counts
            verbosity: Narrative verbosity

        Returns:
            QueryAnswer with final status answered, refused or exhausted

        Raises:
            DatasourceUnavailable: when the datasource cannot be reached
            ProviderUnavailable: when generation or rating cannot reach the provider
            AuditStorageError: when an audit record cannot be written
        """
        timer = _RunTimer(started=self.clock())
        state = PipelineState(self.constants.max_attempts, on_transition=context.phase_changed)
        state.advance(Phase.GENERATING)
        working = catalog

        while True:
            attempt = state.attempt_number
            timer.attempt_started = self.clock()
            candidate = self.generator.generate(
                question, self._schema_text(question, working), state.traces, attempt, context
            )
            state.advance(Phase.VALIDATING)
            verdict = enforce(candidate, self.policy, working)

            if not verdict.allowed:
                refused = AttemptTrace(candidate, verdict)
                self._audit_attempt(context, question, refused, timer.attempt_started)
                if verdict.refusal_reason is RefusalReason.UNAUTHORIZED_COLUMN:
                    state.record(refused)
                    return self._refused(question, state, context, verbosity, timer)
                state.record(AttemptTrace(candidate, verdict,
                                          correction_hint=build_correction_hint(refused, working, self.constants)))
                logger.info(f"Attempt {attempt} refused ({verdict.reason_text}); regenerating")
                if not state.attempts_left:
                    return self._exhausted(question, state, context, verbosity, timer)
                state.regenerate()
                continue

            state.advance(Phase.EXECUTING)
            outcome = executor.execute(candidate.sql_text)
            context.executor_called("attempt", candidate.sql_text, outcome.status.value)

            state.advance(Phase.RATING)
            sanity = sanity_check(question, candidate, outcome, working, self.constants)
            if self._is_legitimately_empty(sanity, timer.introspected):
                rating = RatingReport(1.0, Verdict.ACCEPT, rationale=LEGITIMATE_EMPTY_RATIONALE)
            else:
                rating = self.rating.rate(question, candidate, outcome, sanity, context)
            rated = AttemptTrace(candidate, verdict, outcome, rating, sanity=sanity)
            self._audit_attempt(context, question, rated, timer.attempt_started)

            if rating.accepted:
                state.record(rated)
                return self._answered(question, rated, state, context, verbosity, timer)

            working = self._introspect(question, sanity, working, executor, context, timer)
            hint = build_correction_hint(rated, working, self.constants)
            state.record(AttemptTrace(candidate, verdict, outcome, rating, hint, sanity))
            logger.info(f"Attempt {attempt} rated {rating.score:.2f} with flags "
                        f"{sorted(f.value for f in rating.flags)}; regenerating")
            if not state.attempts_left:
                return self._exhausted(question, state, context, verbosity, timer)
            state.regenerate()
