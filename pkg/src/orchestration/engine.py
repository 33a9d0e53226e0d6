"""
Query engine: composes datasources, catalogs, provider, policy, agents and
the audit store from an EngineConfig. Both the HTTP service and the CLI go
through QueryEngine.ask so they produce identical answers.
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from typing import Any, Dict, List, Optional, Union

from src.agents.interpreter import InterpreterAgent
from src.agents.rating import RatingAgent
from src.agents.sql_generator import SqlGeneratorAgent
from src.agents.supervisor import SupervisorAgent
from src.config import EngineConfig
from src.domain.clock import Clock, ManualClock, utc_now
from src.domain.errors import PreconditionViolation, UnknownDatasource
from src.domain.models import QueryAnswer, Question, SchemaCatalog, Verbosity
from src.llm.providers import BaseProvider, build_provider
from src.orchestration.pipeline_state import RunContext
from src.orchestration.transcript import TranscriptRouter
from src.persistence.audit_store import AuditRecord, AuditStore, build_audit_store, query_audit
from src.persistence.fixtures import default_annotations, ensure_fixture
from src.tools.schema_retrieval import annotate, introspect, rank_relevance
from src.tools.sql_executor import ProbeReport, SqlExecutorTool
from src.tools.sql_guardrail import GuardrailPolicy, lint

logger = logging.getLogger(__name__)


class QueryEngine:
    """
    Long-lived engine shared by every request.

    Catalogs are introspected lazily and cached per datasource; each call
    to ``ask`` owns one pipeline run and its RunContext.
    """
    def __init__(
        self,
        config: EngineConfig,
        provider: Optional[BaseProvider] = None,
        clock: Optional[Clock] = None,
        audit_store: Optional[AuditStore] = None,
        enforcement: bool = True,
    ):
        self.config = config
        self.clock = clock or (ManualClock(config.fixed_now) if config.fixed_now else utc_now)
        self.constants = config.constants.to_constants()
        policy = GuardrailPolicy.from_config(config.policy)
        self.policy = policy if enforcement else policy.without_enforcement()
        if not enforcement:
            logger.warning("Guardrail enforcement is disabled; use this only for negative-control replays")
        self.provider = provider or build_provider(config.provider)

        self.executors: Dict[str, SqlExecutorTool] = {}
        for datasource in config.datasources:
            ensure_fixture(datasource)
            self.executors[datasource.id] = SqlExecutorTool(
                datasource,
                clock=self.clock,
                row_limit=min(datasource.row_limit, self.constants.row_limit),
            )

        self.audit_store = audit_store or build_audit_store(
            config.audit.backend, config.audit.journal_path, config.audit.database_url, self.clock
        )
        self.router = TranscriptRouter(self.clock)

        agent_options = {
            "clock": self.clock,
            "temperature": config.provider.temperature,
            "max_output": config.provider.max_output,
        }
        self.supervisor = SupervisorAgent(
            provider=self.provider,
            generator=SqlGeneratorAgent(self.provider, **agent_options),
            rating=RatingAgent(self.provider, accept_threshold=self.constants.accept_threshold, **agent_options),
            interpreter=InterpreterAgent(self.provider, **agent_options),
            policy=self.policy,
            audit_store=self.audit_store,
            constants=self.constants,
            routing=config.routing,
            **agent_options,
        )

        self._catalogs: Dict[str, SchemaCatalog] = {}
        self._catalog_lock = threading.Lock()
        self._run_ids = itertools.count(1)
        self._run_lock = threading.Lock()
        self._in_flight = 0
        self._drained = threading.Condition()
        self._closed = False
        logger.info(f"QueryEngine initialized with datasources {list(self.executors)}")

    def __enter__(self) -> "QueryEngine":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.shutdown()

    # Datasources

    def executor(self, datasource_id: Optional[str] = None) -> SqlExecutorTool:
        wanted = datasource_id or self.config.default_datasource_id
        executor = self.executors.get(wanted)
        if executor is None:
            raise UnknownDatasource(f"unknown datasource {wanted}", {"available": sorted(self.executors)})
        return executor

    def catalog(self, datasource_id: Optional[str] = None) -> SchemaCatalog:
        """
        The annotated catalog of a datasource, introspected on first use.

        Raises:
            UnknownDatasource: for an unregistered datasource id
            DatasourceUnavailable: when introspection fails
        """
        executor = self.executor(datasource_id)
        with self._catalog_lock:
            cached = self._catalogs.get(executor.datasource_id)
            if cached is not None:
                return cached
            datasource = self.config.datasource(executor.datasource_id)
            unit_hints, descriptions = default_annotations(datasource.fixture)
            unit_hints.update(datasource.unit_hints())
            descriptions.update(datasource.descriptions)
            catalog = annotate(introspect(executor, clock=self.clock), unit_hints, descriptions,
                               datasource.column_descriptions())
            known = {f"{t.name.lower()}.{c.name.lower()}" for t in catalog.tables for c in t.columns}
            catalog = catalog.with_denied_columns(sorted(self.policy.denied_columns & known))
            self._catalogs[executor.datasource_id] = catalog
            return catalog

    def startup(self) -> List[ProbeReport]:
        """
        Probe every datasource for read-only enforcement.

        Raises:
            ReadOnlyViolation: when any datasource accepts a write
        """
        return [executor.ensure_readonly() for executor in self.executors.values()]

    # Requests

    def _next_run_id(self) -> int:
        with self._run_lock:
            return next(self._run_ids)

    @contextmanager
    def _track(self):
        with self._drained:
            if self._closed:
                raise PreconditionViolation("engine is shutting down")
            self._in_flight += 1
        try:
            yield
        finally:
            with self._drained:
                self._in_flight -= 1
                self._drained.notify_all()

    def ask(
        self,
        text: str,
        datasource_id: Optional[str] = None,
        verbosity: Optional[Union[str, Verbosity]] = None,
        session_id: Optional[str] = None,
    ) -> QueryAnswer:
        """
        Answer one question.

        Args:
            text: Natural-language question
            datasource_id: Target datasource, defaults to the first configured
            verbosity: concise or detailed, defaults to the config value
            session_id: Session the audit records are filed under

        Returns:
            QueryAnswer

        Raises:
            OutOfScope: when the router rejects the question
            UnknownDatasource: for an unregistered datasource id
            DatasourceUnavailable, ProviderUnavailable, AuditStorageError: infrastructure failures
        """
        with self._track():
            executor = self.executor(datasource_id)
            run_id = self._next_run_id()
            session = session_id or f"session-{run_id}"
            question = Question(text, executor.datasource_id, asked_at=self.clock(), session_id=session)
            chosen = verbosity if isinstance(verbosity, Verbosity) else Verbosity(verbosity or self.config.verbosity)
            context = RunContext(run_id, session, self.router)
            logger.info(f"Run {run_id} ({session}) on {executor.datasource_id}: {question.text}")
            return self.supervisor.handle(question, self.catalog(executor.datasource_id), executor,
                                          context, chosen)

    def lint(self, sql_text: str, datasource_id: Optional[str] = None) -> Dict[str, Any]:
        """Guardrail report for a statement; never executes it."""
        return lint(sql_text, self.policy, self.catalog(datasource_id))

    def schema(self, datasource_id: Optional[str] = None) -> Dict[str, Any]:
        return self.catalog(datasource_id).to_dict()

    def rank(self, text: str, datasource_id: Optional[str] = None) -> Dict[str, Any]:
        """Relevance ranking of the catalog tables for a question; nothing is generated or executed."""
        catalog = self.catalog(datasource_id)
        question = Question(text, catalog.datasource_id, asked_at=self.clock())
        document = rank_relevance(question, catalog, self.constants.prompt_schema_budget).to_dict()
        document["datasource_id"] = catalog.datasource_id
        document["question"] = question.text
        return document

    def audit(self, **filters) -> List[AuditRecord]:
        return query_audit(self.audit_store, **filters)

    def health(self) -> Dict[str, Any]:
        supervisor = self.supervisor
        agents = (supervisor, supervisor.generator, supervisor.rating, supervisor.interpreter)
        return {
            "status": "shutting_down" if self._closed else "ok",
            "datasources": sorted(self.executors),
            "executors": {ds: executor.get_status() for ds, executor in sorted(self.executors.items())},
            "agents": [agent.get_status() for agent in agents],
            "provider": self.provider.get_status(),
            "in_flight": self._in_flight,
        }

    def shutdown(self, timeout: Optional[float] = 30.0) -> None:
        """Refuse new requests, wait for in-flight pipelines and release resources."""
        with self._drained:
            if self._closed:
                return
            self._closed = True
            if not self._drained.wait_for(lambda: self._in_flight == 0, timeout=timeout):
                logger.warning(f"Shutdown timed out with {self._in_flight} pipeline(s) in flight")
        for executor in self.executors.values():
            executor.dispose()
        self.audit_store.close()
        logger.info("QueryEngine shut down")
