"""
SQL generation agent: turns a question plus schema context into a candidate
statement, or a corrected statement when earlier attempts exist.
"""

import logging
from typing import Optional, Sequence

from src.agents.base_agent import BaseAgent
from src.domain.errors import ExtractionFailed
from src.domain.models import AttemptTrace, Classification, Question, SqlCandidate
from src.llm.prompts import PromptRole, extract_sql, render_prompt
from src.orchestration.pipeline_state import RunContext
from src.tools.sql_guardrail import classify

logger = logging.getLogger(__name__)


class SqlGeneratorAgent(BaseAgent):
    """Generates and corrects SQL candidates."""
    def __init__(self, provider, **kwargs):
        kwargs.setdefault("name", "SqlGenerator")
        kwargs.setdefault("description", "Generates one read-only SELECT statement per attempt")
        super().__init__(provider=provider, **kwargs)

    def generate(
        self,
        question: Question,
        schema_text: str,
        history: Sequence[AttemptTrace],
        attempt_number: int,
        context: Optional[RunContext] = None,
    ) -> SqlCandidate:
        """
        Produce the candidate for one attempt.

        The first attempt uses the generate_sql role, later attempts the
        correct_sql role with the full history. A reply without SQL becomes
        an unparseable candidate so the guardrail refuses it and the attempt
        is consumed.

        Args:
            question: The question
            schema_text: Rendered schema context
            history: Earlier attempts of this run
            attempt_number: Number of the attempt being generated
            context: Run context

        Returns:
            The classified candidate
        """
        role = PromptRole.CORRECT_SQL if history else PromptRole.GENERATE_SQL
        prompt = render_prompt(role, question, schema_text, history)
        response = self.ask_provider(role, prompt, context)
        try:
            sql_text = extract_sql(response.text)
        except ExtractionFailed as e:
            logger.warning(f"Attempt {attempt_number}: {e.message}")
            return SqlCandidate(
                sql_text=response.text.strip() or "<empty reply>",
                attempt_number=attempt_number,
                classification=Classification.UNPARSEABLE,
                parse_detail=f"extraction failed: {e.message}",
            )
        candidate = classify(sql_text, attempt_number)
        logger.info(f"Attempt {attempt_number}: generated {candidate.classification.value} candidate")
        return candidate
