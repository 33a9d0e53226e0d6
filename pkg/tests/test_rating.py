"""
Tests for the sanity checks and the rating agent.
"""

import sys
import tempfile
import unittest
from pathlib import Path

# Add the src directory to the Python path
src_dir = Path(__file__).resolve().parent.parent
if str(src_dir) not in sys.path:
    sys.path.insert(0, str(src_dir))

from src.agents.rating import RatingAgent, conversion_phrase, sanity_check
from src.domain.models import ExecutionOutcome, OutcomeStatus, Question, RatingFlag, SanityCheckResult, Verdict
from src.llm.providers import ScriptedProvider
from src.llm.scenarios import parse_scenario
from src.tools.sql_guardrail import classify
from tests.helpers import FIXED_NOW, fixture_catalog, fixture_executor


def _question(text: str, datasource_id: str) -> Question:
    return Question(text, datasource_id, asked_at=FIXED_NOW)


class TestSanityChecks(unittest.TestCase):
    """Deterministic answer-quality flags."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.logistics = fixture_executor("logistics", Path(cls.tmp.name))
        cls.chinook = fixture_executor("chinook", Path(cls.tmp.name))
        cls.logistics_catalog = fixture_catalog(cls.logistics)
        cls.chinook_catalog = fixture_catalog(cls.chinook)

    @classmethod
    def tearDownClass(cls):
        cls.logistics.dispose()
        cls.chinook.dispose()
        cls.tmp.cleanup()

    def test_future_dates_in_a_past_window(self):
        question = _question("Show invoices from the last 3 months", "chinook")
        candidate = classify("SELECT invoice_id, invoice_date FROM chinook_invoice")
        outcome = ExecutionOutcome.from_rows(
            ("invoice_id", "invoice_date"),
            [(1, "2025-03-01 00:00:00"), (9, "2025-05-01 00:00:00")],
            1000,
        )
        result = sanity_check(question, candidate, outcome, self.chinook_catalog)
        self.assertEqual(result.flags, frozenset({RatingFlag.FUTURE_DATES_PRESENT}))
        self.assertIn("invoice_date=2025-05-01 00:00:00",
                      result.evidence_for(RatingFlag.FUTURE_DATES_PRESENT)[0])

        undated = _question("Show every invoice", "chinook")
        self.assertEqual(sanity_check(undated, candidate, outcome, self.chinook_catalog).flags, frozenset())

    def test_unit_mismatch(self):
        question = _question("What is the total distance in miles of delivered requests?", "logistics")
        outcome = ExecutionOutcome.from_rows(("total",), [(12345.0,)], 1000)

        raw = classify("SELECT SUM(distance) AS total FROM delivery_requests WHERE status = 'delivered'")
        result = sanity_check(question, raw, outcome, self.logistics_catalog)
        self.assertEqual(result.flags, frozenset({RatingFlag.UNIT_MISMATCH}))
        self.assertEqual(result.conversions, (("delivery_requests.distance", "meters", "miles"),))

        converted = classify(
            "SELECT SUM(distance / 1609.34) AS total FROM delivery_requests WHERE status = 'delivered'"
        )
        self.assertEqual(sanity_check(question, converted, outcome, self.logistics_catalog).flags, frozenset())

    def test_exact_match_that_found_nothing(self):
        question = _question("How many Hip Hop tracks are there?", "chinook")
        candidate = classify("SELECT COUNT(*) FROM chinook_track WHERE genre = 'Hip Hop'")
        outcome = ExecutionOutcome.from_rows(("count",), [(0,)], 1000)
        result = sanity_check(question, candidate, outcome, self.chinook_catalog)
        self.assertIn(RatingFlag.EXACT_MATCH_ZERO_ROWS, result.flags)
        self.assertEqual(result.predicate_columns, ("chinook_track.genre",))

        fuzzy = classify("SELECT COUNT(*) FROM chinook_track WHERE genre LIKE '%hip%hop%'")
        self.assertNotIn(RatingFlag.EXACT_MATCH_ZERO_ROWS,
                         sanity_check(question, fuzzy, outcome, self.chinook_catalog).flags)

    def test_truncated_totals(self):
        question = _question("How many tracks are there in total?", "chinook")
        candidate = classify("SELECT track_id FROM chinook_track")
        outcome = ExecutionOutcome.from_rows(("track_id",), [(1,), (2,), (3,)], 2)
        self.assertIs(outcome.status, OutcomeStatus.TRUNCATED)
        result = sanity_check(question, candidate, outcome, self.chinook_catalog)
        self.assertEqual(result.flags, frozenset({RatingFlag.SUSPICIOUS_AGGREGATE_TRUNCATION}))

    def test_errors_raise_no_flags(self):
        question = _question("Show invoices from the last 3 months", "chinook")
        candidate = classify("SELECT invoice_date FROM chinook_invoice")
        result = sanity_check(question, candidate, ExecutionOutcome.failure("boom"), self.chinook_catalog)
        self.assertEqual(result.flags, frozenset())

    def test_conversion_phrase(self):
        self.assertEqual(conversion_phrase("meters", "miles"), "1609.34 meters per mile")


class TestRatingAgent(unittest.TestCase):
    """Verdicts combine the provider score with the sanity flags."""

    def setUp(self):
        self.question = _question("Which track has the highest unit price?", "chinook")
        self.candidate = classify("SELECT name, unit_price FROM chinook_track ORDER BY unit_price DESC LIMIT 1")
        self.outcome = ExecutionOutcome.from_rows(("name", "unit_price"), [("Bohemian Rhapsody", 1.99)], 1000)

    def agent(self, reply: str) -> RatingAgent:
        return RatingAgent(ScriptedProvider(parse_scenario(f"# rate_result\n{reply}\n", "rating")))

    def test_error_and_empty_are_rated_without_a_call(self):
        agent = RatingAgent(provider=None)
        error = agent.rate(self.question, self.candidate, ExecutionOutcome.failure("boom"), SanityCheckResult())
        self.assertEqual(error.score, 0.0)
        self.assertEqual(error.flags, frozenset({RatingFlag.EXECUTION_ERROR}))

        empty = ExecutionOutcome(OutcomeStatus.EMPTY, (), ("name",))
        report = agent.rate(self.question, self.candidate, empty, SanityCheckResult())
        self.assertIs(report.verdict, Verdict.REGENERATE)
        self.assertEqual(report.flags, frozenset({RatingFlag.EMPTY_RESULT}))
        self.assertEqual(agent.call_count, 0)

    def test_accept(self):
        agent = self.agent("SCORE: 0.95\nREASON: direct answer")
        report = agent.rate(self.question, self.candidate, self.outcome, SanityCheckResult())
        self.assertIs(report.verdict, Verdict.ACCEPT)
        self.assertEqual(report.score, 0.95)
        self.assertEqual(report.rationale, "direct answer")

    def test_low_score(self):
        agent = self.agent("SCORE: 0.3\nREASON: partial")
        report = agent.rate(self.question, self.candidate, self.outcome, SanityCheckResult())
        self.assertEqual(report.flags, frozenset({RatingFlag.LOW_LLM_SCORE}))

    def test_sanity_flags_override_a_high_score(self):
        sanity = SanityCheckResult(
            flags=frozenset({RatingFlag.FUTURE_DATES_PRESENT}),
            evidence=((RatingFlag.FUTURE_DATES_PRESENT, "1 returned value is in the future"),),
        )
        report = self.agent("SCORE: 0.99\nREASON: looks right").rate(
            self.question, self.candidate, self.outcome, sanity
        )
        self.assertIs(report.verdict, Verdict.REGENERATE)
        self.assertEqual(report.flags, frozenset({RatingFlag.FUTURE_DATES_PRESENT}))


if __name__ == "__main__":
    unittest.main()
