"""
Tests for prompts, reply parsing, scenario files and providers.
"""

import sys
import unittest
from pathlib import Path

import requests

# Add the src directory to the Python path
src_dir = Path(__file__).resolve().parent.parent
if str(src_dir) not in sys.path:
    sys.path.insert(0, str(src_dir))

from src.config import ProviderConfig
from src.domain.errors import (
    ConfigError,
    ExtractionFailed,
    PreconditionViolation,
    ProviderUnavailable,
    ScenarioParseError,
    ScenarioViolation,
)
from src.domain.models import AttemptTrace, Decision, ExecutionOutcome, GuardrailVerdict, Question
from src.llm.prompts import (
    ROUTE_OUT_OF_SCOPE,
    ROUTE_T2S,
    PromptRole,
    extract_sql,
    parse_rating,
    parse_route,
    render_prompt,
)
from src.llm.providers import LiveProvider, ProviderRequest, ScriptedProvider, build_provider
from src.llm.scenarios import load_scenario, load_scenarios, parse_scenario
from src.persistence.fixtures import SCENARIO_DIR
from src.tools.sql_guardrail import classify
from tests.helpers import FIXED_NOW

SCENARIO = """\
@question: How many tracks are there?
@fixture: chinook
@deny: Chinook_Customer.Email, users.email
@expect.status: answered

# generate_sql
SELECT COUNT(*) FROM chinook_track;

# rate_result
SCORE: 0.9
REASON: counts every track

# interpret_result
There are 12 tracks.
"""


class FakeResponse:
    def __init__(self, status_code, payload=None, text=""):
        self.status_code = status_code
        self._payload = payload
        self.text = text

    def json(self):
        if self._payload is None:
            raise ValueError("no JSON body")
        return self._payload


class FakeSession:
    """Returns (or raises) the queued replies in order."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.requests.append({"url": url, "json": json, "headers": headers})
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply


def _completion(text):
    return FakeResponse(200, {"choices": [{"message": {"content": text}}]})


def _question():
    return Question("How many tracks are there?", "chinook", asked_at=FIXED_NOW)


class TestExtractSql(unittest.TestCase):
    """Pulling the statement out of provider replies."""

    def test_fenced_reply(self):
        reply = "Here is the query:\n```sql\nSELECT name FROM chinook_track;\n```\nIt lists names."
        self.assertEqual(extract_sql(reply), "SELECT name FROM chinook_track;")

    def test_leading_prose(self):
        self.assertEqual(
            extract_sql("Sure! The answer is: SELECT name FROM chinook_track;"),
            "SELECT name FROM chinook_track;",
        )

    def test_trailing_prose(self):
        reply = "SELECT name FROM chinook_track;\n\nThis query returns every track name."
        self.assertEqual(extract_sql(reply), "SELECT name FROM chinook_track;")
        self.assertEqual(extract_sql("SELECT 1; This returns one."), "SELECT 1;")

    def test_plain_sql_is_kept(self):
        sql_text = "WITH t AS (SELECT 1 AS x)\nSELECT x FROM t"
        self.assertEqual(extract_sql(sql_text), sql_text)

    def test_idempotent(self):
        for reply in (
            "Here is the query:\n```sql\nSELECT name FROM chinook_track;\n```",
            "Sure! SELECT 1;\n\nDone.",
            "SELECT COUNT(*) FROM users",
        ):
            with self.subTest(reply=reply):
                once = extract_sql(reply)
                self.assertEqual(extract_sql(once), once)

    def test_no_statement(self):
        for reply in ("", "   ", "I cannot answer that."):
            with self.subTest(reply=reply):
                with self.assertRaises(ExtractionFailed):
                    extract_sql(reply)

    def test_declining_prose_is_not_a_statement(self):
        for reply in (
            "Sorry, I cannot answer that; you could select a different question.",
            "I can't help with that. Please show me which table you mean.",
            "On second thought, I would rather not select anything.",
            "I will not delete anything, and updates are not allowed either.",
        ):
            with self.subTest(reply=reply):
                with self.assertRaises(ExtractionFailed):
                    extract_sql(reply)

    def test_lowercase_sql_after_prose(self):
        self.assertEqual(
            extract_sql("Here you go: select name, unit_price from chinook_track"),
            "select name, unit_price from chinook_track",
        )
        self.assertEqual(extract_sql("Try this: select count(*) from users;"), "select count(*) from users;")
        self.assertEqual(extract_sql("select 1"), "select 1")


class TestParseReplies(unittest.TestCase):
    """Rating and routing reply formats."""

    def test_rating_formats(self):
        self.assertEqual(parse_rating("SCORE: 0.8\nREASON: fine"), (0.8, "fine", True))
        self.assertAlmostEqual(parse_rating("SCORE: 85%")[0], 0.85)
        self.assertAlmostEqual(parse_rating("score = 7/10")[0], 0.7)

    def test_bad_ratings_score_zero(self):
        score, _, parsed = parse_rating("SCORE: 1.5\nREASON: very good")
        self.assertEqual((score, parsed), (0.0, False))
        self.assertEqual(parse_rating("looks good to me"), (0.0, "unparseable rating", False))

    def test_route(self):
        self.assertEqual(parse_route("T2S"), ROUTE_T2S)
        self.assertEqual(parse_route("This is out of scope."), ROUTE_OUT_OF_SCOPE)
        self.assertIsNone(parse_route("maybe"))


class TestRenderPrompt(unittest.TestCase):
    """Prompt templates and their preconditions."""

    def test_generate_prompt(self):
        prompt = render_prompt(PromptRole.GENERATE_SQL, _question(), "table chinook_track\n")
        self.assertIn("read-only SELECT", prompt)
        self.assertIn("Current time (UTC): 2025-04-17T12:00:00Z", prompt)
        self.assertIn("table chinook_track", prompt)
        self.assertEqual(prompt, render_prompt(PromptRole.GENERATE_SQL, _question(), "table chinook_track\n"))

    def test_correct_prompt_needs_history(self):
        with self.assertRaises(PreconditionViolation):
            render_prompt(PromptRole.CORRECT_SQL, _question(), "schema")

    def test_correct_prompt_carries_hint(self):
        trace = AttemptTrace(
            classify("SELECT genre_name FROM chinook_track"),
            GuardrailVerdict(Decision.ALLOWED),
            ExecutionOutcome.failure("no such column: genre_name"),
            correction_hint="Database error: no such column: genre_name.",
        )
        prompt = render_prompt(PromptRole.CORRECT_SQL, _question(), "schema", history=[trace])
        self.assertIn("no such column: genre_name", prompt)
        self.assertIn("Correction hint:", prompt)

    def test_interpret_prompt_needs_rows(self):
        empty = ExecutionOutcome.from_rows(("n",), [], 10)
        with self.assertRaises(PreconditionViolation):
            render_prompt(PromptRole.INTERPRET_RESULT, _question(), outcome=empty)
        outcome = ExecutionOutcome.from_rows(("tracks",), [(12,)], 10)
        prompt = render_prompt(PromptRole.INTERPRET_RESULT, _question(), outcome=outcome,
                               key_values=[("tracks", 12)])
        self.assertIn("- tracks: 12", prompt)


class TestScenarioFiles(unittest.TestCase):
    """Scenario parsing and loading."""

    def test_parse(self):
        scenario = parse_scenario(SCENARIO, "count_tracks")
        self.assertEqual(scenario.roles(), ["generate_sql", "rate_result", "interpret_result"])
        self.assertEqual(scenario.question, "How many tracks are there?")
        self.assertEqual(scenario.session_id, "count_tracks")
        self.assertEqual(scenario.denied_columns, ["chinook_customer.email", "users.email"])
        self.assertEqual(scenario.expectations(), {"status": "answered"})
        self.assertEqual(scenario.steps[1].response_text, "SCORE: 0.9\nREASON: counts every track")

    def test_unknown_role(self):
        with self.assertRaises(ScenarioParseError) as ctx:
            parse_scenario("# generate_sql\nSELECT 1;\n# summarize\nok\n", "broken")
        self.assertEqual(ctx.exception.line_number, 3)

    def test_empty_response(self):
        with self.assertRaises(ScenarioParseError):
            parse_scenario("# generate_sql\n\n# rate_result\nSCORE: 1\n", "broken")

    def test_stray_line_before_first_step(self):
        with self.assertRaises(ScenarioParseError) as ctx:
            parse_scenario("@question: hi\nhello\n# generate_sql\nSELECT 1;\n", "broken")
        self.assertEqual(ctx.exception.line_number, 2)

    def test_no_steps(self):
        with self.assertRaises(ScenarioParseError):
            parse_scenario("@question: hi\n", "broken")

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_scenario(SCENARIO_DIR / "does_not_exist.scenario")

    def test_bundled_scenarios_load(self):
        scenarios = load_scenarios(SCENARIO_DIR)
        names = [s.name for s in scenarios]
        self.assertEqual(names, sorted(names))
        self.assertIn("highest_unit_price", names)
        self.assertGreaterEqual(len(scenarios), 10)
        for scenario in scenarios:
            self.assertIn(scenario.fixture, ("chinook", "logistics"))
            self.assertEqual(scenario.roles()[0], "generate_sql")


class TestScriptedProvider(unittest.TestCase):
    """Deterministic replay of scenario steps."""

    def setUp(self):
        self.provider = ScriptedProvider(parse_scenario(SCENARIO, "count_tracks"))

    def test_replays_in_order(self):
        reply = self.provider.complete(ProviderRequest(PromptRole.GENERATE_SQL, "prompt"))
        self.assertEqual(reply.text, "SELECT COUNT(*) FROM chinook_track;")
        self.assertEqual(reply.latency_ms, 0.0)
        self.assertEqual(self.provider.remaining, 2)

    def test_role_mismatch(self):
        with self.assertRaises(ScenarioViolation):
            self.provider.complete(ProviderRequest(PromptRole.RATE_RESULT, "prompt"))

    def test_exhaustion(self):
        for role in (PromptRole.GENERATE_SQL, PromptRole.RATE_RESULT, PromptRole.INTERPRET_RESULT):
            self.provider.complete(ProviderRequest(role, "prompt"))
        with self.assertRaises(ScenarioViolation):
            self.provider.complete(ProviderRequest(PromptRole.CORRECT_SQL, "prompt"))
        self.assertEqual(self.provider.call_count, 4)

    def test_truncation(self):
        reply = self.provider.complete(ProviderRequest(PromptRole.GENERATE_SQL, "prompt", max_output=6))
        self.assertEqual(reply.text, "SELECT")
        self.assertTrue(reply.truncated)

    def test_build_from_config(self):
        config = ProviderConfig(kind="scripted", scenario_path=str(SCENARIO_DIR / "highest_unit_price.scenario"))
        provider = build_provider(config)
        self.assertIsInstance(provider, ScriptedProvider)
        self.assertEqual(provider.scenario.name, "highest_unit_price")


class TestLiveProvider(unittest.TestCase):
    """HTTP provider retries and failure mapping."""

    def provider(self, replies):
        self.sleeps = []
        self.session = FakeSession(replies)
        return LiveProvider("http://llm.local/v1/", "test-model", api_key="secret",
                            session=self.session, sleep=self.sleeps.append)

    def test_transient_errors_are_retried(self):
        provider = self.provider([FakeResponse(429), FakeResponse(503), _completion("SELECT 1;")])
        reply = provider.complete(ProviderRequest(PromptRole.GENERATE_SQL, "prompt"))
        self.assertEqual(reply.text, "SELECT 1;")
        self.assertEqual(len(provider.transport_log), 3)
        self.assertEqual(len(self.sleeps), 2)
        request = self.session.requests[0]
        self.assertEqual(request["url"], "http://llm.local/v1/chat/completions")
        self.assertEqual(request["headers"]["Authorization"], "Bearer secret")
        self.assertEqual(request["json"]["model"], "test-model")

    def test_unreachable(self):
        provider = self.provider([requests.ConnectionError("refused")] * 3)
        with self.assertRaises(ProviderUnavailable):
            provider.complete(ProviderRequest(PromptRole.GENERATE_SQL, "prompt"))
        self.assertEqual(len(provider.transport_log), 3)

    def test_client_error_is_not_retried(self):
        provider = self.provider([FakeResponse(401, text="bad key")])
        with self.assertRaises(ProviderUnavailable):
            provider.complete(ProviderRequest(PromptRole.GENERATE_SQL, "prompt"))
        self.assertEqual(len(self.session.requests), 1)

    def test_malformed_reply(self):
        provider = self.provider([FakeResponse(200, {"unexpected": True})])
        with self.assertRaises(ProviderUnavailable):
            provider.complete(ProviderRequest(PromptRole.RATE_RESULT, "prompt"))


if __name__ == "__main__":
    unittest.main()
