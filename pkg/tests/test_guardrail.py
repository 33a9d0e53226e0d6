"""
Tests for the SQL guardrail: classification, enforcement and lint.
"""

import hashlib
import random
import sqlite3
import sys
import tempfile
import unittest
from pathlib import Path

# Add the src directory to the Python path
src_dir = Path(__file__).resolve().parent.parent
if str(src_dir) not in sys.path:
    sys.path.insert(0, str(src_dir))

from src.config import PolicyConfig
from src.domain.models import Classification, RefusalReason
from src.persistence.fixtures import fixture_script, run_script
from src.tools.sql_guardrail import GuardrailPolicy, classify, enforce, lint, resolve_columns
from tests.helpers import REFERENCE_LISTINGS, fixture_catalog, fixture_executor

FUZZ_CORPUS_SIZE = 10000

SHORT_QUERIES = [
    "SELECT COUNT(*) FROM delivery_requests",
    "SELECT id, status FROM delivery_requests WHERE status = 'created'",
    "SELECT name FROM regions ORDER BY name",
    "SELECT a.name, r.name FROM accounts a JOIN regions r ON a.region_id = r.id",
    "SELECT genre, COUNT(*) FROM chinook_track GROUP BY genre",
    "SELECT billing_country, SUM(total) FROM chinook_invoice GROUP BY billing_country",
    "WITH t AS (SELECT track_id FROM chinook_invoice_line) SELECT COUNT(*) FROM t",
    "SELECT full_name FROM users UNION SELECT name FROM accounts",
]

BENIGN = [
    "{q}",
    "/* report */ {q}",
    "{q} -- done",
]

INJECTIONS = [
    "{q}; DELETE FROM {t}",
    "{q}; DROP TABLE {t}",
    "{q}; UPDATE {t} SET {c} = NULL",
    "{q}; INSERT INTO {t} SELECT * FROM {t}",
    "{q}; REPLACE INTO {t} SELECT * FROM {t}",
    "{q}; CREATE TABLE pwned AS SELECT 1 AS x",
    "{q}; ALTER TABLE {t} ADD COLUMN pwned INTEGER",
    "{q}; PRAGMA writable_schema = ON",
    "{q}; VACUUM",
    "{q} /* hidden */; DELETE FROM {t}",
    "{q} -- trailing comment\n; DELETE FROM {t}",
    "{q};\n/* ; */ DELETE FROM {t} --",
    "{q}; DELETE FROM {t} WHERE 1 = 1; SELECT 1",
    "{q}\n;\n\nUPDATE {t} SET {c} = {c}",
    "{q} FOR UPDATE",
    "DELETE FROM {t}; {q}",
    "UPDATE {t} SET {c} = NULL; {q}",
    "DROP TABLE {t}; {q}",
    "/* {q} */ DELETE FROM {t}",
    "DELETE FROM {t} WHERE {c} IN ({q})",
    "INSERT INTO {t} ({c}) {q}",
    "WITH d AS (DELETE FROM {t} RETURNING *) SELECT * FROM d",
    "CREATE TABLE copy_{t} AS {q}",
    "UPDATE {t} SET {c} = NULL WHERE EXISTS ({q})",
]

# table -> a column that exists in it
WRITE_TARGETS = {
    "delivery_requests": "status",
    "users": "email",
    "regions": "name",
    "chinook_track": "genre",
    "chinook_invoice": "total",
}


def _mangle_case(text: str, rng: random.Random) -> str:
    mode = rng.randrange(4)
    if mode == 0:
        return text
    if mode == 1:
        return text.lower()
    if mode == 2:
        return text.upper()
    return "".join(ch.upper() if rng.random() < 0.5 else ch.lower() for ch in text)


def _decorate(text: str, rng: random.Random) -> str:
    text = _mangle_case(text, rng)
    if rng.random() < 0.3:
        text = text.replace(" ", "  \n ", rng.randrange(1, 4))
    if rng.random() < 0.5:
        text += ";"
    if rng.random() < 0.2:
        text = "\n  " + text + "\n"
    return text


def build_fuzz_corpus(size: int = FUZZ_CORPUS_SIZE, seed: int = 20250417):
    rng = random.Random(seed)
    bases = [q.strip().rstrip(";") for q in REFERENCE_LISTINGS] + SHORT_QUERIES
    corpus = set()
    while len(corpus) < size:
        table = rng.choice(sorted(WRITE_TARGETS))
        templates = BENIGN if rng.random() < 0.1 else INJECTIONS
        statement = rng.choice(templates).format(q=rng.choice(bases), t=table, c=WRITE_TARGETS[table])
        corpus.add(_decorate(statement, rng))
    return sorted(corpus)


def database_checksum(connection: sqlite3.Connection) -> str:
    digest = hashlib.sha256()
    schema = connection.execute(
        "SELECT type, name, COALESCE(sql, '') FROM sqlite_master ORDER BY type, name"
    ).fetchall()
    digest.update(repr(schema).encode("utf-8"))
    for kind, name, _ in schema:
        if kind != "table":
            continue
        rows = connection.execute(f'SELECT * FROM "{name}"').fetchall()
        digest.update(repr(sorted(rows, key=repr)).encode("utf-8"))
    return digest.hexdigest()


class TestClassification(unittest.TestCase):
    """Parse classification of candidate statements."""

    def test_reference_listings_classify_as_single_select(self):
        for sql_text in REFERENCE_LISTINGS:
            with self.subTest(sql=sql_text[:40]):
                candidate = classify(sql_text)
                self.assertIs(candidate.classification, Classification.SINGLE_SELECT, candidate.parse_detail)

    def test_write_and_ddl(self):
        self.assertIs(classify("DELETE FROM users").classification, Classification.WRITE)
        self.assertIs(classify("UPDATE users SET email = NULL").classification, Classification.WRITE)
        self.assertIs(classify("DROP TABLE users").classification, Classification.DDL)
        self.assertIs(classify("SELECT 1; SELECT 2").classification, Classification.MULTI_STATEMENT)

    def test_unparseable(self):
        self.assertIs(classify("").classification, Classification.UNPARSEABLE)
        self.assertIs(classify("SELECT (1 +").classification, Classification.UNPARSEABLE)

    def test_cte_and_references(self):
        candidate = classify(
            "WITH t AS (SELECT id, status FROM delivery_requests) SELECT status FROM t"
        )
        self.assertTrue(candidate.uses_ctes)
        self.assertEqual(candidate.referenced_tables, frozenset({"delivery_requests"}))
        self.assertIn("delivery_requests.status", candidate.referenced_columns)

    def test_aliases_resolve_to_tables(self):
        candidate = classify("SELECT u.email FROM users AS u")
        self.assertIn("users.email", candidate.referenced_columns)


class TestEnforcement(unittest.TestCase):
    """Policy enforcement against fixture catalogs."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.logistics = fixture_executor("logistics", Path(cls.tmp.name))
        cls.catalog = fixture_catalog(cls.logistics, denied=["users.email"])

    @classmethod
    def tearDownClass(cls):
        cls.logistics.dispose()
        cls.tmp.cleanup()

    def verdict(self, sql_text, policy=None, catalog=None):
        return enforce(classify(sql_text), policy or GuardrailPolicy(), catalog)

    def test_reference_listings_allowed_with_empty_deny_list(self):
        for sql_text in REFERENCE_LISTINGS:
            with self.subTest(sql=sql_text[:40]):
                verdict = self.verdict(sql_text)
                self.assertTrue(verdict.allowed, verdict.reason_text)

    def test_refusal_precedence(self):
        policy = GuardrailPolicy(max_statement_length=50)
        self.assertIs(self.verdict("SELECT " + "x, " * 40 + "y FROM t", policy).refusal_reason,
                      RefusalReason.TOO_LONG)
        self.assertIs(self.verdict("SELECT 1; DELETE FROM users").refusal_reason,
                      RefusalReason.MULTI_STATEMENT)
        self.assertIs(self.verdict("DELETE FROM users").refusal_reason, RefusalReason.WRITE_DETECTED)
        self.assertIs(self.verdict("DROP TABLE users").refusal_reason, RefusalReason.DDL_DETECTED)
        self.assertIs(self.verdict("SELECT * FROM users FOR UPDATE").refusal_reason,
                      RefusalReason.LOCKING_CLAUSE)
        self.assertIs(self.verdict("SELECT load_extension('x')").refusal_reason,
                      RefusalReason.DENIED_FUNCTION)

    def test_denied_column_qualified_and_unqualified(self):
        for sql_text in (
            "SELECT email FROM users",
            "SELECT u.email FROM users u",
            "SELECT * FROM users",
            "SELECT full_name FROM users WHERE email LIKE '%@example.com'",
            "WITH x AS (SELECT email AS contact FROM users) SELECT contact FROM x",
        ):
            with self.subTest(sql=sql_text):
                verdict = self.verdict(sql_text, catalog=self.catalog)
                self.assertIs(verdict.refusal_reason, RefusalReason.UNAUTHORIZED_COLUMN)
                self.assertEqual(verdict.offending, ("users.email",))

    def test_other_columns_allowed(self):
        verdict = self.verdict("SELECT full_name, created_at FROM users", catalog=self.catalog)
        self.assertTrue(verdict.allowed)

    def test_policy_from_config(self):
        policy = GuardrailPolicy.from_config(PolicyConfig(denied_columns=["Users.Email"], allow_ctes=False))
        self.assertIn("users.email", policy.denied_columns)
        verdict = self.verdict("WITH t AS (SELECT 1 AS x) SELECT x FROM t", policy)
        self.assertIs(verdict.refusal_reason, RefusalReason.NOT_SELECT)

    def test_disabled_enforcement_allows_everything(self):
        verdict = self.verdict("DELETE FROM users", GuardrailPolicy().without_enforcement())
        self.assertTrue(verdict.allowed)

    def test_resolve_columns_reports_ambiguity(self):
        resolution = resolve_columns(["id"], self.catalog, ["users", "accounts"])
        self.assertIn("id", resolution.unresolved)
        self.assertEqual(set(resolution.ambiguous["id"]), {"accounts.id", "users.id"})

    def test_lint_report(self):
        report = lint("UPDATE users SET email = NULL")
        self.assertEqual(report["decision"], "refused")
        self.assertEqual(report["classification"], "write")
        self.assertEqual(report["reason"], "write_detected")


class TestGuardrailSoundness(unittest.TestCase):
    """No allowed statement may change a writable copy of the fixtures."""

    def test_fuzz_corpus_never_changes_the_database(self):
        corpus = build_fuzz_corpus()
        self.assertGreaterEqual(len(corpus), FUZZ_CORPUS_SIZE)

        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "writable.db"
            run_script(path, fixture_script("chinook"))
            run_script(path, fixture_script("logistics"))
            connection = sqlite3.connect(str(path), isolation_level=None)
            try:
                baseline = database_checksum(connection)
                policy = GuardrailPolicy()
                allowed = 0
                for sql_text in corpus:
                    if not enforce(classify(sql_text), policy).allowed:
                        continue
                    allowed += 1
                    try:
                        connection.executescript(sql_text)
                    except sqlite3.Error:
                        pass
                    self.assertEqual(database_checksum(connection), baseline,
                                     f"allowed statement changed the database: {sql_text!r}")
            finally:
                connection.close()
        self.assertGreater(allowed, 0)
        self.assertLess(allowed, len(corpus))


if __name__ == "__main__":
    unittest.main()
