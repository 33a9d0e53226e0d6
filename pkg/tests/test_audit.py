"""
Tests for the append-only audit stores.
"""

import json
import sys
import tempfile
import unittest
from pathlib import Path

# Add the src directory to the Python path
src_dir = Path(__file__).resolve().parent.parent
if str(src_dir) not in sys.path:
    sys.path.insert(0, str(src_dir))

from src.domain.clock import ManualClock, parse_instant
from src.domain.errors import AuditStorageError
from src.persistence.audit_store import (
    AuditRecord,
    JournalAuditStore,
    RecordKind,
    build_audit_store,
    query_audit,
)
from src.persistence.database import SqlAuditStore
from tests.helpers import FIXED_NOW


def _record(kind: RecordKind, session_id: str = "s1", **fields) -> AuditRecord:
    return AuditRecord(kind=kind, session_id=session_id, question_text="How many tracks?", **fields)


def fill(store, clock: ManualClock):
    """Two runs: an answered one in s1 and a refused one in s2, a minute apart."""
    store.append(_record(RecordKind.ROUTE, run_id=1, detail="t2s_lane: heuristic"))
    store.append(_record(RecordKind.ATTEMPT, run_id=1, attempt_number=1, sql_text="SELECT 1",
                         guardrail_decision="allowed", outcome_status="rows", row_count=1,
                         rating_score=0.9, provider_calls=2, executor_calls=1))
    store.append(_record(RecordKind.TERMINAL, run_id=1, final_status="answered", provider_calls=1))
    clock.advance(minutes=1)
    store.append(_record(RecordKind.ROUTE, "s2", run_id=2))
    store.append(_record(RecordKind.ATTEMPT, "s2", run_id=2, attempt_number=1, sql_text="DELETE FROM t",
                         guardrail_decision="refused", refusal_reason="write_detected",
                         rating_flags=["execution_error"]))
    store.append(_record(RecordKind.TERMINAL, "s2", run_id=2, final_status="refused"))


class AuditStoreContract:
    """Behaviour shared by every store; mixed into the concrete test cases."""

    def make_store(self):
        raise NotImplementedError

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.clock = ManualClock(FIXED_NOW)
        self.store = self.make_store()

    def tearDown(self):
        self.store.close()
        self.tmp.cleanup()

    def test_ids_and_timestamps_are_assigned(self):
        fill(self.store, self.clock)
        records = self.store.records()
        self.assertEqual([r.record_id for r in records], [1, 2, 3, 4, 5, 6])
        self.assertEqual(records[0].timestamp, parse_instant(FIXED_NOW))
        self.assertEqual(records[-1].timestamp, parse_instant("2025-04-17T12:01:00Z"))

    def test_fields_survive_storage(self):
        fill(self.store, self.clock)
        attempt = self.store.records()[4]
        self.assertEqual(attempt.kind, RecordKind.ATTEMPT)
        self.assertEqual(attempt.refusal_reason, "write_detected")
        self.assertEqual(attempt.rating_flags, ["execution_error"])
        self.assertEqual(self.store.records()[1].rating_score, 0.9)

    def test_filters(self):
        fill(self.store, self.clock)
        self.assertEqual([r.record_id for r in query_audit(self.store, session_id="s2")], [4, 5, 6])
        self.assertEqual([r.record_id for r in query_audit(self.store, final_status="refused")], [6])
        self.assertEqual([r.record_id for r in query_audit(self.store, kind="route")], [1, 4])
        since = parse_instant("2025-04-17T12:00:30Z")
        self.assertEqual([r.record_id for r in query_audit(self.store, since=since)], [4, 5, 6])
        self.assertEqual([r.record_id for r in query_audit(self.store, until=since)], [1, 2, 3])
        self.assertEqual(query_audit(self.store, session_id="s2", kind="terminal")[0].final_status, "refused")


class TestJournalAuditStore(AuditStoreContract, unittest.TestCase):

    def make_store(self):
        self.path = Path(self.tmp.name) / "audit" / "audit.jsonl"
        return JournalAuditStore(self.path, clock=self.clock)

    def test_journal_lines(self):
        fill(self.store, self.clock)
        lines = self.path.read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 6)
        self.assertEqual(json.loads(lines[0])["kind"], "route")

    def test_reopening_resumes_ids(self):
        fill(self.store, self.clock)
        reopened = JournalAuditStore(self.path, clock=self.clock)
        stored = reopened.append(_record(RecordKind.ROUTE, "s3"))
        self.assertEqual(stored.record_id, 7)
        self.assertEqual(len(reopened.records()), 7)

    def test_gap_in_ids_is_detected(self):
        fill(self.store, self.clock)
        lines = self.path.read_text(encoding="utf-8").splitlines()
        del lines[2]
        self.path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with self.assertRaises(AuditStorageError):
            JournalAuditStore(self.path, clock=self.clock)

    def test_corrupt_journal(self):
        self.path.write_text("{not json\n", encoding="utf-8")
        with self.assertRaises(AuditStorageError):
            JournalAuditStore(self.path, clock=self.clock)


class TestInMemoryAuditStore(AuditStoreContract, unittest.TestCase):

    def make_store(self):
        return build_audit_store("journal", None, clock=self.clock)


class TestSqlAuditStore(AuditStoreContract, unittest.TestCase):

    def make_store(self):
        self.url = f"sqlite:///{Path(self.tmp.name) / 'audit.db'}"
        return build_audit_store("database", database_url=self.url, clock=self.clock)

    def test_reopening_resumes_ids(self):
        fill(self.store, self.clock)
        reopened = SqlAuditStore(self.url, clock=self.clock)
        try:
            self.assertEqual(reopened.append(_record(RecordKind.ROUTE, "s3")).record_id, 7)
        finally:
            reopened.close()


if __name__ == "__main__":
    unittest.main()
