"""
Tests for schema introspection, relevance ranking and value sampling.
"""

import itertools
import random
import sys
import tempfile
import unittest
from pathlib import Path

# Add the src directory to the Python path
src_dir = Path(__file__).resolve().parent.parent
if str(src_dir) not in sys.path:
    sys.path.insert(0, str(src_dir))

from src.domain.errors import ColumnNotFound, PreconditionViolation, RankingUnavailable
from src.domain.models import ColumnMeta, DataKind, ForeignKey, Question, SchemaCatalog, TableMeta
from src.tools.schema_retrieval import (
    fold_plural,
    introspect_values,
    rank_relevance,
    render_schema_prompt,
    render_table_block,
    sampled_columns,
    select_within_budget,
    tokenize,
)
from tests.helpers import FIXED_NOW, fixture_catalog, fixture_executor

VOCABULARY = [
    "order", "customer", "invoice", "track", "genre", "price", "region", "driver",
    "status", "fee", "distance", "account", "album", "artist", "payment", "shipment",
]


def _question(text: str, datasource_id: str = "logistics") -> Question:
    return Question(text, datasource_id, asked_at=FIXED_NOW)


def random_catalog(rng: random.Random) -> SchemaCatalog:
    table_count = rng.randint(1, 10)
    names = rng.sample([f"{a}_{b}" for a in VOCABULARY for b in VOCABULARY if a != b], table_count)
    tables = []
    for name in names:
        extra = rng.sample(VOCABULARY, rng.randint(0, 4))
        columns = [ColumnMeta("id", DataKind.INTEGER, nullable=False)]
        columns += [ColumnMeta(f"{word}_value", DataKind.TEXT) for word in extra]
        description = " ".join(rng.sample(VOCABULARY, rng.randint(0, 3))) or None
        tables.append(TableMeta(name, tuple(columns), rng.randint(0, 100), description))
    foreign_keys = []
    for _ in range(rng.randint(0, table_count)):
        source, target = rng.choice(names), rng.choice(names)
        if source != target:
            foreign_keys.append(ForeignKey(source, "id", target, "id"))
    return SchemaCatalog("random", tuple(tables), tuple(foreign_keys), snapshot_at=FIXED_NOW)


def expected_scores(question_text: str, catalog: SchemaCatalog):
    """Scores computed table by table: 3 per name hit, 2 per column hit, 1 per description hit."""
    query = set(tokenize(question_text))
    base = {}
    for table in catalog.tables:
        score = 3.0 * len(query & set(tokenize(table.name)))
        for column in table.columns:
            score += 2.0 * len(query & set(tokenize(column.name)))
        score += 1.0 * len(query & set(tokenize(table.description)))
        base[table.name] = score
    final = dict(base)
    for table in catalog.tables:
        if base[table.name] > 0:
            continue
        linked = [
            fk.ref_table if fk.table == table.name else fk.table
            for fk in catalog.foreign_keys
            if table.name in (fk.table, fk.ref_table)
        ]
        if any(base[other] > 0 for other in linked if other != table.name):
            final[table.name] += 0.5
    return sorted(final.items(), key=lambda item: (-item[1], item[0]))


def best_inclusion(lengths, budget):
    """Lexicographically greatest inclusion vector, in rank order, whose blocks fit the budget."""
    best = None
    for vector in itertools.product((False, True), repeat=len(lengths)):
        if sum(length for length, taken in zip(lengths, vector) if taken) > budget:
            continue
        if best is None or vector > best:
            best = vector
    return best


class TestTokenize(unittest.TestCase):
    """Question and identifier normalization."""

    def test_plural_folding(self):
        self.assertEqual(fold_plural("deliveries"), "delivery")
        self.assertEqual(fold_plural("invoices"), "invoice")
        self.assertEqual(fold_plural("status"), "status")
        self.assertEqual(fold_plural("addresses"), "address")

    def test_identifiers_split(self):
        self.assertEqual(tokenize("fee_total_calculated"), ["fee", "total", "calculated"])
        self.assertEqual(tokenize("InvoiceLine"), ["invoice", "line"])

    def test_stopwords_dropped(self):
        self.assertEqual(tokenize("How many tracks are in the catalog?"), ["track", "catalog"])


class TestRanking(unittest.TestCase):
    """Relevance ranking and budget selection."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.executor = fixture_executor("logistics", Path(cls.tmp.name))
        cls.catalog = fixture_catalog(cls.executor, denied=["users.email"])

    @classmethod
    def tearDownClass(cls):
        cls.executor.dispose()
        cls.tmp.cleanup()

    def test_fixture_ranking(self):
        ranking = rank_relevance(_question("How many deliveries per region?"), self.catalog)
        self.assertEqual(
            list(ranking.scored_tables),
            [("delivery_requests", 4.0), ("regions", 4.0), ("accounts", 2.0),
             ("driver_details", 0.5), ("users", 0.0)],
        )
        self.assertEqual(ranking.selected[:2], ("delivery_requests", "regions"))

    def test_pending_deliveries_rank_delivery_requests_first(self):
        ranking = rank_relevance(_question("pending deliveries by month"), self.catalog)
        self.assertEqual(ranking.scored_tables[0], ("delivery_requests", 4.0))
        self.assertEqual(
            list(ranking.scored_tables[1:]),
            [("accounts", 0.5), ("driver_details", 0.5), ("regions", 0.0), ("users", 0.0)],
        )

    def test_income_per_mile_by_region(self):
        ranking = rank_relevance(_question("top 10 regions with higher income per mile"), self.catalog)
        top_three = {name for name, _ in ranking.scored_tables[:3]}
        self.assertEqual(top_three, {"delivery_requests", "accounts", "regions"})
        self.assertEqual(
            list(ranking.scored_tables[:3]),
            [("regions", 4.0), ("accounts", 2.0), ("delivery_requests", 1.0)],
        )

    def test_rendering_is_deterministic(self):
        question = _question("What is the fee per mile for delivered requests?")
        first = render_schema_prompt(rank_relevance(question, self.catalog))
        second = render_schema_prompt(rank_relevance(question, self.catalog))
        self.assertEqual(first, second)
        self.assertIn("distance decimal unit: meters", first)
        self.assertIn("fee_total_calculated integer unit: thousandths", first)

    def test_budget_is_respected(self):
        question = _question("Which delivery requests are still pending?")
        block = render_table_block(self.catalog.table("delivery_requests"), self.catalog)
        ranking = rank_relevance(question, self.catalog, budget=len(block))
        self.assertEqual(ranking.selected, ("delivery_requests",))
        self.assertLessEqual(len(ranking.rendered_schema_text), len(block))

    def test_nothing_fits(self):
        ranking = rank_relevance(_question("Which users signed up?"), self.catalog, budget=0)
        self.assertEqual(ranking.selected, ())
        with self.assertRaises(PreconditionViolation):
            render_schema_prompt(ranking)

    def test_empty_catalog(self):
        with self.assertRaises(RankingUnavailable):
            rank_relevance(_question("Anything?", "empty"), SchemaCatalog("empty"))

    def test_greedy_selection_skips_overflowing_blocks(self):
        self.assertEqual(select_within_budget([50, 80, 30, 10], 100), [0, 2, 3])
        self.assertEqual(select_within_budget([120, 10], 100), [1])

    def test_random_catalogs_match_exhaustive_search(self):
        rng = random.Random(4000)
        for case in range(100):
            catalog = random_catalog(rng)
            question = " ".join(rng.sample(VOCABULARY, rng.randint(1, 4)))
            lengths = {t.name: len(render_table_block(t, catalog)) for t in catalog.tables}
            budget = rng.randint(0, sum(lengths.values()))
            with self.subTest(case=case, question=question, budget=budget):
                ranking = rank_relevance(_question(question, "random"), catalog, budget)
                expected = expected_scores(question, catalog)
                self.assertEqual(list(ranking.scored_tables), expected)

                order = [name for name, _ in expected]
                vector = best_inclusion([lengths[name] for name in order], budget)
                self.assertEqual(
                    ranking.selected,
                    tuple(name for name, taken in zip(order, vector) if taken),
                )


class TestValueIntrospection(unittest.TestCase):
    """On-demand sampling of categorical column values."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.executor = fixture_executor("logistics", Path(cls.tmp.name))
        cls.catalog = fixture_catalog(cls.executor, denied=["users.email"])

    @classmethod
    def tearDownClass(cls):
        cls.executor.dispose()
        cls.tmp.cleanup()

    def test_status_values(self):
        catalog = introspect_values(self.catalog, "delivery_requests", "status", self.executor)
        values = catalog.column("delivery_requests", "status").sampled_values
        self.assertEqual(values, ("assigned", "canceled", "created", "delivered"))
        self.assertEqual(sampled_columns(catalog), frozenset({"delivery_requests.status"}))
        self.assertIsNone(self.catalog.column("delivery_requests", "status").sampled_values)

    def test_already_sampled_is_unchanged(self):
        once = introspect_values(self.catalog, "delivery_requests", "status", self.executor)
        self.assertIs(introspect_values(once, "delivery_requests", "status", self.executor), once)

    def test_limit(self):
        catalog = introspect_values(self.catalog, "delivery_requests", "status", self.executor, limit=2)
        self.assertEqual(catalog.column("delivery_requests", "status").sampled_values, ("assigned", "canceled"))

    def test_denied_column_is_not_sampled(self):
        with self.assertRaises(PreconditionViolation):
            introspect_values(self.catalog, "users", "email", self.executor)

    def test_unknown_and_numeric_columns(self):
        with self.assertRaises(ColumnNotFound):
            introspect_values(self.catalog, "delivery_requests", "priority", self.executor)
        with self.assertRaises(PreconditionViolation):
            introspect_values(self.catalog, "delivery_requests", "distance", self.executor)


if __name__ == "__main__":
    unittest.main()
