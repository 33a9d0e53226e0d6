"""
Shared builders for the test suite: fixture catalogs, configs and the
reference SELECT listings used by the guardrail and executor tests.
"""

import sys
import textwrap
from pathlib import Path
from typing import Dict, List, Optional

import yaml

src_dir = Path(__file__).resolve().parent.parent
if str(src_dir) not in sys.path:
    sys.path.insert(0, str(src_dir))

from src.config import DatasourceConfig, EngineConfig, parse_config
from src.domain.clock import ManualClock
from src.domain.models import SchemaCatalog
from src.persistence.fixtures import SCENARIO_DIR, build_fixture, default_annotations
from src.tools.schema_retrieval import annotate, introspect
from src.tools.sql_executor import SqlExecutorTool

FIXED_NOW = "2025-04-17T12:00:00Z"

# Production-style SELECT listings; every one must pass the guardrail.
REFERENCE_LISTINGS: List[str] = [
    textwrap.dedent("""\
        WITH monthly_deliveries AS (
          SELECT DATE_TRUNC('month', created_at) AS month,
                 status,
                 COUNT(*)                        AS delivery_count
          FROM   delivery_requests
          WHERE  created_at >= NOW() - INTERVAL '18 months'
            AND  created_at <= NOW()
            AND  status IS NOT NULL
          GROUP  BY DATE_TRUNC('month', created_at), status
        )
        SELECT TO_CHAR(month,'YYYY-MM') AS month,
               status,
               delivery_count
        FROM   monthly_deliveries
        ORDER  BY month DESC, status;"""),
    textwrap.dedent("""\
        WITH channel_counts AS (
          SELECT
            COALESCE(how_did_you_hear,'Not Specified') AS channel,
            COUNT(*)                                     AS driver_count,
            COUNT(*) * 100.0 /
              (SELECT COUNT(*) FROM driver_details)   AS percentage
          FROM driver_details
          GROUP BY how_did_you_hear
          ORDER BY driver_count DESC
        )
        SELECT channel,
               driver_count,
               ROUND(percentage,2) AS percentage
        FROM   channel_counts;"""),
    textwrap.dedent("""\
        WITH region_metrics AS (
          SELECT
            r.name                                       AS region_name,
            SUM(dr.fee_total_calculated/1000)            AS total_revenue_dollars,
            SUM(dr.distance / 1609.34)                   AS total_distance_miles,
            CASE
              WHEN SUM(dr.distance / 1609.34) = 0
              THEN 0
              ELSE SUM(dr.fee_total_calculated/1000) /
                   SUM(dr.distance / 1609.34)
            END                                          AS revenue_per_mile
          FROM delivery_requests dr
          JOIN accounts          a ON dr.account_id = a.id
          JOIN regions           r ON a.region_id   = r.id
          WHERE dr.created_at >= CURRENT_DATE - INTERVAL '3 months'
            AND dr.status IN ('delivered','completed','DELIVERED','COMPLETED')
          GROUP BY r.name
          HAVING SUM(dr.distance) > 0
        )
        SELECT region_name,
               ROUND(total_revenue_dollars,2),
               ROUND(total_distance_miles,2),
               ROUND(revenue_per_mile,2) AS dollars_per_mile
        FROM   region_metrics
        ORDER  BY revenue_per_mile DESC
        LIMIT 10;"""),
    textwrap.dedent("""\
        -- identical query with a narrative explanation
        SELECT name, unit_price
        FROM   chinook_track
        ORDER  BY unit_price DESC
        LIMIT 1;"""),
    textwrap.dedent("""\
        SELECT COUNT(*) AS hip_hop_track_count
        FROM   chinook_track
        WHERE  LOWER(genre) LIKE '%hip%hop%'
           OR  LOWER(genre) LIKE '%hip-hop%'
           OR  LOWER(genre) LIKE '%rap%';"""),
    textwrap.dedent("""\
        SELECT
          i.invoice_id,
          i.customer_id,
          i.invoice_date,
          i.total,
          c.first_name || ' ' || c.last_name AS customer_name,
          il.track_id,
          t.name                             AS track_name,
          il.unit_price,
          il.quantity,
          (il.unit_price * il.quantity)      AS line_total
        FROM  chinook_invoice      i
        JOIN  chinook_customer     c  ON i.customer_id = c.customer_id
        JOIN  chinook_invoice_line il ON i.invoice_id  = il.invoice_id
        LEFT JOIN chinook_track    t  ON il.track_id   = t.track_id
        WHERE i.invoice_date BETWEEN '2025-01-17' AND '2025-04-17'
        ORDER BY i.invoice_date DESC, i.invoice_id;"""),
    textwrap.dedent("""\
        SELECT
          users.invitation_token,
          ( COUNT(users.id) * 100.0 /
            (SELECT COUNT(*) FROM payload_catalog.public.users)
          ) AS percentage
        FROM payload_catalog.public.users
        GROUP BY users.invitation_token;"""),
    textwrap.dedent("""\
        SELECT DATE_TRUNC('month', invoice_date) AS month,
               SUM(total)                        AS total_sales
        FROM   chinook_invoice
        WHERE  invoice_date >= (CURRENT_TIMESTAMP - INTERVAL '3 months')
        GROUP  BY month
        ORDER  BY month DESC;"""),
]


def fixture_datasource(name: str, workdir: Path, **overrides) -> DatasourceConfig:
    """Build a fixture database under ``workdir`` and describe it as a datasource."""
    database = build_fixture(name, Path(workdir) / f"{name}.db")
    return DatasourceConfig(id=name, connection=str(database), fixture=name, **overrides)


def fixture_executor(name: str, workdir: Path, clock: Optional[ManualClock] = None,
                     **overrides) -> SqlExecutorTool:
    return SqlExecutorTool(fixture_datasource(name, workdir, **overrides), clock=clock or ManualClock(FIXED_NOW))


def fixture_catalog(executor: SqlExecutorTool, denied: Optional[List[str]] = None) -> SchemaCatalog:
    """Introspected catalog annotated with the fixture's unit hints."""
    unit_hints, descriptions = default_annotations(executor.config.fixture)
    catalog = annotate(introspect(executor), unit_hints, descriptions)
    return catalog.with_denied_columns(denied or [])


def scenario_text(name: str) -> str:
    return (SCENARIO_DIR / f"{name}.scenario").read_text(encoding="utf-8")


def config_document(workdir: Path, scenario_path: str, fixtures=("chinook", "logistics"),
                    denied: Optional[List[str]] = None, **extra) -> Dict:
    """Config document with the given fixtures, a scripted provider and a journal under ``workdir``."""
    document: Dict = {
        "datasources": [
            {"id": name, "connection": str(Path(workdir) / f"{name}.db"), "fixture": name}
            for name in fixtures
        ],
        "provider": {"kind": "scripted", "scenario_path": str(scenario_path)},
        "policy": {"denied_columns": denied or []},
        "audit": {"backend": "journal", "journal_path": str(Path(workdir) / "audit.jsonl")},
        "fixed_now": FIXED_NOW,
    }
    document.update(extra)
    return document


def engine_config(workdir: Path, scenario_path: str, fixtures=("chinook", "logistics"),
                  denied: Optional[List[str]] = None, **extra) -> EngineConfig:
    return parse_config(config_document(workdir, scenario_path, fixtures, denied, **extra))


def write_config(workdir: Path, scenario_path: str, **kwargs) -> Path:
    """Write a config document as ``sentinel.yaml`` under ``workdir``."""
    path = Path(workdir) / "sentinel.yaml"
    path.write_text(yaml.safe_dump(config_document(workdir, scenario_path, **kwargs)), encoding="utf-8")
    return path
