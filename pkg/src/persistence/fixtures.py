"""
Reference fixture databases.

Fixtures are SQLite files built from the schema + seed scripts under
``fixtures/sql``. Each fixture also ships default annotations (unit hints
and table descriptions) that are merged into the introspected catalog.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from sqlalchemy import create_engine
from sqlalchemy.pool import NullPool

from src.config import FIXTURES_DIR, DatasourceConfig
from src.domain.errors import ConfigError

logger = logging.getLogger(__name__)

SQL_DIR = FIXTURES_DIR / "sql"
SCENARIO_DIR = FIXTURES_DIR / "scenarios"

FIXTURE_UNIT_HINTS: Dict[str, Dict[str, str]] = {
    "chinook": {
        "chinook_track.milliseconds": "milliseconds",
    },
    "logistics": {
        "delivery_requests.distance": "meters",
        "delivery_requests.fee_total_calculated": "thousandths",
    },
}

FIXTURE_DESCRIPTIONS: Dict[str, Dict[str, str]] = {
    "chinook": {
        "chinook_track": "Music tracks with genre and price",
        "chinook_customer": "Store customers and their country",
        "chinook_invoice": "Customer invoices with billing date and total",
        "chinook_invoice_line": "Tracks and quantities on each invoice",
    },
    "logistics": {
        "delivery_requests": "Delivery jobs with status, fee income and distance travelled",
        "accounts": "Customer accounts",
        "regions": "Sales regions",
        "driver_details": "Driver onboarding details",
        "users": "Platform users",
    },
}


def fixture_names() -> List[str]:
    """Names of the fixtures that have a seed script."""
    return sorted(p.stem for p in SQL_DIR.glob("*.sql"))


def fixture_script(name: str) -> str:
    path = SQL_DIR / f"{name}.sql"
    if not path.is_file():
        raise ConfigError(f"unknown fixture {name}", {"available": fixture_names()})
    return path.read_text(encoding="utf-8")


def run_script(path: Union[str, Path], script: str) -> None:
    """Execute a multi-statement SQL script against a (new or existing) SQLite file."""
    engine = create_engine(f"sqlite:///{Path(path)}", poolclass=NullPool)
    try:
        raw = engine.raw_connection()
        try:
            raw.executescript(script)
            raw.commit()
        finally:
            raw.close()
    finally:
        engine.dispose()


def build_fixture(name: str, path: Union[str, Path], overwrite: bool = True) -> Path:
    """
    Build a fixture database file.

    Args:
        name: Fixture name (``chinook`` or ``logistics``)
        path: Target SQLite file
        overwrite: Replace an existing file

    Returns:
        The path of the built database
    """
    path = Path(path)
    script = fixture_script(name)
    if path.exists():
        if not overwrite:
            return path
        path.unlink()
    path.parent.mkdir(parents=True, exist_ok=True)
    run_script(path, script)
    logger.info(f"Built fixture {name} at {path}")
    return path


def ensure_fixture(datasource: DatasourceConfig) -> Optional[Path]:
    """Build the configured fixture when the datasource file does not exist yet."""
    if not datasource.fixture or not datasource.is_sqlite_file:
        return None
    return build_fixture(datasource.fixture, datasource.connection, overwrite=False)


def default_annotations(name: Optional[str]) -> Tuple[Dict[str, str], Dict[str, str]]:
    """Unit hints and table descriptions shipped with a fixture."""
    if not name:
        return {}, {}
    return dict(FIXTURE_UNIT_HINTS.get(name, {})), dict(FIXTURE_DESCRIPTIONS.get(name, {}))
