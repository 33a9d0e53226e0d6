"""
Main entry point for the sqlsentinel query engine.
"""

import logging
import sys
from pathlib import Path
from typing import List, Optional

# Add the project root to the Python path
root_dir = Path(__file__).resolve().parent.parent
if str(root_dir) not in sys.path:
    sys.path.insert(0, str(root_dir))

from src.config import LOG_FILE, LOG_FORMAT, LOG_LEVEL

logger = logging.getLogger(__name__)


def configure_logging(level: Optional[str] = None) -> None:
    """Log to the log file and stderr; stdout stays free for command output."""
    LOG_FILE.parent.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(LOG_FILE),
            logging.StreamHandler(sys.stderr),
        ],
    )


def main(argv: Optional[List[str]] = None) -> int:
    """
    Configure logging and dispatch to the command-line interface.
    """
    configure_logging()
    from src.ui.cli import main as cli_main

    logger.info("Starting sqlsentinel")
    try:
        return cli_main(argv)
    except Exception as e:
        logger.error(f"Unhandled error: {e}", exc_info=True)
        return 5


if __name__ == "__main__":
    sys.exit(main())
