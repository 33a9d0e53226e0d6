"""
Base tool class shared by the datasource-facing tools.
"""

import logging
import uuid
from abc import ABC
from typing import Any, Dict, Optional

from src.domain.clock import Clock, format_instant, utc_now

logger = logging.getLogger(__name__)


class BaseTool(ABC):
    """
    Abstract base class for tools that touch a datasource.

    Tools keep a call counter so health checks and transcripts can report
    how often they were used.
    """
    def __init__(
        self,
        tool_id: Optional[str] = None,
        name: str = "",
        description: str = "",
        metadata: Optional[Dict[str, Any]] = None,
        clock: Clock = utc_now,
    ):
        self.tool_id = tool_id or str(uuid.uuid4())
        self.name = name or self.__class__.__name__
        self.description = description
        self.metadata = metadata or {}
        self.clock = clock
        self.created_at = clock()
        self.last_used = self.created_at
        self.call_count = 0
        logger.info(f"Tool {self.name} ({self.tool_id}) initialized")

    def mark_used(self) -> None:
        """Record one use of the tool."""
        self.call_count += 1
        self.last_used = self.clock()

    def get_status(self) -> Dict[str, Any]:
        """
        Get the current status of the tool.

        Returns:
            Dictionary with tool status information
        """
        return {
            "tool_id": self.tool_id,
            "name": self.name,
            "description": self.description,
            "created_at": format_instant(self.created_at),
            "last_used": format_instant(self.last_used),
            "call_count": self.call_count,
            "metadata": self.metadata,
        }
