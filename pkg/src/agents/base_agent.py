"""
Base agent class that the pipeline agents inherit from.
"""

import logging
import uuid
from abc import ABC
from typing import Any, Dict, Optional

from src.domain.clock import Clock, format_instant, utc_now
from src.llm.prompts import PromptRole
from src.llm.providers import BaseProvider, ProviderRequest, ProviderResponse
from src.orchestration.pipeline_state import RunContext

logger = logging.getLogger(__name__)


class BaseAgent(ABC):
    """
    Abstract base class for the pipeline agents.

    Agents that talk to a language model do so through ``ask_provider`` so
    every call is counted and published to the run's transcript.
    """
    def __init__(
        self,
        provider: Optional[BaseProvider] = None,
        agent_id: Optional[str] = None,
        name: str = "",
        description: str = "",
        metadata: Optional[Dict[str, Any]] = None,
        clock: Clock = utc_now,
        temperature: float = 0.0,
        max_output: int = 4000,
    ):
        self.provider = provider
        self.agent_id = agent_id or str(uuid.uuid4())
        self.name = name or self.__class__.__name__
        self.description = description
        self.metadata = metadata or {}
        self.clock = clock
        self.temperature = temperature
        self.max_output = max_output
        self.created_at = clock()
        self.last_active = self.created_at
        self.call_count = 0
        logger.info(f"Agent {self.name} ({self.agent_id}) initialized")

    def ask_provider(self, role: PromptRole, prompt: str, context: Optional[RunContext] = None) -> ProviderResponse:
        """
        Send one prompt to the provider.

        Args:
            role: Role of the call
            prompt: Rendered prompt
            context: Run context that records the call

        Returns:
            The provider response
        """
        if self.provider is None:
            raise RuntimeError(f"Agent {self.name} has no provider")
        request = ProviderRequest(role=role, rendered_prompt=prompt,
                                  temperature=self.temperature, max_output=self.max_output)
        response = self.provider.complete(request)
        self.call_count += 1
        self.last_active = self.clock()
        if context is not None:
            context.provider_called(role.value, response.provider_id, response.truncated)
        logger.debug(f"Agent {self.name} received {len(response.text)} characters for {role.value}")
        return response

    def get_status(self) -> Dict[str, Any]:
        return {
            "agent_id": self.agent_id,
            "name": self.name,
            "description": self.description,
            "created_at": format_instant(self.created_at),
            "last_active": format_instant(self.last_active),
            "call_count": self.call_count,
            "metadata": self.metadata,
        }
