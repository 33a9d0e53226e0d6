"""
Language-model providers.

``LiveProvider`` talks to an HTTP chat-completion endpoint and retries
transient transport failures; ``ScriptedProvider`` replays a scenario file
step by step so pipelines can be tested deterministically.
"""

import logging
import os
import threading
import time
import uuid
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional

import requests
from tenacity import (
    RetryError,
    Retrying,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from src.config import LLM_API_KEY_ENV, ProviderConfig
from src.domain.errors import PreconditionViolation, ProviderUnavailable, ScenarioViolation
from src.llm.prompts import PromptRole
from src.llm.scenarios import ScriptedScenario, load_scenario

logger = logging.getLogger(__name__)

TRANSPORT_ATTEMPTS = 3
BACKOFF_BASE_SECONDS = 0.25


@dataclass(frozen=True)
class ProviderRequest:
    role: PromptRole
    rendered_prompt: str
    temperature: float = 0.0
    max_output: int = 4000

    def __post_init__(self):
        if not (self.rendered_prompt or "").strip():
            raise PreconditionViolation("rendered_prompt must be non-empty")
        if self.max_output <= 0:
            raise PreconditionViolation("max_output must be positive")


@dataclass(frozen=True)
class ProviderResponse:
    text: str
    latency_ms: float
    provider_id: str
    truncated: bool = False

    def __post_init__(self):
        if self.latency_ms < 0:
            raise PreconditionViolation("latency_ms must be non-negative")


class _TransientHTTPError(requests.RequestException):
    """A 429 or 5xx reply; worth another attempt."""


class BaseProvider(ABC):
    """
    Base class for language-model providers.

    Subclasses implement ``_complete_text``; ``complete`` applies the
    max_output truncation and call accounting shared by every provider.
    """
    def __init__(self, provider_id: Optional[str] = None, name: str = "Provider"):
        self.id = provider_id or str(uuid.uuid4())
        self.name = name
        self.call_count = 0
        self._count_lock = threading.Lock()

    @abstractmethod
    def _complete_text(self, request: ProviderRequest) -> str:
        pass

    def complete(self, request: ProviderRequest) -> ProviderResponse:
        """
        Complete one prompt.

        Args:
            request: The rendered prompt and its role

        Returns:
            The provider text, flagged ``truncated`` when it exceeded max_output

        Raises:
            ProviderUnavailable: when the provider cannot be reached
            ScenarioViolation: when a scripted provider receives an unexpected role
        """
        with self._count_lock:
            self.call_count += 1
        started = time.monotonic()
        text = self._complete_text(request)
        latency_ms = self._latency_ms(started)
        truncated = len(text) > request.max_output
        if truncated:
            logger.warning(f"{self.name} reply truncated to {request.max_output} characters")
            text = text[:request.max_output]
        logger.debug(f"{self.name} completed {request.role.value} in {latency_ms:.1f} ms")
        return ProviderResponse(text=text, latency_ms=latency_ms, provider_id=self.id,
                                truncated=truncated)

    def _latency_ms(self, started: float) -> float:
        return max(0.0, (time.monotonic() - started) * 1000.0)

    def get_status(self) -> Dict[str, Any]:
        return {"id": self.id, "name": self.name, "call_count": self.call_count}

    def __str__(self) -> str:
        return f"{self.name} ({self.id})"

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(id={self.id}, name={self.name})"


class LiveProvider(BaseProvider):
    """Chat-completion provider over HTTP."""
    def __init__(
        self,
        endpoint: str,
        model_name: str,
        api_key: Optional[str] = None,
        timeout: float = 60.0,
        session: Optional[requests.Session] = None,
        sleep: Callable[[float], None] = time.sleep,
        attempts: int = TRANSPORT_ATTEMPTS,
    ):
        super().__init__(provider_id=f"live:{model_name}", name="LiveProvider")
        self.endpoint = endpoint.rstrip("/")
        self.model_name = model_name
        self.api_key = api_key if api_key is not None else os.getenv(LLM_API_KEY_ENV)
        self.timeout = timeout
        self.session = session or requests.Session()
        self.sleep = sleep
        self.attempts = attempts
        self.transport_log: List[Dict[str, Any]] = []
        self._log_lock = threading.Lock()

    @property
    def url(self) -> str:
        return f"{self.endpoint}/chat/completions"

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _record(self, attempt: int, ok: bool, detail: str) -> None:
        with self._log_lock:
            self.transport_log.append({"attempt": attempt, "ok": ok, "detail": detail})

    def _post(self, request: ProviderRequest) -> str:
        with self._log_lock:
            attempt = len(self.transport_log) + 1
        payload = {
            "model": self.model_name,
            "messages": [{"role": "user", "content": request.rendered_prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        }
        try:
            response = self.session.post(
                self.url, json=payload, headers=self._headers(), timeout=self.timeout
            )
        except requests.RequestException as e:
            self._record(attempt, False, f"{type(e).__name__}: {e}")
            raise

        if response.status_code == 429 or response.status_code >= 500:
            self._record(attempt, False, f"HTTP {response.status_code}")
            raise _TransientHTTPError(f"HTTP {response.status_code} from {self.url}")
        if response.status_code >= 400:
            self._record(attempt, False, f"HTTP {response.status_code}")
            raise ProviderUnavailable(
                f"provider rejected the request with HTTP {response.status_code}",
                {"url": self.url, "body": response.text[:500]},
            )
        try:
            text = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            self._record(attempt, False, f"malformed reply: {e}")
            raise ProviderUnavailable("provider returned a malformed reply", {"url": self.url})
        self._record(attempt, True, f"HTTP {response.status_code}")
        return text or ""

    def _complete_text(self, request: ProviderRequest) -> str:
        retrying = Retrying(
            stop=stop_after_attempt(self.attempts),
            wait=wait_exponential(multiplier=BACKOFF_BASE_SECONDS, min=BACKOFF_BASE_SECONDS),
            retry=retry_if_exception_type(requests.RequestException),
            sleep=self.sleep,
            reraise=True,
        )
        try:
            return retrying(self._post, request)
        except requests.RequestException as e:
            logger.error(f"Provider {self.url} unavailable after {self.attempts} attempts: {e}")
            raise ProviderUnavailable(
                f"provider unreachable after {self.attempts} attempts",
                {"url": self.url, "error": str(e)},
            )
        except RetryError as e:
            raise ProviderUnavailable(f"provider unreachable: {e}", {"url": self.url})

    def get_status(self) -> Dict[str, Any]:
        status = super().get_status()
        status.update({"endpoint": self.endpoint, "model_name": self.model_name,
                       "transport_attempts": len(self.transport_log)})
        return status


class ScriptedProvider(BaseProvider):
    """
    Replays a scripted scenario.

    Each call must carry the role of the next step; the cursor is advanced
    under a lock, and running past the last step is a scenario violation.
    """
    def __init__(self, scenario: ScriptedScenario):
        super().__init__(provider_id=f"scripted:{scenario.name}", name="ScriptedProvider")
        self.scenario = scenario
        self.cursor = 0
        self.calls: List[PromptRole] = []
        self._cursor_lock = threading.Lock()

    @property
    def remaining(self) -> int:
        return len(self.scenario.steps) - self.cursor

    def _complete_text(self, request: ProviderRequest) -> str:
        with self._cursor_lock:
            if self.cursor >= len(self.scenario.steps):
                raise ScenarioViolation(
                    f"scenario {self.scenario.name} has no step left for {request.role.value}",
                    {"scenario": self.scenario.name, "cursor": self.cursor},
                )
            step = self.scenario.steps[self.cursor]
            if step.role is not request.role:
                raise ScenarioViolation(
                    f"scenario {self.scenario.name} expected {step.role.value} at step "
                    f"{self.cursor + 1} but received {request.role.value}",
                    {"scenario": self.scenario.name, "cursor": self.cursor,
                     "expected": step.role.value, "received": request.role.value},
                )
            self.cursor += 1
            self.calls.append(request.role)
            return step.response_text

    def _latency_ms(self, started: float) -> float:
        return 0.0

    def get_status(self) -> Dict[str, Any]:
        status = super().get_status()
        status.update({"scenario": self.scenario.name, "cursor": self.cursor,
                       "remaining": self.remaining})
        return status


def build_provider(config: ProviderConfig, scenario: Optional[ScriptedScenario] = None) -> BaseProvider:
    """Create the provider described by the config."""
    if config.kind == "scripted":
        scenario = scenario or load_scenario(config.scenario_path)
        logger.info(f"Using scripted provider for scenario {scenario.name}")
        return ScriptedProvider(scenario)
    logger.info(f"Using live provider {config.model_name} at {config.endpoint}")
    return LiveProvider(
        endpoint=config.endpoint,
        model_name=config.model_name,
        api_key=config.api_key,
        timeout=config.timeout_seconds,
    )
