"""
Scripted scenario files.

A scenario is a line-oriented text file: optional ``@key: value`` metadata
lines, then one block per expected provider call, each introduced by a
``# role`` header line and followed by the literal response text::

    @question: Which track has the highest unit price?
    @fixture: chinook
    @expect.status: answered

    # generate_sql
    SELECT name, unit_price FROM chinook_track ORDER BY unit_price DESC LIMIT 1;

    # rate_result
    SCORE: 0.95
    REASON: direct answer
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from src.domain.errors import ConfigError, ScenarioParseError
from src.llm.prompts import PromptRole

logger = logging.getLogger(__name__)

SCENARIO_SUFFIX = ".scenario"

_HEADER = re.compile(r"^#\s+([A-Za-z_]+)\s*$")
_METADATA = re.compile(r"^@([A-Za-z0-9_.\-]+)\s*:\s*(.*)$")


@dataclass(frozen=True)
class ScenarioStep:
    role: PromptRole
    response_text: str
    line_number: int = 0


@dataclass(frozen=True)
class ScriptedScenario:
    """An ordered list of expected provider calls plus replay metadata."""
    name: str
    steps: Tuple[ScenarioStep, ...]
    metadata: Dict[str, str] = field(default_factory=dict)
    path: Optional[str] = None

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        return self.metadata.get(key, default)

    @property
    def question(self) -> Optional[str]:
        return self.metadata.get("question")

    @property
    def fixture(self) -> Optional[str]:
        return self.metadata.get("fixture")

    @property
    def now(self) -> Optional[str]:
        return self.metadata.get("now")

    @property
    def session_id(self) -> str:
        return self.metadata.get("session", self.name)

    @property
    def denied_columns(self) -> List[str]:
        return [c.strip().lower() for c in self.metadata.get("deny", "").split(",") if c.strip()]

    def expectations(self) -> Dict[str, str]:
        """Metadata entries under ``expect.``, keyed without the prefix."""
        return {k[len("expect."):]: v for k, v in self.metadata.items() if k.startswith("expect.")}

    def roles(self) -> List[str]:
        return [step.role.value for step in self.steps]


def parse_scenario(text: str, name: str, path: Optional[str] = None) -> ScriptedScenario:
    """
    Parse scenario text.

    Raises:
        ScenarioParseError: naming the scenario and line of the first problem
    """
    metadata: Dict[str, str] = {}
    steps: List[ScenarioStep] = []
    current_role: Optional[PromptRole] = None
    current_line = 0
    buffer: List[str] = []

    def flush() -> None:
        if current_role is None:
            return
        body = "\n".join(buffer).strip("\n")
        if not body.strip():
            raise ScenarioParseError(name, current_line, f"empty response for role {current_role.value}")
        steps.append(ScenarioStep(current_role, body, current_line))

    for line_number, line in enumerate(text.splitlines(), start=1):
        header = _HEADER.match(line)
        if header:
            role_name = header.group(1).lower()
            try:
                role = PromptRole(role_name)
            except ValueError:
                raise ScenarioParseError(name, line_number, f"unknown role {role_name!r}")
            flush()
            current_role, current_line, buffer = role, line_number, []
            continue
        if current_role is not None:
            buffer.append(line)
            continue
        if not line.strip():
            continue
        meta = _METADATA.match(line)
        if meta is None:
            raise ScenarioParseError(name, line_number, "expected '@key: value' or a '# role' header")
        metadata[meta.group(1).lower()] = meta.group(2).strip()
    flush()

    if not steps:
        raise ScenarioParseError(name, max(1, len(text.splitlines())), "scenario has no steps")
    return ScriptedScenario(name=name, steps=tuple(steps), metadata=metadata, path=path)


def load_scenario(path: Union[str, Path]) -> ScriptedScenario:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"scenario file not found: {path}", {"path": str(path)})
    return parse_scenario(path.read_text(encoding="utf-8"), path.stem, str(path))


def load_scenarios(directory: Union[str, Path]) -> List[ScriptedScenario]:
    """
    Load every ``*.scenario`` file in a directory, sorted by name.

    Raises:
        ConfigError: when the directory does not exist
        ScenarioParseError: for the first malformed file
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"scenario directory not found: {directory}", {"path": str(directory)})
    scenarios = [load_scenario(p) for p in sorted(directory.glob(f"*{SCENARIO_SUFFIX}"))]
    logger.info(f"Loaded {len(scenarios)} scenarios from {directory}")
    return scenarios
