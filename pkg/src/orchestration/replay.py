"""
Replay harness for the scripted scenario corpus.

Each scenario runs end-to-end against a freshly built fixture database with
a scripted provider and a frozen clock, then its ``@expect.*`` metadata is
compared with what actually happened.
"""

import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

from src.config import EngineConfig, parse_config
from src.domain.errors import ConfigError, OutOfScope, ScenarioViolation, SentinelError
from src.domain.models import QueryAnswer
from src.llm.providers import ScriptedProvider
from src.llm.scenarios import ScriptedScenario, load_scenarios
from src.orchestration.engine import QueryEngine
from src.persistence.fixtures import build_fixture

logger = logging.getLogger(__name__)

DEFAULT_REPLAY_NOW = "2025-04-17T12:00:00Z"
JOURNAL_NAME = "audit.jsonl"


@dataclass
class Check:
    name: str
    expected: str
    actual: str
    passed: bool

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "expected": self.expected, "actual": self.actual, "passed": self.passed}


@dataclass
class ScenarioResult:
    """Outcome of replaying one scenario."""
    name: str
    status: str
    attempts: int = 0
    checks: List[Check] = field(default_factory=list)
    error: Optional[str] = None
    answer: Optional[QueryAnswer] = None
    call_counts: Dict[str, int] = field(default_factory=dict)
    journal: str = ""

    @property
    def passed(self) -> bool:
        return self.error is None and all(c.passed for c in self.checks)

    def failures(self) -> List[Check]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "status": self.status,
            "attempts": self.attempts,
            "error": self.error,
            "call_counts": dict(self.call_counts),
            "checks": [c.to_dict() for c in self.checks],
        }


def scenario_config(scenario: ScriptedScenario, workdir: Path) -> EngineConfig:
    """
    Engine config for one scenario: its fixture, deny-list, clock and a journal in ``workdir``.

    Raises:
        ConfigError: when the scenario names no question or fixture
    """
    if not scenario.question:
        raise ConfigError(f"scenario {scenario.name} has no @question")
    if not scenario.fixture:
        raise ConfigError(f"scenario {scenario.name} has no @fixture")
    database = build_fixture(scenario.fixture, workdir / f"{scenario.fixture}.db")
    return parse_config({
        "datasources": [{"id": scenario.fixture, "connection": str(database), "fixture": scenario.fixture}],
        "provider": {"kind": "scripted", "scenario_path": scenario.path or scenario.name},
        "policy": {"denied_columns": scenario.denied_columns},
        "audit": {"backend": "journal", "journal_path": str(workdir / JOURNAL_NAME)},
        "routing": scenario.get("routing", "heuristic"),
        "verbosity": scenario.get("verbosity", "concise"),
        "fixed_now": scenario.now or DEFAULT_REPLAY_NOW,
    })


def _csv(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _observations(answer: Optional[QueryAnswer], counts: Dict[str, int], status: str) -> Dict[str, Any]:
    attempts = answer.attempts if answer else ()
    flags = set()
    for trace in attempts:
        if trace.rating is not None:
            flags.update(f.value for f in trace.rating.flags)
    return {
        "status": status,
        "attempts": len(attempts),
        "verdicts": [t.guardrail_verdict.decision.value for t in attempts],
        "executor_calls": counts.get("executor_call", 0),
        "provider_calls": counts.get("provider_call", 0),
        "rows": len(answer.rows) if answer else 0,
        "flags": flags,
        "hints": [t.correction_hint or "" for t in attempts],
        "narrative": answer.narrative if answer else "",
        "refusal": (answer.refusal_reason or "") if answer else "",
    }


# expectation key -> (render actual, compare)
_CHECKS: Dict[str, Tuple[Callable[[Dict[str, Any]], str], Callable[[str, Dict[str, Any]], bool]]] = {
    "status": (lambda o: o["status"], lambda e, o: o["status"] == e),
    "attempts": (lambda o: str(o["attempts"]), lambda e, o: o["attempts"] == int(e)),
    "verdicts": (lambda o: ", ".join(o["verdicts"]), lambda e, o: o["verdicts"] == _csv(e)),
    "executor_calls": (lambda o: str(o["executor_calls"]), lambda e, o: o["executor_calls"] == int(e)),
    "provider_calls": (lambda o: str(o["provider_calls"]), lambda e, o: o["provider_calls"] == int(e)),
    "rows": (lambda o: str(o["rows"]), lambda e, o: o["rows"] == int(e)),
    "flags": (lambda o: ", ".join(sorted(o["flags"])), lambda e, o: set(_csv(e)) <= o["flags"]),
    "hint_contains": (lambda o: " | ".join(h for h in o["hints"] if h),
                      lambda e, o: any(e in h for h in o["hints"])),
    "narrative_contains": (lambda o: o["narrative"], lambda e, o: e in o["narrative"]),
    "refusal": (lambda o: o["refusal"], lambda e, o: o["refusal"].startswith(e)),
}


def evaluate(scenario: ScriptedScenario, observed: Dict[str, Any]) -> List[Check]:
    """Compare a scenario's expectations with the observed run."""
    checks = []
    for key, expected in sorted(scenario.expectations().items()):
        if key not in _CHECKS:
            checks.append(Check(key, expected, "unknown expectation", False))
            continue
        render, compare = _CHECKS[key]
        try:
            passed = compare(expected, observed)
        except ValueError:
            passed = False
        checks.append(Check(key, expected, render(observed), passed))
    return checks


def run_scenario(
    scenario: ScriptedScenario,
    enforcement: bool = True,
    workdir: Optional[Union[str, Path]] = None,
) -> ScenarioResult:
    """
    Replay one scenario end-to-end.

    Args:
        scenario: The scenario
        enforcement: False disables the guardrail (negative control)
        workdir: Directory for the fixture database and journal; a temporary one by default

    Returns:
        ScenarioResult; scenario violations and infrastructure errors are reported, not raised
    """
    if workdir is None:
        with tempfile.TemporaryDirectory(prefix=f"replay-{scenario.name}-") as tmp:
            return run_scenario(scenario, enforcement, tmp)

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    provider = ScriptedProvider(scenario)
    engine = QueryEngine(scenario_config(scenario, workdir), provider=provider, enforcement=enforcement)
    answer: Optional[QueryAnswer] = None
    error: Optional[str] = None
    try:
        answer = engine.ask(scenario.question, session_id=scenario.session_id)
        status = answer.final_status.value
    except OutOfScope:
        status = "out_of_scope"
    except ScenarioViolation as e:
        status, error = "scenario_violation", e.message
    except SentinelError as e:
        status, error = e.code, e.message
    finally:
        engine.shutdown()

    counts = engine.router.call_counts(1)
    result = ScenarioResult(
        name=scenario.name,
        status=status,
        attempts=len(answer.attempts) if answer else 0,
        checks=evaluate(scenario, _observations(answer, counts, status)),
        error=error,
        answer=answer,
        call_counts=counts,
    )
    if error is None and provider.remaining:
        result.checks.append(Check("steps_consumed", "0 remaining", f"{provider.remaining} remaining", False))
    journal = workdir / JOURNAL_NAME
    if journal.exists():
        result.journal = journal.read_text(encoding="utf-8")
    logger.info(f"Scenario {scenario.name}: {'pass' if result.passed else 'FAIL'} ({status})")
    return result


def run_replay(directory: Union[str, Path], enforcement: bool = True) -> List[ScenarioResult]:
    """
    Replay every scenario of a directory.

    Raises:
        ConfigError: when the directory does not exist
        ScenarioParseError: for a malformed scenario file
    """
    return [run_scenario(scenario, enforcement) for scenario in load_scenarios(directory)]
