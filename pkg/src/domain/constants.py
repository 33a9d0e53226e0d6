"""
Engine constants and their validation.
"""

from dataclasses import dataclass, replace
from typing import List

MAX_ATTEMPTS = 5
METERS_PER_MILE = 1609.34

ACCEPT_THRESHOLD = 0.6
ROW_LIMIT = 1000
SAMPLE_VALUE_LIMIT = 20
PROMPT_SCHEMA_BUDGET = 4000


@dataclass(frozen=True)
class EngineConstants:
    """
    Tunable limits of the engine.

    Only ``accept_threshold``, ``row_limit``, ``sample_value_limit`` and
    ``prompt_schema_budget`` may be overridden from configuration.
    """

    max_attempts: int = MAX_ATTEMPTS
    meters_per_mile: float = METERS_PER_MILE
    accept_threshold: float = ACCEPT_THRESHOLD
    row_limit: int = ROW_LIMIT
    sample_value_limit: int = SAMPLE_VALUE_LIMIT
    prompt_schema_budget: int = PROMPT_SCHEMA_BUDGET

    def with_overrides(self, **overrides) -> "EngineConstants":
        """Return a copy with the given non-None fields replaced."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict:
        return {
            "max_attempts": self.max_attempts,
            "meters_per_mile": self.meters_per_mile,
            "accept_threshold": self.accept_threshold,
            "row_limit": self.row_limit,
            "sample_value_limit": self.sample_value_limit,
            "prompt_schema_budget": self.prompt_schema_budget,
        }


DEFAULT_CONSTANTS = EngineConstants()


def validate_constants(constants: EngineConstants = DEFAULT_CONSTANTS) -> List[str]:
    """
    Check every invariant of the engine constants.

    Args:
        constants: The constants to check

    Returns:
        List of violation messages, empty when all invariants hold
    """
    violations = []
    if constants.max_attempts != MAX_ATTEMPTS:
        violations.append(
            f"MAX_ATTEMPTS must equal {MAX_ATTEMPTS} (got {constants.max_attempts})"
        )
    if constants.meters_per_mile != METERS_PER_MILE:
        violations.append(
            f"METERS_PER_MILE must equal {METERS_PER_MILE} (got {constants.meters_per_mile})"
        )
    if not 0.0 <= constants.accept_threshold <= 1.0:
        violations.append(
            f"ACCEPT_THRESHOLD must lie in [0, 1] (got {constants.accept_threshold})"
        )
    if constants.row_limit <= 0:
        violations.append(f"ROW_LIMIT must be positive (got {constants.row_limit})")
    if constants.sample_value_limit <= 0:
        violations.append(
            f"SAMPLE_VALUE_LIMIT must be positive (got {constants.sample_value_limit})"
        )
    if constants.prompt_schema_budget <= 0:
        violations.append(
            f"PROMPT_SCHEMA_BUDGET must be positive (got {constants.prompt_schema_budget})"
        )
    return violations
