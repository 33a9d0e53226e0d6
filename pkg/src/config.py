"""
Configuration for the sqlsentinel query engine.

Process-level settings come from the environment (a ``.env`` file is
honoured). The engine itself is described by a YAML config file validated
into the pydantic models below.
"""

import logging
import os
import re
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from src.domain.constants import MAX_ATTEMPTS, METERS_PER_MILE, EngineConstants
from src.domain.errors import ConfigError

logger = logging.getLogger(__name__)

# Load environment variables from .env file if it exists
load_dotenv()

# Base directories
BASE_DIR = Path(__file__).resolve().parent.parent
SRC_DIR = BASE_DIR / "src"
DATA_DIR = Path(os.getenv("SENTINEL_DATA_DIR", str(BASE_DIR / "data")))
LOGS_DIR = Path(os.getenv("SENTINEL_LOGS_DIR", str(BASE_DIR / "logs")))
FIXTURES_DIR = BASE_DIR / "fixtures"

os.makedirs(DATA_DIR, exist_ok=True)
os.makedirs(LOGS_DIR, exist_ok=True)

# API configuration
API_HOST = os.getenv("API_HOST", "127.0.0.1")
API_PORT = int(os.getenv("API_PORT", "8000"))
ALLOWED_ORIGINS = os.getenv("ALLOWED_ORIGINS", "*").split(",")

# Engine config file
DEFAULT_CONFIG_PATH = Path(os.getenv("SENTINEL_CONFIG", str(BASE_DIR / "sentinel.yaml")))

# LLM configuration
LLM_API_KEY_ENV = "THOR_LLM_API_KEY"
DEFAULT_LLM_ENDPOINT = os.getenv("SENTINEL_LLM_ENDPOINT", "https://api.openai.com/v1")
DEFAULT_LLM_MODEL = os.getenv("SENTINEL_LLM_MODEL", "gpt-4o")
LLM_TIMEOUT = float(os.getenv("SENTINEL_LLM_TIMEOUT", "60"))  # seconds

# Logging configuration
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_FILE = LOGS_DIR / "sqlsentinel.log"

# Keys whose string values may contain ${VAR} references
SECRET_KEYS = frozenset({"api_key", "password", "connection", "database_url"})
_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ColumnAnnotation(BaseModel):
    unit_hint: Optional[str] = Field(None, description="Physical unit of the stored values, e.g. meters")
    description: Optional[str] = Field(None, description="Free-text column description")


class DatasourceConfig(BaseModel):
    """Connection and safety limits of one datasource."""
    id: str = Field(..., description="Identifier used by questions and endpoints")
    connection: str = Field(..., description="SQLite file path or SQLAlchemy URL")
    read_only: bool = Field(True, description="Must be true; sessions are opened read-only")
    statement_timeout_ms: int = Field(10000, description="Per-statement timeout")
    row_limit: int = Field(1000, description="Maximum rows returned per statement")
    annotations: Dict[str, ColumnAnnotation] = Field(
        default_factory=dict, description="Per-column annotations keyed by table.column"
    )
    descriptions: Dict[str, str] = Field(default_factory=dict, description="Per-table descriptions")
    fixture: Optional[str] = Field(None, description="Fixture to build when the database file is missing")

    @field_validator("read_only")
    @classmethod
    def _must_be_read_only(cls, value: bool) -> bool:
        if value is not True:
            raise ValueError("read_only must be true")
        return value

    @field_validator("statement_timeout_ms", "row_limit")
    @classmethod
    def _must_be_positive(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @property
    def is_sqlite_file(self) -> bool:
        return "://" not in self.connection

    def unit_hints(self) -> Dict[str, str]:
        return {k.lower(): v.unit_hint for k, v in self.annotations.items() if v.unit_hint}

    def column_descriptions(self) -> Dict[str, str]:
        return {k.lower(): v.description for k, v in self.annotations.items() if v.description}


class ProviderConfig(BaseModel):
    kind: Literal["live", "scripted"] = Field("scripted", description="Provider implementation")
    endpoint: Optional[str] = Field(None, description="Base URL of a chat-completion endpoint")
    model_name: Optional[str] = Field(None, description="Model identifier sent to the endpoint")
    scenario_path: Optional[str] = Field(None, description="Scenario file replayed by the scripted provider")
    api_key: Optional[str] = Field(None, description="API key; defaults to $THOR_LLM_API_KEY")
    temperature: float = Field(0.0, description="Sampling temperature")
    max_output: int = Field(4000, description="Maximum characters kept from a completion")
    timeout_seconds: float = Field(LLM_TIMEOUT, description="HTTP timeout per attempt")

    @model_validator(mode="after")
    def _check_kind(self) -> "ProviderConfig":
        if self.kind == "scripted" and not self.scenario_path:
            raise ValueError("scripted providers require scenario_path")
        if self.kind == "live" and not (self.endpoint and self.model_name):
            raise ValueError("live providers require endpoint and model_name")
        return self


class PolicyConfig(BaseModel):
    allow_ctes: bool = True
    allow_set_operations: bool = True
    denied_columns: List[str] = Field(default_factory=list)
    denied_functions: Optional[List[str]] = Field(None, description="Replaces the default deny-list")
    max_statement_length: int = 20000


class ConstantsConfig(BaseModel):
    """Overrides of the engine constants. The retry cap and the mile factor are fixed."""
    max_attempts: Optional[int] = None
    meters_per_mile: Optional[float] = None
    accept_threshold: Optional[float] = None
    row_limit: Optional[int] = None
    sample_value_limit: Optional[int] = None
    prompt_schema_budget: Optional[int] = None

    @model_validator(mode="after")
    def _check_fixed(self) -> "ConstantsConfig":
        if self.max_attempts is not None and self.max_attempts != MAX_ATTEMPTS:
            raise ValueError(f"max_attempts may not be changed from {MAX_ATTEMPTS}")
        if self.meters_per_mile is not None and self.meters_per_mile != METERS_PER_MILE:
            raise ValueError(f"meters_per_mile may not be changed from {METERS_PER_MILE}")
        if self.accept_threshold is not None and not 0.0 <= self.accept_threshold <= 1.0:
            raise ValueError("accept_threshold must lie in [0, 1]")
        return self

    def to_constants(self) -> EngineConstants:
        return EngineConstants().with_overrides(
            accept_threshold=self.accept_threshold,
            row_limit=self.row_limit,
            sample_value_limit=self.sample_value_limit,
            prompt_schema_budget=self.prompt_schema_budget,
        )


class ServiceConfig(BaseModel):
    host: str = API_HOST
    port: int = API_PORT


class AuditConfig(BaseModel):
    backend: Literal["journal", "database"] = "journal"
    journal_path: str = str(DATA_DIR / "audit.jsonl")
    database_url: Optional[str] = None

    @model_validator(mode="after")
    def _check_backend(self) -> "AuditConfig":
        if self.backend == "database" and not self.database_url:
            raise ValueError("the database audit backend requires database_url")
        return self


class ScheduleConfig(BaseModel):
    question: str
    cron: str
    output_path: str
    datasource_id: Optional[str] = None


class EngineConfig(BaseModel):
    """The whole engine: datasources, provider, policy, constants and surfaces."""
    datasources: List[DatasourceConfig] = Field(..., min_length=1)
    provider: ProviderConfig
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    constants: ConstantsConfig = Field(default_factory=ConstantsConfig)
    service: ServiceConfig = Field(default_factory=ServiceConfig)
    audit: AuditConfig = Field(default_factory=AuditConfig)
    routing: Literal["heuristic", "llm"] = "heuristic"
    verbosity: Literal["concise", "detailed"] = "concise"
    fixed_now: Optional[datetime] = Field(None, description="Freeze the engine clock at this instant")
    schedules: List[ScheduleConfig] = Field(default_factory=list)

    @model_validator(mode="before")
    @classmethod
    def _single_datasource(cls, data: Any) -> Any:
        if isinstance(data, dict) and "datasource" in data and "datasources" not in data:
            data = dict(data)
            data["datasources"] = [data.pop("datasource")]
        return data

    @model_validator(mode="after")
    def _unique_datasources(self) -> "EngineConfig":
        ids = [d.id for d in self.datasources]
        if len(set(ids)) != len(ids):
            raise ValueError("datasource ids must be unique")
        return self

    @property
    def default_datasource_id(self) -> str:
        return self.datasources[0].id

    def datasource(self, datasource_id: Optional[str] = None) -> Optional[DatasourceConfig]:
        wanted = datasource_id or self.default_datasource_id
        for datasource in self.datasources:
            if datasource.id == wanted:
                return datasource
        return None


def _interpolate(value: Any, key: Optional[str] = None) -> Any:
    if isinstance(value, dict):
        return {k: _interpolate(v, k) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v, key) for v in value]
    if isinstance(value, str) and key in SECRET_KEYS:
        def substitute(match: "re.Match") -> str:
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"environment variable {name} referenced by {key} is not set")
            return os.environ[name]
        return _ENV_REF.sub(substitute, value)
    return value


def parse_config(data: Dict[str, Any], base_dir: Optional[Path] = None) -> EngineConfig:
    """
    Validate a config document.

    Args:
        data: Parsed YAML mapping
        base_dir: Directory that relative file paths are resolved against

    Returns:
        The validated engine configuration
    """
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    try:
        config = EngineConfig.model_validate(_interpolate(data))
    except ValidationError as e:
        raise ConfigError(f"invalid config: {e}") from e

    if base_dir is not None:
        for datasource in config.datasources:
            if datasource.is_sqlite_file and not Path(datasource.connection).is_absolute():
                datasource.connection = str((base_dir / datasource.connection).resolve())
        if config.provider.scenario_path and not Path(config.provider.scenario_path).is_absolute():
            config.provider.scenario_path = str((base_dir / config.provider.scenario_path).resolve())
        if not Path(config.audit.journal_path).is_absolute():
            config.audit.journal_path = str((base_dir / config.audit.journal_path).resolve())
    return config


def load_config(path: Optional[Path] = None) -> EngineConfig:
    """
    Load and validate the engine config file.

    Args:
        path: Config file path, defaults to $SENTINEL_CONFIG or ./sentinel.yaml

    Returns:
        The validated engine configuration

    Raises:
        ConfigError: when the file is missing, malformed or invalid
    """
    path = Path(path or DEFAULT_CONFIG_PATH)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", {"path": str(path)})
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}", {"path": str(path)}) from e
    logger.info(f"Loaded engine config from {path}")
    return parse_config(data or {}, base_dir=path.resolve().parent)
