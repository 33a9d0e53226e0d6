"""
API routes of the query service.

Only ``/v1/lint`` accepts SQL text, and it never executes it; questions
enter through ``/v1/query`` and always pass the full pipeline.
"""

import logging
from datetime import datetime
from typing import Any, Dict, Literal, Optional

from fastapi import APIRouter, Depends, Request, status
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from src.domain.models import FinalStatus
from src.orchestration.engine import QueryEngine

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/v1")


class QueryRequest(BaseModel):
    question: str = Field(..., min_length=1, description="Natural-language question")
    datasource_id: Optional[str] = Field(None, description="Target datasource; defaults to the first configured")
    verbosity: Optional[Literal["concise", "detailed"]] = Field(None, description="Narrative verbosity")
    session_id: Optional[str] = Field(None, description="Session the audit records are filed under")


class LintRequest(BaseModel):
    sql: str = Field(..., min_length=1, description="Statement to check; it is never executed")
    datasource_id: Optional[str] = Field(None, description="Datasource whose catalog resolves columns")


def get_engine(request: Request) -> QueryEngine:
    return request.app.state.engine


@router.post("/query")
def query(body: QueryRequest, engine: QueryEngine = Depends(get_engine)):
    """Answer a question; compliance refusals are returned as 403."""
    answer = engine.ask(body.question, body.datasource_id, body.verbosity, body.session_id)
    document = answer.to_dict()
    if answer.final_status is FinalStatus.REFUSED:
        logger.info(f"Query refused: {answer.refusal_reason}")
        return JSONResponse(
            status_code=status.HTTP_403_FORBIDDEN,
            content={
                "code": "refused",
                "message": f"request refused: {answer.refusal_reason}",
                "refusal_reason": answer.refusal_reason,
                "answer": document,
            },
        )
    return document


@router.post("/lint")
def lint_statement(body: LintRequest, engine: QueryEngine = Depends(get_engine)) -> Dict[str, Any]:
    """Guardrail verdict for a statement without executing it."""
    return engine.lint(body.sql, body.datasource_id)


@router.get("/audit")
def audit(
    session_id: Optional[str] = None,
    since: Optional[datetime] = None,
    until: Optional[datetime] = None,
    final_status: Optional[str] = None,
    kind: Optional[str] = None,
    engine: QueryEngine = Depends(get_engine),
) -> Dict[str, Any]:
    records = engine.audit(session_id=session_id, since=since, until=until,
                           final_status=final_status, kind=kind)
    return {"records": [r.to_dict() for r in records], "count": len(records)}


@router.get("/schema/{datasource_id}")
def schema(datasource_id: str, engine: QueryEngine = Depends(get_engine)) -> Dict[str, Any]:
    return engine.schema(datasource_id)


@router.get("/health")
def health(engine: QueryEngine = Depends(get_engine)) -> Dict[str, Any]:
    return engine.health()
