"""
API server for the query engine.
"""

import logging
from contextlib import asynccontextmanager
from typing import AsyncIterator, Optional

from fastapi import FastAPI, Request, status
from fastapi.encoders import jsonable_encoder
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from src import __version__
from src.api.routes import router
from src.config import ALLOWED_ORIGINS, API_HOST, API_PORT
from src.domain.errors import SentinelError
from src.orchestration.engine import QueryEngine

logger = logging.getLogger(__name__)

API_VERSION = __version__

# Error code -> HTTP status; anything else is a 500.
ERROR_STATUS = {
    "out_of_scope": status.HTTP_422_UNPROCESSABLE_ENTITY,
    "unknown_datasource": status.HTTP_404_NOT_FOUND,
    "datasource_unavailable": status.HTTP_503_SERVICE_UNAVAILABLE,
    "provider_unavailable": status.HTTP_503_SERVICE_UNAVAILABLE,
    "audit_storage_error": status.HTTP_503_SERVICE_UNAVAILABLE,
    "ranking_unavailable": status.HTTP_503_SERVICE_UNAVAILABLE,
    "precondition_violation": status.HTTP_503_SERVICE_UNAVAILABLE,
}


def create_app(engine: QueryEngine) -> FastAPI:
    """
    Build the FastAPI application around an engine.

    Args:
        engine: The shared query engine

    Returns:
        The application; shutting it down drains the engine
    """
    @asynccontextmanager
    async def lifespan(app: FastAPI) -> AsyncIterator[None]:
        yield
        engine.shutdown()

    app = FastAPI(
        title="SQL Sentinel API",
        description="Natural-language questions answered with guarded, read-only SQL",
        version=API_VERSION,
        lifespan=lifespan,
    )
    app.state.engine = engine

    app.add_middleware(
        CORSMiddleware,
        allow_origins=ALLOWED_ORIGINS,
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(SentinelError)
    async def sentinel_error_handler(request: Request, exc: SentinelError):
        status_code = ERROR_STATUS.get(exc.code, status.HTTP_500_INTERNAL_SERVER_ERROR)
        if status_code >= 500:
            logger.error(f"{request.url.path} failed: {exc.code}: {exc.message}")
        return JSONResponse(status_code=status_code, content=jsonable_encoder(exc.to_dict()))

    @app.exception_handler(RequestValidationError)
    async def validation_error_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=status.HTTP_400_BAD_REQUEST,
            content={
                "code": "malformed_request",
                "message": "request body failed validation",
                "errors": jsonable_encoder(exc.errors(), custom_encoder={Exception: str}),
            },
        )

    @app.get("/", tags=["Root"])
    async def root():
        """Root endpoint returning API information."""
        return {"name": "SQL Sentinel API", "version": API_VERSION, "status": "operational"}

    app.include_router(router)
    return app


def start_api_server(engine: QueryEngine, host: Optional[str] = None, port: Optional[int] = None) -> None:
    """Probe the datasources and serve the API until interrupted."""
    import uvicorn

    engine.startup()
    host = host or engine.config.service.host or API_HOST
    port = port or engine.config.service.port or API_PORT
    logger.info(f"Starting API server on {host}:{port}")
    uvicorn.run(create_app(engine), host=host, port=port)
