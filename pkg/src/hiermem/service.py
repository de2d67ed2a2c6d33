"""HTTP JSON service over an :class:`~hiermem.engine.Engine`."""

from __future__ import annotations

import json
import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse
from starlette.concurrency import run_in_threadpool

from .config import EngineConfig, ServiceConfig
from .engine import Engine
from .errors import (
    ConfigurationError,
    HierMemError,
    InvariantError,
    NotFoundError,
    StageError,
    TransportError,
)
from .update import EpisodeRecord

logger = logging.getLogger(__name__)


def _error(status: int, stage: str, message: str) -> JSONResponse:
    return JSONResponse({"stage": stage, "message": message}, status_code=status)


def error_response(exc: HierMemError, default_stage: str) -> JSONResponse:
    stage = default_stage
    cause: BaseException = exc
    if isinstance(exc, StageError):
        stage, cause = exc.stage, exc.cause
    if isinstance(cause, InvariantError):
        return _error(409, cause.stage or stage, str(cause))
    if isinstance(cause, NotFoundError):
        return _error(409, stage, str(cause))
    if isinstance(cause, TransportError):
        return _error(500, stage, str(cause))
    if isinstance(cause, ConfigurationError):
        return _error(400, stage, str(cause))
    return _error(500, stage, str(cause))


async def _json_body(request: Request):
    raw = await request.body()
    try:
        return json.loads(raw or b"null")
    except (ValueError, UnicodeDecodeError) as exc:
        raise ValueError(f"malformed JSON body: {exc}") from None


def create_app(engine: Engine, persist: bool = True) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        if persist:
            logger.info("flushing store to %s", engine.config.store_path)
            engine.save()

    app = FastAPI(title="hiermem", lifespan=lifespan)

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/stats")
    def stats():
        return engine.stats()

    @app.get("/export")
    def export(tier: str = "query", format: str = "json"):
        try:
            text = engine.export(tier, format)
        except NotFoundError as exc:
            return _error(404, "export", str(exc))
        except HierMemError as exc:
            return _error(400, "export", str(exc))
        if format == "json":
            return JSONResponse(json.loads(text))
        return PlainTextResponse(text, media_type="text/vnd.graphviz")

    @app.post("/retrieve")
    async def post_retrieve(request: Request):
        try:
            body = await _json_body(request)
            query = body["query"]
            roles_raw = body.get("roles") or []
            if not isinstance(query, str):
                raise TypeError("query must be a string")
            roles = [
                (str(r.get("agent_id", r.get("role_label"))), str(r.get("role_label", r.get("agent_id"))))
                if isinstance(r, dict)
                else (str(r), str(r))
                for r in roles_raw
            ]
            overrides = body.get("overrides") or None
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            return _error(400, "parse", f"malformed retrieve request: {exc}")
        try:
            result = await run_in_threadpool(engine.retrieve, query, roles, overrides)
        except HierMemError as exc:
            return error_response(exc, "retrieve")
        return result.to_dict()

    @app.post("/episodes")
    async def post_episode(request: Request):
        try:
            body = await _json_body(request)
            episode = EpisodeRecord.from_dict(body)
        except InvariantError as exc:
            return _error(400, "parse", str(exc))
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            return _error(400, "parse", f"malformed episode: {exc}")
        try:
            summary = await run_in_threadpool(engine.commit, episode, persist)
        except HierMemError as exc:
            return error_response(exc, "commit_episode")
        return summary.to_dict()

    return app


def serve(config: EngineConfig, engine: Engine | None = None) -> None:
    import uvicorn

    engine = engine or Engine.open(config, create=True)
    svc = config.service or ServiceConfig()
    uvicorn.run(create_app(engine), host=svc.host, port=svc.port, log_level="info")
