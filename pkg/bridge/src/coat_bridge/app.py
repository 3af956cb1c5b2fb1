"""FastAPI application implementing the /score wire protocol.

Responses carry the backend's own target tokenization and per-token
log-probabilities (len(tokens) == len(logprobs), every value <= 0).
Handlers hold no per-request state, so responses are independent of
request ordering. Error mapping: 400 for schema violations, 401 for a
bad bearer token, 503 until the backend is loaded, 500 with an error
body when inference fails.
"""

from __future__ import annotations

import asyncio
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel
from starlette.concurrency import run_in_threadpool

from .backends import BackendError, BridgeConfig, ScoreBackend


class ScoreRequest(BaseModel):
    prompt: str
    target: str


def create_app(
    config: BridgeConfig,
    backend: ScoreBackend | None = None,
    backend_factory=None,
) -> FastAPI:
    """Build the service around a backend (or a factory that loads one).

    The backend is self-checked during startup; a backend that cannot
    produce teacher-forced log-likelihoods aborts the launch. Until
    startup completes every endpoint answers 503.
    """

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        loaded = backend
        if loaded is None:
            if backend_factory is None:
                raise BackendError("no backend and no factory to load one")
            loaded = await run_in_threadpool(backend_factory)
        await run_in_threadpool(loaded.self_check)
        app.state.backend = loaded
        app.state.ready = True
        yield
        app.state.ready = False

    app = FastAPI(title="coat-bridge", lifespan=lifespan)
    app.state.ready = False
    app.state.backend = None
    app.state.gate = asyncio.Semaphore(max(1, config.max_concurrency))

    @app.exception_handler(RequestValidationError)
    async def schema_violation(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={"error": "schema violation", "detail": exc.errors()},
        )

    def unauthorized(request: Request) -> JSONResponse | None:
        if config.token is None:
            return None
        header = request.headers.get("authorization", "")
        if header == f"Bearer {config.token}":
            return None
        return JSONResponse(status_code=401, content={"error": "bad or missing bearer token"})

    @app.get("/health")
    async def health(request: Request):
        denied = unauthorized(request)
        if denied is not None:
            return denied
        if not request.app.state.ready:
            return JSONResponse(status_code=503, content={"error": "model loading"})
        return {"status": "ok", "model": request.app.state.backend.model_id}

    @app.post("/score")
    async def score(request: Request, body: ScoreRequest):
        denied = unauthorized(request)
        if denied is not None:
            return denied
        if not request.app.state.ready:
            return JSONResponse(status_code=503, content={"error": "model loading"})
        if not body.target:
            return JSONResponse(status_code=400, content={"error": "target must be non-empty"})
        loaded = request.app.state.backend
        try:
            async with request.app.state.gate:
                tokens, logprobs = await run_in_threadpool(loaded.score, body.prompt, body.target)
        except BackendError as exc:
            return JSONResponse(status_code=500, content={"error": str(exc)})
        except Exception as exc:  # inference failures must carry a body
            return JSONResponse(status_code=500, content={"error": f"inference failed: {exc}"})
        if len(tokens) != len(logprobs):
            return JSONResponse(
                status_code=500,
                content={"error": "backend returned mismatched tokens/logprobs"},
            )
        return {"tokens": list(tokens), "logprobs": [min(0.0, float(lp)) for lp in logprobs]}

    return app
