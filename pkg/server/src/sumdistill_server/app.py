"""FastAPI service exposing the backend wire protocol.

Routes, bodies, and error shapes follow the protocol exactly:
  POST /v1/generate /v1/score /v1/nli /v1/similarity /v1/finetune
  GET  /v1/health
Errors are {"error": {"code", "message"}} with codes model_not_found,
bad_request, and overloaded.
"""

from __future__ import annotations

import argparse
import threading
from pathlib import Path
from typing import Dict, List, Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .engine import BadRequest, Engine, EngineConfig, Overloaded, ServerError


class GenerateRequest(BaseModel):
    model_id: str
    prompt: str
    strategy: str = "beam"
    beam_width: int = 5
    num_return: int = 1
    max_new_chars: int = 400
    seed: int = 0


class CandidateModel(BaseModel):
    text: str
    logprob: float


class GenerateResponse(BaseModel):
    candidates: List[CandidateModel]


class ScoreRequest(BaseModel):
    model_id: str
    context: str = ""
    continuation: str


class ScoreResponse(BaseModel):
    token_logprobs: List[float]


class NliRequest(BaseModel):
    model_id: str
    premise: str
    hypothesis: str


class NliResponse(BaseModel):
    label: str
    probs: Dict[str, float]


class SimilarityRequest(BaseModel):
    model_id: str
    candidate: str
    reference: str


class SimilarityResponse(BaseModel):
    precision: float
    recall: float
    f1: float


class FinetuneRequest(BaseModel):
    base_model_id: str
    training_file_inline: Optional[str] = None
    training_file_ref: Optional[str] = None
    epochs: int


class FinetuneResponse(BaseModel):
    model_id: str


class HealthResponse(BaseModel):
    status: str
    models: List[str]


def create_app(config: Optional[EngineConfig] = None, max_inflight: int = 8) -> FastAPI:
    engine = Engine(config)
    app = FastAPI(title="sumdistill-server", version="0.1.0")
    app.state.engine = engine
    inflight = threading.BoundedSemaphore(max_inflight)
    app.state.inflight = inflight

    @app.exception_handler(ServerError)
    async def server_error_handler(request: Request, exc: ServerError):
        return JSONResponse(
            status_code=exc.status,
            content={"error": {"code": exc.code, "message": str(exc)}},
        )

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={"error": {"code": "bad_request", "message": str(exc.errors()[:3])}},
        )

    def _guarded(work):
        if not inflight.acquire(blocking=False):
            raise Overloaded("inference queue is full")
        try:
            return work()
        finally:
            inflight.release()

    @app.post("/v1/generate", response_model=GenerateResponse)
    def generate(req: GenerateRequest):
        candidates = _guarded(
            lambda: engine.generate(
                req.model_id, req.prompt, req.strategy, req.beam_width,
                req.num_return, req.max_new_chars, req.seed,
            )
        )
        return GenerateResponse(
            candidates=[CandidateModel(text=t, logprob=lp) for t, lp in candidates]
        )

    @app.post("/v1/score", response_model=ScoreResponse)
    def score(req: ScoreRequest):
        lps = _guarded(lambda: engine.score(req.model_id, req.context, req.continuation))
        return ScoreResponse(token_logprobs=lps)

    @app.post("/v1/nli", response_model=NliResponse)
    def nli(req: NliRequest):
        label, probs = _guarded(lambda: engine.nli(req.model_id, req.premise, req.hypothesis))
        return NliResponse(label=label, probs=probs)

    @app.post("/v1/similarity", response_model=SimilarityResponse)
    def similarity(req: SimilarityRequest):
        p, r, f1 = _guarded(
            lambda: engine.similarity(req.model_id, req.candidate, req.reference)
        )
        return SimilarityResponse(precision=p, recall=r, f1=f1)

    @app.post("/v1/finetune", response_model=FinetuneResponse)
    def finetune(req: FinetuneRequest):
        if (req.training_file_inline is None) == (req.training_file_ref is None):
            raise BadRequest(
                "exactly one of training_file_inline / training_file_ref is required"
            )
        if req.training_file_inline is not None:
            content = req.training_file_inline
        else:
            path = Path(req.training_file_ref)
            try:
                content = path.read_text(encoding="utf-8")
            except OSError as exc:
                raise BadRequest(f"cannot read training file {path}: {exc}")
        model_id = engine.finetune(req.base_model_id, content, req.epochs)
        return FinetuneResponse(model_id=model_id)

    @app.get("/v1/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", models=engine.model_ids())

    return app


def main(argv: Optional[List[str]] = None) -> int:
    import uvicorn

    parser = argparse.ArgumentParser(prog="sumdistill-server")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8840)
    parser.add_argument("--seed", type=int, default=1234)
    parser.add_argument("--max-inflight", type=int, default=8, dest="max_inflight")
    args = parser.parse_args(argv)
    app = create_app(EngineConfig(seed=args.seed), max_inflight=args.max_inflight)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    main()
