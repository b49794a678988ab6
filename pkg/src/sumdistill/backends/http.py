"""Networked client for the backend wire protocol.

All bodies are UTF-8 JSON over HTTP. Idempotent calls (seeded generation and
all scoring) are retried up to 3 times with exponential backoff; fine-tune
jobs are never retried.
"""

from __future__ import annotations

import os
import time
from pathlib import Path
from typing import List, Optional

import httpx

from ..errors import BadRequestError, BackendError, ModelNotFoundError, TransportError
from . import (
    Backend,
    Candidate,
    GenerationResult,
    HealthStatus,
    ModelRef,
    NliResult,
    SimilarityScore,
)

ENDPOINT_ENV_VAR = "REFEREE_BACKEND_URL"

_FATAL_CODES = {
    "model_not_found": ModelNotFoundError,
    "bad_request": BadRequestError,
}


class HttpBackend(Backend):
    backend_id = "http"

    def __init__(
        self,
        base_url: Optional[str] = None,
        *,
        client: Optional[httpx.Client] = None,
        max_retries: int = 3,
        backoff_base: float = 0.1,
        timeout: float = 60.0,
    ):
        if client is not None:
            self._client = client
        else:
            url = base_url or os.environ.get(ENDPOINT_ENV_VAR)
            if not url:
                raise BackendError(
                    f"no backend endpoint: pass base_url or set {ENDPOINT_ENV_VAR}"
                )
            self._client = httpx.Client(base_url=url, timeout=timeout)
        self.max_retries = max_retries
        self.backoff_base = backoff_base

    def close(self) -> None:
        self._client.close()

    def _request(self, method: str, path: str, payload: Optional[dict], idempotent: bool) -> dict:
        attempts = self.max_retries + 1 if idempotent else 1
        last_error: Optional[Exception] = None
        for attempt in range(attempts):
            if attempt:
                time.sleep(self.backoff_base * (2 ** (attempt - 1)))
            try:
                if method == "GET":
                    response = self._client.get(path)
                else:
                    response = self._client.post(path, json=payload)
            except httpx.HTTPError as exc:
                last_error = TransportError(f"{path}: {exc}")
                continue
            if response.status_code == 200:
                return response.json()
            code, message = self._error_body(response)
            if code in _FATAL_CODES:
                raise _FATAL_CODES[code](f"{path}: {message}")
            last_error = TransportError(f"{path}: {code}: {message}")
            if not idempotent:
                break
        raise last_error if last_error else TransportError(f"{path}: request failed")

    @staticmethod
    def _error_body(response: httpx.Response) -> "tuple[str, str]":
        try:
            err = response.json()["error"]
            return err["code"], err.get("message", "")
        except Exception:
            return f"http_{response.status_code}", response.text[:200]

    def generate(self, model: ModelRef, prompt: str) -> GenerationResult:
        payload = {
            "model_id": model.model_id,
            "prompt": prompt,
            "strategy": model.decoding.strategy,
            "beam_width": model.decoding.beam_width,
            "num_return": model.decoding.num_return,
            "max_new_chars": model.decoding.max_new_chars,
            "seed": model.decoding.seed,
        }
        body = self._request("POST", "/v1/generate", payload, idempotent=True)
        candidates = [Candidate(text=c["text"], logprob=c["logprob"]) for c in body["candidates"]]
        return GenerationResult.from_candidates(candidates)

    def score_conditional(self, model: ModelRef, context: str, continuation: str) -> List[float]:
        payload = {"model_id": model.model_id, "context": context, "continuation": continuation}
        body = self._request("POST", "/v1/score", payload, idempotent=True)
        return list(body["token_logprobs"])

    def nli(self, model: ModelRef, premise: str, hypothesis: str) -> NliResult:
        payload = {"model_id": model.model_id, "premise": premise, "hypothesis": hypothesis}
        body = self._request("POST", "/v1/nli", payload, idempotent=True)
        return NliResult(label=body["label"], probs=dict(body["probs"]))

    def similarity(self, model: ModelRef, candidate: str, reference: str) -> SimilarityScore:
        payload = {"model_id": model.model_id, "candidate": candidate, "reference": reference}
        body = self._request("POST", "/v1/similarity", payload, idempotent=True)
        return SimilarityScore(
            precision=body["precision"], recall=body["recall"], f1=body["f1"]
        )

    def finetune(self, base: ModelRef, training_file: Path, epochs: int) -> ModelRef:
        payload = {
            "base_model_id": base.model_id,
            "training_file_inline": Path(training_file).read_text(encoding="utf-8"),
            "training_file_ref": None,
            "epochs": epochs,
        }
        body = self._request("POST", "/v1/finetune", payload, idempotent=False)
        return ModelRef(self.backend_id, body["model_id"], base.decoding)

    def health(self) -> HealthStatus:
        body = self._request("GET", "/v1/health", None, idempotent=True)
        return HealthStatus(status=body["status"], models=tuple(body["models"]))
