"""The single contract through which all neural functionality is reached.

Every implementation (deterministic toys for offline runs, the HTTP client
for a served backend) exposes the same six operations and passes the shared
conformance suite in ``conformance.py``.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from ..errors import BackendError, BadRequestError, ModelNotFoundError, TransportError

STRATEGY_BEAM = "beam"
STRATEGY_SAMPLE = "sample"

LABEL_ENTAILMENT = "Entailment"
LABEL_NEUTRAL = "Neutral"
LABEL_CONTRADICTION = "Contradiction"
NLI_LABELS = (LABEL_ENTAILMENT, LABEL_NEUTRAL, LABEL_CONTRADICTION)


@dataclass(frozen=True)
class DecodingParams:
    strategy: str = STRATEGY_BEAM
    beam_width: int = 5
    max_new_chars: int = 400
    num_return: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in (STRATEGY_BEAM, STRATEGY_SAMPLE):
            raise BadRequestError(f"unknown decoding strategy {self.strategy!r}")
        if not self.beam_width >= self.num_return >= 1:
            raise BadRequestError(
                f"need beam_width >= num_return >= 1, got {self.beam_width} < {self.num_return}"
            )
        if self.max_new_chars < 1:
            raise BadRequestError("max_new_chars must be positive")


@dataclass(frozen=True)
class ModelRef:
    """Identifies a model on a backend plus its decoding parameters."""

    backend_id: str
    model_id: str
    decoding: DecodingParams = field(default_factory=DecodingParams)

    def with_decoding(self, **kwargs) -> "ModelRef":
        return replace(self, decoding=replace(self.decoding, **kwargs))

    def label(self) -> str:
        return f"{self.backend_id}:{self.model_id}"


@dataclass(frozen=True)
class Candidate:
    text: str
    logprob: float


@dataclass(frozen=True)
class GenerationResult:
    candidates: "tuple[Candidate, ...]"

    @classmethod
    def from_candidates(cls, candidates: Sequence[Candidate]) -> "GenerationResult":
        ordered = sorted(candidates, key=lambda c: -c.logprob)
        return cls(candidates=tuple(ordered))

    @property
    def top(self) -> Candidate:
        if not self.candidates:
            raise BackendError("generation returned no candidates")
        return self.candidates[0]


@dataclass(frozen=True)
class NliResult:
    label: str
    probs: Dict[str, float]


@dataclass(frozen=True)
class SimilarityScore:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class HealthStatus:
    status: str
    models: "tuple[str, ...]"


class Backend(ABC):
    """Generation, scoring, NLI, similarity, and fine-tuning provider."""

    backend_id: str

    @abstractmethod
    def generate(self, model: ModelRef, prompt: str) -> GenerationResult: ...

    @abstractmethod
    def score_conditional(self, model: ModelRef, context: str, continuation: str) -> List[float]: ...

    def score_unconditional(self, model: ModelRef, text: str) -> List[float]:
        return self.score_conditional(model, "", text)

    @abstractmethod
    def nli(self, model: ModelRef, premise: str, hypothesis: str) -> NliResult: ...

    @abstractmethod
    def similarity(self, model: ModelRef, candidate: str, reference: str) -> SimilarityScore: ...

    @abstractmethod
    def finetune(self, base: ModelRef, training_file: Path, epochs: int) -> ModelRef: ...

    @abstractmethod
    def health(self) -> HealthStatus: ...


__all__ = [
    "Backend",
    "BackendError",
    "BadRequestError",
    "Candidate",
    "DecodingParams",
    "GenerationResult",
    "HealthStatus",
    "LABEL_CONTRADICTION",
    "LABEL_ENTAILMENT",
    "LABEL_NEUTRAL",
    "ModelNotFoundError",
    "ModelRef",
    "NLI_LABELS",
    "NliResult",
    "SimilarityScore",
    "STRATEGY_BEAM",
    "STRATEGY_SAMPLE",
    "TransportError",
]
