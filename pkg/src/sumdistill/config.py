"""Run configuration: one structured JSON file with per-command sections.

Flags override config values; the canonical config digest is embedded in run
manifests so any artifact can be traced to the exact settings that made it.
Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .backends import Backend, DecodingParams, ModelRef
from .backends.http import ENDPOINT_ENV_VAR, HttpBackend
from .backends.toy import ToyBackend
from .corpus import read_corpus
from .control import ControlPlan
from .distill import DEFAULT_NSP_L, DistillPlan, PipelineContext
from .errors import ConfigError
from .util import digest_of

# Neutral three-shot seeding exemplars for toy runs; real runs configure their own.
DEFAULT_EXEMPLARS = (
    (
        (
            "The city council voted on Tuesday night to expand the downtown bike lane network over two years.",
            "The council voted to expand the bike lane network.",
        ),
        (
            "Heavy rain across the valley flooded several county roads and delayed the morning school buses.",
            "Heavy rain flooded several county roads.",
        ),
        (
            "The research team published results showing the new alloy resists corrosion far longer than steel.",
            "The new alloy resists corrosion longer than steel.",
        ),
    ),
)

_TOY_MODEL_DEFAULTS = {
    "teacher": "toy-teacher",
    "student_base": "toy-student-base",
    "nli": "toy-nli",
    "scorer": "toy-lm",
    "similarity": "toy-sim",
}


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path

    @property
    def digest(self) -> str:
        return digest_of(self.raw)

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    def section(self, name: str) -> dict:
        value = self.raw.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        return value

    def resolve(self, path_value: str) -> Path:
        path = Path(path_value)
        return path if path.is_absolute() else self.base_dir / path

    # -- backend wiring -------------------------------------------------------

    def make_backend(self) -> Backend:
        section = self.section("backend")
        kind = section.get("kind", "toy")
        if kind == "toy":
            lm_lines: Optional[List[str]] = None
            lm_corpus = section.get("lm_corpus")
            if lm_corpus:
                corpus = read_corpus(self.resolve(lm_corpus))
                lm_lines = [rec.text for rec in corpus.records]
            return ToyBackend(
                lm_lines=lm_lines,
                teacher_mean=float(section.get("teacher_mean", 0.7)),
                teacher_sd=float(section.get("teacher_sd", 0.05)),
                seed=self.seed,
            )
        if kind == "http":
            url = section.get("url") or os.environ.get(ENDPOINT_ENV_VAR)
            if not url:
                raise ConfigError(
                    f"http backend needs backend.url or the {ENDPOINT_ENV_VAR} env var"
                )
            return HttpBackend(
                url,
                max_retries=int(section.get("max_retries", 3)),
                backoff_base=float(section.get("backoff_base", 0.1)),
                timeout=float(section.get("timeout", 60.0)),
            )
        raise ConfigError(f"unknown backend kind {kind!r}")

    def _decoding(self) -> DecodingParams:
        models = self.section("models")
        return DecodingParams(
            strategy=models.get("strategy", "beam"),
            beam_width=int(models.get("beam_width", 5)),
            max_new_chars=int(models.get("max_new_chars", 400)),
            num_return=1,
            seed=self.seed,
        )

    def model_ref(self, role: str, backend: Backend) -> ModelRef:
        models = self.section("models")
        defaults = _TOY_MODEL_DEFAULTS if backend.backend_id == "toy" else {}
        model_id = models.get(role, defaults.get(role))
        if not model_id:
            raise ConfigError(f"config names no model for role {role!r}")
        return ModelRef(backend.backend_id, model_id, self._decoding())

    def pipeline_context(self, backend: Backend) -> PipelineContext:
        section = self.section("backend")
        return PipelineContext(
            backend=backend,
            nli_model=self.model_ref("nli", backend),
            lm_model=self._optional_ref("scorer", backend),
            similarity_model=self._optional_ref("similarity", backend),
            concurrency=int(section.get("concurrency", 1)),
            undecided_budget=float(section.get("undecided_budget", 0.01)),
        )

    def _optional_ref(self, role: str, backend: Backend) -> Optional[ModelRef]:
        try:
            ref = self.model_ref(role, backend)
        except ConfigError:
            return None
        if backend.backend_id == "toy" and ref.model_id not in backend.health().models:
            return None
        return ref

    # -- plans ----------------------------------------------------------------

    def distill_plan(self) -> DistillPlan:
        section = self.section("distill")
        exemplars = section.get("exemplars")
        if exemplars:
            parsed = tuple(tuple((src, summ) for src, summ in group) for group in exemplars)
        else:
            parsed = DEFAULT_EXEMPLARS
        for group in parsed:
            if len(group) != 3:
                raise ConfigError("each exemplar set must hold exactly 3 pairs")
        epochs = section.get("epochs", section.get("epochs_per_iter", 5))
        plan = DistillPlan(
            t=int(section.get("t", 3)),
            schedule=tuple(section.get("schedule", (0.7, 0.5, 0.3))),
            filter_preset=section.get("filter_preset", "f1"),
            nsp_l=float(section.get("nsp_l", DEFAULT_NSP_L)),
            seed_keep_range=tuple(section.get("seed_keep_range", (0.6, 0.8))),
            epochs_per_iter=int(epochs),
            exemplars=parsed,
            sizes=tuple(section.get("sizes", ())),
            seed=int(section.get("seeds", self.seed)),
        )
        plan.validate()
        return plan

    def control_plan(self) -> ControlPlan:
        section = self.section("control")
        epochs = section.get("epochs", section.get("epochs_per_iter", 2))
        plan = ControlPlan(
            n_buckets=int(section.get("n_buckets", 10)),
            iterations=int(section.get("iterations", 7)),
            epochs_per_iter=int(epochs),
            code_repetitions=int(section.get("code_repetitions", 10)),
            beams_for_rescue=int(section.get("beams_for_rescue", 1)),
            f_sizes=tuple(section.get("f_sizes", ())),
            seed=int(section.get("seeds", self.seed)),
        )
        plan.validate()
        return plan


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return RunConfig(raw=raw, base_dir=path.parent.resolve())
