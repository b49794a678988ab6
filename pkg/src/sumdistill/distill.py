"""The iterative distillation loop: seed from a teacher, then repeat
generate -> filter -> fine-tune with a strictly shrinking compression schedule.

Each iteration's student is fine-tuned from the previous student, never
reinitialized. Every produced corpus, training file, and manifest line is
deterministic given the plan, input corpora, and seeds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import codec
from .backends import Backend, ModelRef
from .corpus import Corpus, KIND_SENTENCES, KIND_SUMMARY_PAIRS, Manifest, SentenceRecord, SummaryPair, read_corpus, write_corpus
from .errors import ConfigError, EmptyCorpusError, EmptyGeneration, TransportError, UndecidedBudgetExceeded
from .filters import FilterContext, FilterSpec, RejectionStats, eval_nli, eval_nsp, filter_corpus
from .util import char_count, digest_of, map_bounded, provenance_stamp

DEFAULT_SCHEDULE = (0.7, 0.5, 0.3)
DEFAULT_SEED_KEEP_RANGE = (0.6, 0.8)
DEFAULT_NSP_L = math.exp(-6)
DEFAULT_EPOCHS = 5

ExemplarSet = Tuple[Tuple[str, str], ...]


@dataclass(frozen=True)
class DistillPlan:
    """Everything that defines one distillation run."""

    t: int = 3
    schedule: Tuple[float, ...] = DEFAULT_SCHEDULE
    filter_preset: str = "f1"
    nsp_l: float = DEFAULT_NSP_L
    seed_keep_range: Tuple[float, float] = DEFAULT_SEED_KEEP_RANGE
    epochs_per_iter: int = DEFAULT_EPOCHS
    exemplars: Tuple[ExemplarSet, ...] = ()
    sizes: Tuple[int, ...] = ()
    seed: int = 0

    def validate(self) -> None:
        if self.t < 0:
            raise ConfigError(f"iteration count must be >= 0, got {self.t}")
        if len(self.schedule) != self.t:
            raise ConfigError(
                f"schedule has {len(self.schedule)} bounds for t={self.t} iterations"
            )
        for r in self.schedule:
            if not 0 < r <= 1:
                raise ConfigError(f"compression bound {r} outside (0, 1]")
        if any(a <= b for a, b in zip(self.schedule, self.schedule[1:])):
            raise ConfigError(f"schedule must be strictly decreasing, got {self.schedule}")
        if self.filter_preset not in ("f1", "f2"):
            raise ConfigError(f"unknown filter preset {self.filter_preset!r}")
        if self.nsp_l <= 0:
            raise ConfigError("NSP threshold must be positive")
        lo, hi = self.seed_keep_range
        if not 0 <= lo < hi:
            raise ConfigError(f"bad seed keep range [{lo}, {hi}]")
        if not self.exemplars or not all(self.exemplars):
            raise ConfigError("plan needs at least one non-empty exemplar set")
        if self.sizes and len(self.sizes) != self.t + 1:
            raise ConfigError(f"need {self.t + 1} partition sizes, got {len(self.sizes)}")
        if self.epochs_per_iter < 0:
            raise ConfigError("epochs must be >= 0")

    def filter_for(self, r: float) -> FilterSpec:
        if self.filter_preset == "f2":
            return FilterSpec.f2(r, self.nsp_l)
        return FilterSpec.f1(r)

    def describe(self) -> dict:
        return {
            "t": self.t,
            "schedule": list(self.schedule),
            "filter_preset": self.filter_preset,
            "nsp_l": self.nsp_l,
            "seed_keep_range": list(self.seed_keep_range),
            "epochs_per_iter": self.epochs_per_iter,
            "exemplars": [[list(pair) for pair in group] for group in self.exemplars],
            "sizes": list(self.sizes),
            "seed": self.seed,
        }

    def digest(self) -> str:
        return digest_of(self.describe())


@dataclass
class PipelineContext:
    """Shared backend wiring for pipelines and filters."""

    backend: Backend
    nli_model: Optional[ModelRef] = None
    lm_model: Optional[ModelRef] = None
    similarity_model: Optional[ModelRef] = None
    concurrency: int = 1
    undecided_budget: float = 0.01

    def filter_context(self) -> FilterContext:
        return FilterContext(
            backend=self.backend,
            nli_model=self.nli_model,
            lm_model=self.lm_model,
            undecided_budget=self.undecided_budget,
            concurrency=self.concurrency,
        )


@dataclass
class GenStats:
    prompted: int = 0
    empty_generation: int = 0
    skipped_no_context: int = 0

    def to_json(self) -> dict:
        return {
            "prompted": self.prompted,
            "empty_generation": self.empty_generation,
            "skipped_no_context": self.skipped_no_context,
        }


@dataclass
class SeedStats(GenStats):
    out_of_range: int = 0
    rejected_nli: int = 0
    rejected_nsp: int = 0
    undecided: int = 0
    kept: int = 0

    def to_json(self) -> dict:
        base = super().to_json()
        base.update(
            {
                "out_of_range": self.out_of_range,
                "rejected_nli": self.rejected_nli,
                "rejected_nsp": self.rejected_nsp,
                "undecided": self.undecided,
                "kept": self.kept,
            }
        )
        return base


def _context_records(corpus: Corpus, needs_context: bool, stats: GenStats) -> List[SentenceRecord]:
    """Drop records without a following sentence when the filter needs one."""
    if not needs_context:
        return list(corpus.records)
    kept = []
    for rec in corpus.records:
        if rec.next_text:
            kept.append(rec)
        else:
            stats.skipped_no_context += 1
    return kept


def seed_from_teacher(
    teacher: ModelRef,
    d0: Corpus,
    plan: DistillPlan,
    ctx: PipelineContext,
    *,
    name: str = "C0",
    created_at: str = "",
) -> "tuple[Corpus, SeedStats]":
    """Few-shot prompt the teacher over d0 and keep pairs whose measured ratio
    falls in the seed keep range and that pass the fidelity checks."""
    plan.validate()
    if d0.kind != KIND_SENTENCES:
        raise ConfigError(f"seeding needs a sentence corpus, got {d0.kind!r}")
    if ctx.nli_model is None:
        raise ConfigError("seeding requires an NLI model in the pipeline context")
    exemplars = plan.exemplars[0]
    needs_nsp = plan.filter_preset == "f2"
    if needs_nsp and ctx.lm_model is None:
        raise ConfigError("the contextual filter requires a scoring model")
    stats = SeedStats()
    records = _context_records(d0, needs_nsp, stats)
    teacher_ref = teacher.with_decoding(num_return=1)
    lo, hi = plan.seed_keep_range

    def generate_one(rec: SentenceRecord):
        prompt = codec.assemble_fewshot_prompt(exemplars, rec.text)
        result = ctx.backend.generate(teacher_ref, prompt)
        return result.top

    candidates = map_bounded(generate_one, records, ctx.concurrency)
    kept: List[SummaryPair] = []
    for rec, cand in zip(records, candidates):
        stats.prompted += 1
        try:
            summary = codec.parse_generation(cand.text)
        except EmptyGeneration:
            stats.empty_generation += 1
            continue
        pair = SummaryPair.create(
            source_id=rec.id,
            doc_id=rec.doc_id,
            source=rec.text,
            summary=summary,
            next_text=rec.next_text,
            logprob=cand.logprob,
        )
        if not lo <= pair.ratio <= hi:
            stats.out_of_range += 1
            continue
        try:
            if not eval_nli(ctx.backend, ctx.nli_model, pair.source, pair.summary).passed:
                stats.rejected_nli += 1
                continue
            if needs_nsp and not eval_nsp(
                ctx.backend, ctx.lm_model, pair.source, pair.summary, pair.next_text, plan.nsp_l
            ).passed:
                stats.rejected_nsp += 1
                continue
        except TransportError:
            stats.undecided += 1
            continue
        stats.kept += 1
        kept.append(pair)
    if stats.prompted and stats.undecided / stats.prompted > ctx.undecided_budget:
        raise UndecidedBudgetExceeded(
            f"seeding left {stats.undecided}/{stats.prompted} pairs undecided"
        )
    manifest = Manifest(
        name=name,
        kind=KIND_SUMMARY_PAIRS,
        parents=(d0.name,),
        filter_digest=digest_of(
            {"seed_keep_range": list(plan.seed_keep_range), "nli": True, "nsp": plan.nsp_l if needs_nsp else None}
        ),
        model_ref=teacher.label(),
        iteration=0,
        seed=plan.seed,
        created_at=created_at,
    )
    return Corpus(manifest=manifest, records=kept), stats


def generate_pairs(
    model: ModelRef,
    sentences: Sequence[SentenceRecord],
    ctx: PipelineContext,
    stats: GenStats,
) -> List[SummaryPair]:
    """One summary per sentence (top candidate), empty generations dropped."""
    ref = model.with_decoding(num_return=1)

    def generate_one(rec: SentenceRecord):
        prompt = codec.build_generation_prompt(rec.text)
        return ctx.backend.generate(ref, prompt).top

    candidates = map_bounded(generate_one, sentences, ctx.concurrency)
    pairs: List[SummaryPair] = []
    for rec, cand in zip(sentences, candidates):
        stats.prompted += 1
        try:
            summary = codec.parse_generation(cand.text)
        except EmptyGeneration:
            stats.empty_generation += 1
            continue
        pairs.append(
            SummaryPair.create(
                source_id=rec.id,
                doc_id=rec.doc_id,
                source=rec.text,
                summary=summary,
                next_text=rec.next_text,
                logprob=cand.logprob,
            )
        )
    return pairs


def distill_iteration(
    model: ModelRef,
    d_i: Corpus,
    filter_spec: FilterSpec,
    ctx: PipelineContext,
    *,
    name: str,
    iteration: int,
    created_at: str = "",
) -> "tuple[Corpus, RejectionStats, GenStats]":
    """Generate one summary per sentence, then keep only pairs the filter accepts."""
    if d_i.kind != KIND_SENTENCES:
        raise ConfigError(f"distill iteration needs sentences, got {d_i.kind!r}")
    stats = GenStats()
    records = _context_records(d_i, filter_spec.needs_context(), stats)
    pairs = generate_pairs(model, records, ctx, stats)
    raw = Corpus(
        manifest=Manifest(
            name=f"{name}.raw",
            kind=KIND_SUMMARY_PAIRS,
            parents=(d_i.name,),
            model_ref=model.label(),
            iteration=iteration,
            created_at=created_at,
        ),
        records=pairs,
    )
    filtered, rejection = filter_corpus(filter_spec, raw, ctx.filter_context(), name=name)
    filtered.manifest = Manifest(
        name=name,
        kind=KIND_SUMMARY_PAIRS,
        parents=(d_i.name,),
        filter_digest=filter_spec.digest(),
        model_ref=model.label(),
        iteration=iteration,
        seed=None,
        created_at=created_at,
    )
    return filtered, rejection, stats


def write_training_file(corpus: Corpus, path: Path) -> str:
    """Serialize a pair corpus in the fine-tuning record format; returns digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [codec.encode_distill_record(p.source, p.summary) for p in corpus.records]
    content = "\n".join(lines) + ("\n" if lines else "")
    path.write_text(content, encoding="utf-8")
    return digest_of(content)


class RunLog:
    """Append-only JSONL manifest, complete enough to resume any iteration."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.events: List[dict] = []
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    self.events.append(json.loads(line))

    def find(self, event: str, **match) -> Optional[dict]:
        for entry in self.events:
            if entry.get("event") == event and all(entry.get(k) == v for k, v in match.items()):
                return entry
        return None

    def append(self, entry: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8", newline="\n") as out:
            out.write(json.dumps(entry, sort_keys=True, ensure_ascii=False))
            out.write("\n")
        self.events.append(entry)


@dataclass
class DistillResult:
    corpora: List[Corpus]
    models: List[ModelRef]
    out_dir: Path
    manifest_path: Path


def _ensure_model(
    ctx: PipelineContext,
    base: ModelRef,
    training_file: Path,
    epochs: int,
    expected_id: Optional[str],
) -> ModelRef:
    """Reuse a recorded model when the backend still serves it, else re-fit.

    Toy fine-tunes are deterministic, so replaying from the stored training
    file reconstructs the identical model.
    """
    if expected_id and expected_id in ctx.backend.health().models:
        return ModelRef(base.backend_id, expected_id, base.decoding)
    model = ctx.backend.finetune(base, training_file, epochs)
    if expected_id and model.model_id != expected_id:
        raise ConfigError(
            f"resume mismatch: manifest recorded model {expected_id!r}, "
            f"fine-tune produced {model.model_id!r}"
        )
    return model


def run_distill(
    plan: DistillPlan,
    teacher: ModelRef,
    student_base: ModelRef,
    d_parts: Sequence[Corpus],
    ctx: PipelineContext,
    out_dir: Path,
    *,
    resume: bool = False,
    config_digest: Optional[str] = None,
) -> DistillResult:
    """Execute the full loop: C0 from the teacher, then t generate/filter/train steps."""
    plan.validate()
    if len(d_parts) != plan.t + 1:
        raise ConfigError(f"need {plan.t + 1} sentence partitions, got {len(d_parts)}")
    out_dir = Path(out_dir)
    corpora_dir = out_dir / "corpora"
    training_dir = out_dir / "training"
    log = RunLog(out_dir / "manifest.jsonl")
    if not resume and log.events:
        raise ConfigError(f"{log.path} already holds a run; pass resume to continue")
    created_at = provenance_stamp("distill", plan.digest())
    if not log.find("plan"):
        log.append(
            {
                "event": "plan",
                "digest": plan.digest(),
                "config_digest": config_digest,
                "plan": plan.describe(),
                "created_at": created_at,
            }
        )

    def corpus_path(name: str) -> Path:
        return corpora_dir / f"{name}.jsonl"

    # Seed corpus from the teacher.
    seed_event = log.find("seed")
    if resume and seed_event and corpus_path("C0").exists():
        c0 = read_corpus(corpus_path("C0"))
    else:
        c0, seed_stats = seed_from_teacher(teacher, d_parts[0], plan, ctx, created_at=created_at)
        write_corpus(c0, corpus_path("C0"))
        log.append(
            {
                "event": "seed",
                "corpus": "C0",
                "path": "corpora/C0.jsonl",
                "input": d_parts[0].name,
                "teacher": teacher.label(),
                "stats": seed_stats.to_json(),
            }
        )
    corpora = [c0]
    if len(c0) == 0:
        raise EmptyCorpusError(
            "seed corpus C0 is empty: the teacher produced no pairs inside the keep "
            f"range {list(plan.seed_keep_range)} that pass the fidelity checks"
        )

    models: List[ModelRef] = []
    current = student_base
    for i in range(plan.t + 1):
        # Fine-tune M_{i+1} from the current student on C_i.
        train_path = training_dir / f"C{i}.train.txt"
        train_digest = write_training_file(corpora[i], train_path)
        tune_event = log.find("finetune", index=i)
        expected = tune_event["model"] if (resume and tune_event) else None
        model = _ensure_model(ctx, current, train_path, plan.epochs_per_iter, expected)
        if not tune_event:
            log.append(
                {
                    "event": "finetune",
                    "index": i,
                    "base": current.label(),
                    "model": model.model_id,
                    "training_file": f"training/C{i}.train.txt",
                    "training_digest": train_digest,
                    "epochs": plan.epochs_per_iter,
                }
            )
        models.append(model)
        current = model
        if i == plan.t:
            break
        # Generate and filter C_{i+1}.
        index = i + 1
        name = f"C{index}"
        r = plan.schedule[i]
        iter_event = log.find("iteration", index=index)
        if resume and iter_event and corpus_path(name).exists():
            corpora.append(read_corpus(corpus_path(name)))
            continue
        filter_spec = plan.filter_for(r)
        filtered, rejection, gen_stats = distill_iteration(
            model, d_parts[index], filter_spec, ctx, name=name, iteration=index, created_at=created_at
        )
        write_corpus(filtered, corpus_path(name))
        log.append(
            {
                "event": "iteration",
                "index": index,
                "corpus": name,
                "path": f"corpora/{name}.jsonl",
                "input": d_parts[index].name,
                "model": model.model_id,
                "r": r,
                "filter_digest": filter_spec.digest(),
                "generation": gen_stats.to_json(),
                "rejection": rejection.to_json(),
            }
        )
        if len(filtered) == 0:
            raise EmptyCorpusError(
                f"iteration {index} produced an empty corpus: filter r={r} is too "
                f"strict for the current student ({rejection.to_json()})"
            )
        corpora.append(filtered)
    return DistillResult(corpora=corpora, models=models, out_dir=out_dir, manifest_path=log.path)


@dataclass(frozen=True)
class TrajectoryRow:
    source_id: str
    step: int
    length: Optional[int]
    ratio_to_source: Optional[float]
    status: str  # ok | truncated

    def to_json(self) -> dict:
        return {
            "source_id": self.source_id,
            "step": self.step,
            "length": self.length,
            "ratio_to_source": self.ratio_to_source,
            "status": self.status,
        }


def idempotence_probe(
    model: ModelRef,
    sentences: Corpus,
    depth: int,
    ctx: PipelineContext,
    *,
    exemplars: Optional[ExemplarSet] = None,
) -> List[TrajectoryRow]:
    """Apply the summarizer to its own output ``depth`` times and record lengths.

    Emits exactly len(sentences) * depth rows; once a chain dies (empty
    generation) its remaining rows are flagged truncated.
    """
    if depth < 2:
        raise ConfigError(f"probe depth must be >= 2, got {depth}")
    if sentences.kind != KIND_SENTENCES:
        raise ConfigError("idempotence probe needs a sentence corpus")
    ref = model.with_decoding(num_return=1)

    def chain(rec: SentenceRecord) -> List[TrajectoryRow]:
        rows = []
        current = rec.text
        alive = True
        base_len = char_count(rec.text)
        for step in range(1, depth + 1):
            if not alive:
                rows.append(TrajectoryRow(rec.id, step, None, None, "truncated"))
                continue
            if exemplars:
                prompt = codec.assemble_fewshot_prompt(exemplars, current)
            else:
                prompt = codec.build_generation_prompt(current)
            try:
                summary = codec.parse_generation(ctx.backend.generate(ref, prompt).top.text)
            except EmptyGeneration:
                alive = False
                rows.append(TrajectoryRow(rec.id, step, None, None, "truncated"))
                continue
            rows.append(
                TrajectoryRow(rec.id, step, char_count(summary), char_count(summary) / base_len, "ok")
            )
            current = summary
        return rows

    nested = map_bounded(chain, sentences.records, ctx.concurrency)
    return [row for rows in nested for row in rows]
