"""The bucket-control loop: build a bucket-labeled seed from distillation
corpora, balance buckets, then iterate per-bucket generation with beam rescue,
fidelity/fluency filtering, relabeling, and retraining.

Pairs are always stored under the bucket their measured ratio actually lands
in; the bucket used for prompting is kept alongside so conditioning accuracy
stays measurable after relabeling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import codec
from .backends import GenerationResult, ModelRef
from .corpus import Corpus, KIND_SENTENCES, KIND_SUMMARY_PAIRS, Manifest, SentenceRecord, SummaryPair, read_corpus, write_corpus
from .distill import PipelineContext, RunLog, _ensure_model
from .errors import ConfigError, EmptyCorpusError, EmptyGeneration
from .filters import FilterSpec, filter_corpus
from .metrics import OVERFLOW, BucketSpec, bucket_of
from .util import char_count, digest_of, map_bounded, provenance_stamp, rng_from


@dataclass(frozen=True)
class ControlPlan:
    n_buckets: int = 10
    iterations: int = 7
    epochs_per_iter: int = 2
    code_repetitions: int = codec.DEFAULT_CODE_REPETITIONS
    beams_for_rescue: int = 1
    f_sizes: Tuple[int, ...] = ()
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.n_buckets <= codec.MAX_BUCKETS:
            raise ConfigError(f"bucket count must be in [1, {codec.MAX_BUCKETS}], got {self.n_buckets}")
        if self.iterations < 1:
            raise ConfigError("control loop needs at least one iteration")
        if self.code_repetitions < 1:
            raise ConfigError("control code needs at least one repetition")
        if self.beams_for_rescue < 1:
            raise ConfigError("beam rescue needs at least one beam")
        if self.epochs_per_iter < 0:
            raise ConfigError("epochs must be >= 0")

    def bucket_spec(self) -> BucketSpec:
        return BucketSpec(self.n_buckets)

    def describe(self) -> dict:
        return {
            "n_buckets": self.n_buckets,
            "iterations": self.iterations,
            "epochs_per_iter": self.epochs_per_iter,
            "code_repetitions": self.code_repetitions,
            "beams_for_rescue": self.beams_for_rescue,
            "f_sizes": list(self.f_sizes),
            "seed": self.seed,
        }

    def digest(self) -> str:
        return digest_of(self.describe())


@dataclass
class BucketedCorpus:
    """Summary pairs partitioned by the bucket of their measured ratio."""

    corpus: Corpus
    spec: BucketSpec

    def __len__(self) -> int:
        return len(self.corpus)

    def validate(self) -> None:
        self.corpus.validate()
        for pair in self.corpus.records:
            actual = bucket_of(pair.ratio, self.spec)
            if actual is OVERFLOW:
                raise ConfigError(f"pair {pair.id} overflows every bucket (ratio {pair.ratio})")
            if pair.actual_bucket != actual:
                raise ConfigError(
                    f"pair {pair.id} labeled bucket {pair.actual_bucket} but ratio "
                    f"{pair.ratio} lands in bucket {actual}"
                )

    def buckets(self) -> Dict[int, List[SummaryPair]]:
        grouped: Dict[int, List[SummaryPair]] = {j: [] for j in range(self.spec.n)}
        for pair in self.corpus.records:
            grouped[pair.actual_bucket].append(pair)
        return grouped

    def occupancy(self) -> Dict[int, int]:
        return {j: len(pairs) for j, pairs in self.buckets().items()}


def load_bucketed(path: Path, n_buckets: int) -> BucketedCorpus:
    bucketed = BucketedCorpus(corpus=read_corpus(path), spec=BucketSpec(n_buckets))
    bucketed.validate()
    return bucketed


@dataclass
class SeedReport:
    total_pairs: int
    overflow_dropped: int
    occupancy: Dict[int, int]
    rejection: dict

    def to_json(self) -> dict:
        return {
            "total_pairs": self.total_pairs,
            "overflow_dropped": self.overflow_dropped,
            "occupancy": {str(k): v for k, v in sorted(self.occupancy.items())},
            "rejection": self.rejection,
        }


def build_control_seed(
    distill_corpora: Sequence[Corpus],
    ctx: PipelineContext,
    n_buckets: int,
    *,
    name: str = "E0",
    created_at: str = "",
) -> "tuple[BucketedCorpus, SeedReport]":
    """Union the distillation corpora, label by measured bucket, filter with
    the entailment-plus-fluency conjunction, and drop overflow pairs."""
    spec = BucketSpec(n_buckets)
    union: List[SummaryPair] = []
    overflow = 0
    for corpus in distill_corpora:
        if corpus.kind != KIND_SUMMARY_PAIRS:
            raise ConfigError(f"control seed needs summary pairs, got {corpus.kind!r}")
        for pair in corpus.records:
            bucket = bucket_of(pair.ratio, spec)
            if bucket is OVERFLOW:
                overflow += 1
                continue
            union.append(
                replace(pair, id=f"{corpus.name}/{pair.id}", actual_bucket=bucket)
            )
    if not union:
        raise EmptyCorpusError("control seed is empty: no in-bucket pairs in the distill corpora")
    parents = tuple(c.name for c in distill_corpora)
    raw = Corpus(
        manifest=Manifest(
            name=f"{name}.raw", kind=KIND_SUMMARY_PAIRS, parents=parents, created_at=created_at
        ),
        records=union,
    )
    h = FilterSpec.h()
    filtered, rejection = filter_corpus(h, raw, ctx.filter_context(), name=name)
    filtered.manifest = Manifest(
        name=name,
        kind=KIND_SUMMARY_PAIRS,
        parents=parents,
        filter_digest=h.digest(),
        iteration=0,
        created_at=created_at,
    )
    bucketed = BucketedCorpus(corpus=filtered, spec=spec)
    report = SeedReport(
        total_pairs=len(union) + overflow,
        overflow_dropped=overflow,
        occupancy=bucketed.occupancy(),
        rejection=rejection.to_json(),
    )
    return bucketed, report


@dataclass
class BalanceReport:
    min_size: int
    sizes_before: Dict[int, int]
    sizes_after: Dict[int, int]
    empty_buckets: List[int]

    def to_json(self) -> dict:
        return {
            "min_size": self.min_size,
            "sizes_before": {str(k): v for k, v in sorted(self.sizes_before.items())},
            "sizes_after": {str(k): v for k, v in sorted(self.sizes_after.items())},
            "empty_buckets": self.empty_buckets,
        }


def balance_buckets(e: BucketedCorpus, seed: int) -> "tuple[BucketedCorpus, BalanceReport]":
    """Downsample every non-empty bucket to the smallest non-empty bucket's size."""
    grouped = e.buckets()
    sizes_before = {j: len(pairs) for j, pairs in grouped.items()}
    non_empty = [j for j, n in sizes_before.items() if n]
    if not non_empty:
        raise EmptyCorpusError("cannot balance: every bucket is empty")
    min_size = min(sizes_before[j] for j in non_empty)
    kept: List[SummaryPair] = []
    sizes_after: Dict[int, int] = {}
    for j in sorted(grouped):
        pairs = grouped[j]
        if not pairs:
            sizes_after[j] = 0
            continue
        rng = rng_from(seed, "balance", j)
        chosen = sorted(rng.sample(range(len(pairs)), min_size))
        kept.extend(pairs[i] for i in chosen)
        sizes_after[j] = min_size
    manifest = Manifest(
        name=f"{e.corpus.name}.balanced",
        kind=KIND_SUMMARY_PAIRS,
        parents=(e.corpus.name,),
        filter_digest=e.corpus.manifest.filter_digest,
        iteration=e.corpus.manifest.iteration,
        seed=seed,
        created_at=e.corpus.manifest.created_at,
    )
    balanced = BucketedCorpus(corpus=Corpus(manifest=manifest, records=kept), spec=e.spec)
    report = BalanceReport(
        min_size=min_size,
        sizes_before=sizes_before,
        sizes_after=sizes_after,
        empty_buckets=[j for j in sorted(sizes_before) if sizes_before[j] == 0],
    )
    return balanced, report


@dataclass(frozen=True)
class RescueChoice:
    summary: str
    logprob: float
    unrescued: bool


def beam_rescue(
    result: GenerationResult,
    prompted_bucket: int,
    spec: BucketSpec,
    source: str,
) -> RescueChoice:
    """Most likely candidate whose ratio lands in the prompted bucket; falls
    back to the overall top candidate (flagged) when none qualifies."""
    fallback: Optional[RescueChoice] = None
    src_len = char_count(source)
    for cand in result.candidates:
        try:
            summary = codec.parse_generation(cand.text)
        except EmptyGeneration:
            continue
        if fallback is None:
            fallback = RescueChoice(summary=summary, logprob=cand.logprob, unrescued=True)
        ratio = char_count(summary) / src_len
        if bucket_of(ratio, spec) == prompted_bucket:
            return RescueChoice(summary=summary, logprob=cand.logprob, unrescued=False)
    if fallback is None:
        raise EmptyGeneration("every beam candidate was empty")
    return fallback


def _quantiles(values: Sequence[float]) -> List[float]:
    """[min, q1, median, q3, max] with linear interpolation."""
    ordered = sorted(values)
    n = len(ordered)

    def q(p: float) -> float:
        if n == 1:
            return ordered[0]
        pos = p * (n - 1)
        lo = int(pos)
        hi = min(lo + 1, n - 1)
        frac = pos - lo
        return ordered[lo] * (1 - frac) + ordered[hi] * frac

    return [q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)]


@dataclass
class BucketRow:
    bucket: int
    count_prompted: int
    count_in_bucket: int
    accuracy: float
    quantiles: List[float]

    def to_json(self) -> dict:
        return {
            "bucket": self.bucket,
            "count_prompted": self.count_prompted,
            "count_in_bucket": self.count_in_bucket,
            "accuracy": self.accuracy,
            "q0": self.quantiles[0],
            "q1": self.quantiles[1],
            "q2": self.quantiles[2],
            "q3": self.quantiles[3],
            "q4": self.quantiles[4],
        }


@dataclass
class ControlIterationStats:
    accuracy: float
    accuracy_top1: float
    generated: int
    empty_generation: int
    overflow_dropped: int
    bucket_rows: List[BucketRow]
    rejection: dict

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "accuracy_top1": self.accuracy_top1,
            "generated": self.generated,
            "empty_generation": self.empty_generation,
            "overflow_dropped": self.overflow_dropped,
            "buckets": [row.to_json() for row in self.bucket_rows],
            "rejection": self.rejection,
        }


def control_iteration(
    model: ModelRef,
    f_i: Corpus,
    plan: ControlPlan,
    ctx: PipelineContext,
    *,
    name: str,
    iteration: int,
    created_at: str = "",
) -> "tuple[BucketedCorpus, ControlIterationStats]":
    """Generate per bucket for every sentence, rescue, filter, and relabel.

    Conditioning accuracy (actual bucket == prompted bucket) is measured on
    every rescued generation before filtering and relabeling.
    """
    if f_i.kind != KIND_SENTENCES:
        raise ConfigError(f"control iteration needs sentences, got {f_i.kind!r}")
    plan.validate()
    spec = plan.bucket_spec()
    ref = model.with_decoding(
        num_return=plan.beams_for_rescue,
        beam_width=max(plan.beams_for_rescue, 5),
    )
    tasks = [(rec, j) for rec in f_i.records for j in range(plan.n_buckets)]

    def generate_one(task: "tuple[SentenceRecord, int]") -> Optional[GenerationResult]:
        rec, j = task
        prompt = codec.build_generation_prompt(
            rec.text, (j, plan.n_buckets, plan.code_repetitions)
        )
        return ctx.backend.generate(ref, prompt)

    results = map_bounded(generate_one, tasks, ctx.concurrency)

    pairs: List[SummaryPair] = []
    empty = 0
    overflow = 0
    hits = 0
    top1_hits = 0
    judged = 0
    per_bucket_ratios: Dict[int, List[float]] = {j: [] for j in range(plan.n_buckets)}
    per_bucket_hits: Dict[int, int] = {j: 0 for j in range(plan.n_buckets)}
    for (rec, j), result in zip(tasks, results):
        try:
            choice = beam_rescue(result, j, spec, rec.text)
        except EmptyGeneration:
            empty += 1
            continue
        pair = SummaryPair.create(
            source_id=rec.id,
            doc_id=rec.doc_id,
            source=rec.text,
            summary=choice.summary,
            pair_id=f"{rec.id}.b{j}",
            next_text=rec.next_text,
            prompted_bucket=j,
            logprob=choice.logprob,
            unrescued=choice.unrescued or None,
        )
        judged += 1
        per_bucket_ratios[j].append(pair.ratio)
        actual = bucket_of(pair.ratio, spec)
        if actual == j:
            hits += 1
            per_bucket_hits[j] += 1
        try:
            top1_summary = codec.parse_generation(result.candidates[0].text)
            top1_ratio = SummaryPair.create(
                source_id=rec.id, doc_id=rec.doc_id, source=rec.text, summary=top1_summary
            ).ratio
            if bucket_of(top1_ratio, spec) == j:
                top1_hits += 1
        except EmptyGeneration:
            pass
        if actual is OVERFLOW:
            overflow += 1
            continue
        pairs.append(replace(pair, actual_bucket=actual))

    raw = Corpus(
        manifest=Manifest(
            name=f"{name}.raw",
            kind=KIND_SUMMARY_PAIRS,
            parents=(f_i.name,),
            model_ref=model.label(),
            iteration=iteration,
            created_at=created_at,
        ),
        records=pairs,
    )
    h = FilterSpec.h()
    filtered, rejection = filter_corpus(h, raw, ctx.filter_context(), name=name)
    filtered.manifest = Manifest(
        name=name,
        kind=KIND_SUMMARY_PAIRS,
        parents=(f_i.name,),
        filter_digest=h.digest(),
        model_ref=model.label(),
        iteration=iteration,
        seed=None,
        created_at=created_at,
    )
    bucket_rows = [
        BucketRow(
            bucket=j,
            count_prompted=len(per_bucket_ratios[j]),
            count_in_bucket=per_bucket_hits[j],
            accuracy=per_bucket_hits[j] / len(per_bucket_ratios[j]) if per_bucket_ratios[j] else 0.0,
            quantiles=_quantiles(per_bucket_ratios[j]) if per_bucket_ratios[j] else [0.0] * 5,
        )
        for j in range(plan.n_buckets)
    ]
    stats = ControlIterationStats(
        accuracy=hits / judged if judged else 0.0,
        accuracy_top1=top1_hits / judged if judged else 0.0,
        generated=judged,
        empty_generation=empty,
        overflow_dropped=overflow,
        bucket_rows=bucket_rows,
        rejection=rejection.to_json(),
    )
    return BucketedCorpus(corpus=filtered, spec=spec), stats


def write_control_training_file(e: BucketedCorpus, path: Path, reps: int) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        codec.encode_control_record(p.source, p.summary, p.actual_bucket, e.spec.n, reps)
        for p in e.corpus.records
    ]
    content = "\n".join(lines) + ("\n" if lines else "")
    path.write_text(content, encoding="utf-8")
    return digest_of(content)


@dataclass
class ControlResult:
    corpora: List[BucketedCorpus]
    models: List[ModelRef]
    out_dir: Path
    manifest_path: Path


def run_control(
    plan: ControlPlan,
    student_base: ModelRef,
    e0: BucketedCorpus,
    f_parts: Sequence[Corpus],
    ctx: PipelineContext,
    out_dir: Path,
    *,
    resume: bool = False,
    config_digest: Optional[str] = None,
) -> ControlResult:
    """Balance, fine-tune from the current student, and generate per bucket,
    for the planned number of iterations."""
    plan.validate()
    e0.validate()
    if len(f_parts) < plan.iterations:
        raise ConfigError(
            f"need {plan.iterations} sentence partitions, got {len(f_parts)}"
        )
    out_dir = Path(out_dir)
    corpora_dir = out_dir / "corpora"
    training_dir = out_dir / "training"
    log = RunLog(out_dir / "manifest.jsonl")
    if not resume and log.events:
        raise ConfigError(f"{log.path} already holds a run; pass resume to continue")
    created_at = provenance_stamp("control", plan.digest())
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
    if not (corpora_dir / "E0.jsonl").exists():
        write_corpus(e0.corpus, corpora_dir / "E0.jsonl")

    corpora: List[BucketedCorpus] = []
    models: List[ModelRef] = []
    current_model = student_base
    current_corpus = e0
    for i in range(1, plan.iterations + 1):
        balanced, balance_report = balance_buckets(current_corpus, plan.seed + i)
        if len(balanced) == 0:
            raise EmptyCorpusError(f"iteration {i}: balanced corpus is empty")
        if not log.find("balance", index=i):
            log.append({"event": "balance", "index": i, **balance_report.to_json()})
        train_path = training_dir / f"E{i - 1}.train.txt"
        train_digest = write_control_training_file(balanced, train_path, plan.code_repetitions)
        tune_event = log.find("finetune", index=i)
        expected = tune_event["model"] if (resume and tune_event) else None
        model = _ensure_model(ctx, current_model, train_path, plan.epochs_per_iter, expected)
        if not tune_event:
            log.append(
                {
                    "event": "finetune",
                    "index": i,
                    "base": current_model.label(),
                    "model": model.model_id,
                    "training_file": f"training/E{i - 1}.train.txt",
                    "training_digest": train_digest,
                    "epochs": plan.epochs_per_iter,
                }
            )
        models.append(model)
        current_model = model

        name = f"E{i}"
        iter_event = log.find("control_iteration", index=i)
        corpus_file = corpora_dir / f"{name}.jsonl"
        if resume and iter_event and corpus_file.exists():
            current_corpus = load_bucketed(corpus_file, plan.n_buckets)
            corpora.append(current_corpus)
            continue
        bucketed, stats = control_iteration(
            model, f_parts[i - 1], plan, ctx, name=name, iteration=i, created_at=created_at
        )
        write_corpus(bucketed.corpus, corpus_file)
        log.append(
            {
                "event": "control_iteration",
                "index": i,
                "corpus": name,
                "path": f"corpora/{name}.jsonl",
                "input": f_parts[i - 1].name,
                "model": model.model_id,
                **stats.to_json(),
            }
        )
        corpora.append(bucketed)
        current_corpus = bucketed
    return ControlResult(corpora=corpora, models=models, out_dir=out_dir, manifest_path=log.path)
