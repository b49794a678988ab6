"""Command-line entry point: ingest, distill, control, eval, probe.

Exit codes: 0 success, 2 configuration or data error, 3 backend
unavailability, 4 empty-corpus abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import List, Optional

from . import codec, reference
from .backends import ModelRef
from .config import RunConfig, load_config
from .control import build_control_seed, run_control
from .corpus import (
    Corpus,
    KIND_SUMMARY_PAIRS,
    Manifest,
    SummaryPair,
    ingest_documents,
    partition,
    read_corpus,
    read_documents,
    write_corpus,
)
from .distill import PipelineContext, idempotence_probe, run_distill
from .errors import (
    ConfigError,
    EmptyCorpusError,
    ModelNotFoundError,
    SumdistillError,
    TransportError,
    UndecidedBudgetExceeded,
)
from .filters import eval_nli
from .evaluation import (
    DEFAULT_MAX_DELTA,
    bucket_accuracy,
    corpus_stats,
    dual_select,
    emit_report,
    human_eval_aggregate,
    monotonicity_score,
    paired_comparison,
    read_annotations,
    stats_table_rows,
    write_table,
)
from .metrics import BucketSpec, rouge_l, rouge_n
from .util import provenance_stamp

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_EMPTY = 4


def _stamp_for_file(path: Path, *extra) -> str:
    from .errors import IngestError

    try:
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise IngestError(f"cannot read document stream {path}: {exc}") from exc
    return provenance_stamp("ingest", digest, *extra)


def cmd_ingest(args) -> int:
    docs = read_documents(Path(args.input))
    corpus, stats = ingest_documents(
        docs,
        min_chars=args.min_chars,
        name=args.name,
        created_at=_stamp_for_file(args.input, args.min_chars),
    )
    write_corpus(corpus, Path(args.out))
    print(
        f"ingested {stats.sentences_kept} sentences from {stats.docs_total} documents "
        f"({stats.sentences_below_min} below {args.min_chars} chars, "
        f"{stats.docs_empty} empty docs) -> {args.out}"
    )
    return EXIT_OK


def _partition_for(cfg: RunConfig, corpus_path: Path, sizes, seed: int) -> List[Corpus]:
    corpus = read_corpus(corpus_path)
    if not sizes:
        raise ConfigError("config must list partition sizes for the run")
    return partition(corpus, list(sizes), seed)


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    section = cfg.section("distill")
    plan = cfg.distill_plan()
    if not plan.sizes:
        raise ConfigError("distill.sizes must list the per-iteration partition sizes")
    backend = cfg.make_backend()
    backend.health()
    ctx = cfg.pipeline_context(backend)
    teacher = cfg.model_ref("teacher", backend)
    student_base = cfg.model_ref("student_base", backend)
    corpus_path = cfg.resolve(section["corpus"])
    d_parts = _partition_for(cfg, corpus_path, plan.sizes, plan.seed)
    out_dir = Path(args.out) if args.out else cfg.resolve(section.get("out_dir", "runs/distill"))
    result = run_distill(
        plan, teacher, student_base, d_parts, ctx, out_dir,
        resume=args.resume, config_digest=cfg.digest,
    )
    emit_report(out_dir)
    for corpus in result.corpora:
        print(f"{corpus.name}: {len(corpus)} pairs")
    print(f"models: {', '.join(m.model_id for m in result.models)}")
    print(f"manifest: {result.manifest_path}")
    return EXIT_OK


def cmd_control(args) -> int:
    cfg = load_config(args.config)
    section = cfg.section("control")
    plan = cfg.control_plan()
    backend = cfg.make_backend()
    backend.health()
    ctx = cfg.pipeline_context(backend)
    student_base = cfg.model_ref("student_base", backend)

    if section.get("corpora"):
        distill_corpora = [read_corpus(cfg.resolve(p)) for p in section["corpora"]]
    elif section.get("distill_dir"):
        corpora_dir = cfg.resolve(section["distill_dir"]) / "corpora"
        files = sorted(corpora_dir.glob("C*.jsonl"))
        if not files:
            raise ConfigError(f"no distill corpora under {corpora_dir}")
        distill_corpora = [read_corpus(f) for f in files]
    else:
        raise ConfigError("control needs either corpora or distill_dir")
    if not plan.f_sizes:
        raise ConfigError("control.f_sizes must list per-iteration sentence counts")
    if len(plan.f_sizes) < plan.iterations:
        raise ConfigError("control.f_sizes shorter than the iteration count")
    corpus_path = cfg.resolve(section["corpus"])
    f_parts = _partition_for(cfg, corpus_path, plan.f_sizes, plan.seed + 1)

    out_dir = Path(args.out) if args.out else cfg.resolve(section.get("out_dir", "runs/control"))
    e0, seed_report = build_control_seed(
        distill_corpora,
        ctx,
        plan.n_buckets,
        created_at=provenance_stamp("control-seed", plan.digest(), cfg.digest),
    )
    result = run_control(
        plan, student_base, e0, f_parts, ctx, out_dir,
        resume=args.resume, config_digest=cfg.digest,
    )
    emit_report(out_dir)
    print(f"E0 occupancy: {seed_report.to_json()['occupancy']}")
    for bucketed in result.corpora:
        print(f"{bucketed.corpus.name}: {len(bucketed)} pairs")
    print(f"manifest: {result.manifest_path}")
    return EXIT_OK


_METRICS = {
    "rouge1": lambda cand, ref: rouge_n(cand, ref, 1).f1,
    "rouge2": lambda cand, ref: rouge_n(cand, ref, 2).f1,
    "rougeL": lambda cand, ref: rouge_l(cand, ref).f1,
}


def _similarity_scorer(cfg: RunConfig):
    backend = cfg.make_backend()
    ref = cfg.model_ref("similarity", backend)

    def scorer(candidate: str, reference_text: str) -> float:
        return backend.similarity(ref, candidate, reference_text).f1

    def recall(candidate: str, reference_text: str) -> float:
        return backend.similarity(ref, candidate, reference_text).recall

    return scorer, recall


def cmd_eval(args) -> int:
    out_dir = Path(args.out)
    if args.mode == "stats":
        corpus = read_corpus(Path(args.corpus))
        stats = corpus_stats(corpus, BucketSpec(args.n_buckets))
        columns, rows = stats_table_rows([(corpus.name, stats)])
        write_table(
            out_dir / "corpus_stats.tsv",
            ["corpus compression statistics; stdev is the sample (n-1) estimate",
             f"published rows are reference values flagged {reference.REFERENCE_FLAG}"],
            columns,
            rows,
        )
        print(f"mean_cr={stats.mean_cr:.4f} stdev={stats.stdev_cr:.4f} pct_cr_ge_1={stats.pct_cr_ge_1:.4f}")
        return EXIT_OK
    if args.mode == "paired":
        a = read_corpus(Path(args.a))
        b = read_corpus(Path(args.b))
        if args.metric == "similarity":
            if not args.config:
                raise ConfigError("--metric similarity needs --config for the backend")
            scorer, _ = _similarity_scorer(load_config(args.config))
        else:
            scorer = _METRICS[args.metric]
        report = paired_comparison(
            a.records, b.records, scorer, args.max_delta, metric_name=args.metric
        )
        write_table(
            out_dir / "paired_comparison.tsv",
            ["paired comparison; positive mean_diff favors corpus A",
             "pct_equal_summaries uses all joined pairs as denominator; "
             "pct_equal_of_delta_ok uses pairs inside the delta window"],
            list(report.to_json().keys()),
            [list(report.to_json().values())],
        )
        print(json.dumps(report.to_json(), sort_keys=True))
        return EXIT_OK
    if args.mode == "buckets":
        corpus = read_corpus(Path(args.corpus))
        spec = BucketSpec(args.n_buckets)
        pairs = [p for p in corpus.records if p.prompted_bucket is not None]
        if not pairs:
            raise ConfigError(f"corpus {corpus.name!r} has no prompted buckets")
        overall = bucket_accuracy(pairs, spec)
        rows = [["all", overall, len(pairs)]]
        for j in sorted({p.prompted_bucket for p in pairs}):
            subset = [p for p in pairs if p.prompted_bucket == j]
            rows.append([str(j), bucket_accuracy(subset, spec), len(subset)])
        write_table(
            out_dir / "bucket_accuracy_eval.tsv",
            ["bucket accuracy by prompted bucket"],
            ["prompted_bucket", "accuracy", "count"],
            rows,
        )
        print(f"bucket accuracy: {overall:.4f} over {len(pairs)} pairs")
        return EXIT_OK
    if args.mode == "dual":
        corpus = read_corpus(Path(args.corpus))
        if not args.config:
            raise ConfigError("--mode dual needs --config for the similarity backend")
        _, recall = _similarity_scorer(load_config(args.config))
        spec = BucketSpec(args.n_buckets)
        by_source: dict = {}
        for pair in corpus.records:
            if pair.prompted_bucket is None:
                continue
            by_source.setdefault(pair.source_id, {})[pair.prompted_bucket] = pair
        rows = []
        sequences = []
        for source_id in sorted(by_source):
            buckets = by_source[source_id]
            scored = {
                j: (p.summary, recall(p.summary, p.source)) for j, p in sorted(buckets.items())
            }
            choice = dual_select(scored, args.k)
            if len(scored) == spec.n:
                sequences.append([scored[j][1] for j in range(spec.n)])
            if choice is None:
                rows.append([source_id, "", "", ""])
            else:
                bucket, summary, score = choice
                rows.append([source_id, bucket, len(summary), score])
        notes = [f"shortest summary with recall >= {args.k}"]
        if sequences:
            notes.append(f"mean LNDS over {len(sequences)} full-coverage items: "
                         f"{monotonicity_score(sequences):.4f} of {spec.n}")
        write_table(
            out_dir / "dual_selection.tsv",
            notes,
            ["source_id", "bucket", "summary_chars", "recall"],
            rows,
        )
        print(f"dual selection over {len(rows)} sources -> {out_dir / 'dual_selection.tsv'}")
        return EXIT_OK
    if args.mode == "human":
        annotations = read_annotations(Path(args.annotations))
        report = human_eval_aggregate(annotations)
        rows = [
            ["acc", report.acc, ""],
            ["acc_plus", report.acc_plus, ""],
        ]
        for axis, mean in report.per_axis_means.items():
            rows.append([f"mean_{axis}", mean, ""])
        for axis, kappa in report.kappa_per_axis.items():
            rows.append([f"kappa_{axis}", kappa, ""])
        for ref_row in reference.HUMAN_ACCURACY:
            rows.append(
                [f"published acc {ref_row['system']} {ref_row['range']}", ref_row["acc"],
                 reference.REFERENCE_FLAG]
            )
        write_table(
            out_dir / "human_eval.tsv",
            ["per-item axis aggregation uses the median rater score",
             f"{report.items} items"],
            ["measure", "value", "note"],
            rows,
        )
        print(json.dumps(report.to_json(), sort_keys=True))
        return EXIT_OK
    raise ConfigError(f"unknown eval mode {args.mode!r}")


def probe_teacher_pairs(model, corpus, exemplar_set, ctx: PipelineContext):
    """Few-shot prompt the teacher over a corpus without any filtering."""
    from .util import map_bounded

    def generate_one(rec):
        prompt = codec.assemble_fewshot_prompt(exemplar_set, rec.text)
        return ctx.backend.generate(model.with_decoding(num_return=1), prompt).top

    candidates = map_bounded(generate_one, corpus.records, ctx.concurrency)
    pairs = []
    for rec, cand in zip(corpus.records, candidates):
        try:
            summary = codec.parse_generation(cand.text)
        except SumdistillError:
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


def cmd_probe(args) -> int:
    cfg = load_config(args.config)
    backend = cfg.make_backend()
    backend.health()
    ctx = cfg.pipeline_context(backend)
    out_dir = Path(args.out)
    corpus = read_corpus(cfg.resolve(args.corpus) if not Path(args.corpus).is_absolute() else Path(args.corpus))
    if args.sample:
        corpus = Corpus(manifest=corpus.manifest, records=corpus.records[: args.sample])
    plan = cfg.distill_plan()
    model_id = args.model or cfg.section("models").get("teacher", "toy-teacher")
    model = ModelRef(backend.backend_id, model_id, cfg._decoding())
    if args.mode == "idempotence":
        rows = idempotence_probe(
            model, corpus, args.depth, ctx, exemplars=plan.exemplars[0]
        )
        write_table(
            out_dir / "idempotence_trajectories.tsv",
            [f"summary length across {args.depth} repeated applications"],
            ["source_id", "step", "length", "ratio_to_source", "status"],
            [[r.source_id, r.step, r.length, r.ratio_to_source, r.status] for r in rows],
        )
        print(f"{len(rows)} trajectory rows -> {out_dir / 'idempotence_trajectories.tsv'}")
        return EXIT_OK
    if args.mode == "gpt3-compression":
        rows = []
        for idx, exemplar_set in enumerate(plan.exemplars):
            pairs = probe_teacher_pairs(model, corpus, exemplar_set, ctx)
            if not pairs:
                rows.append([f"exemplar-set-{idx}", "", "", "", "", "no generations"])
                continue
            probe_corpus = Corpus(
                manifest=Manifest(
                    name=f"probe-set{idx}",
                    kind=KIND_SUMMARY_PAIRS,
                    parents=(corpus.name,),
                    model_ref=model.label(),
                    created_at=provenance_stamp("probe", cfg.digest, idx),
                ),
                records=pairs,
            )
            stats = corpus_stats(probe_corpus, BucketSpec(10))
            entailed = sum(
                1
                for p in pairs
                if eval_nli(ctx.backend, ctx.nli_model, p.source, p.summary).passed
            )
            rows.append(
                [
                    f"exemplar-set-{idx}",
                    stats.mean_cr,
                    stats.stdev_cr,
                    entailed / len(pairs),
                    stats.pct_cr_ge_1,
                    "",
                ]
            )
        for ref_row in reference.DATASET_STATS:
            rows.append(
                [
                    f"published:{ref_row['system']}",
                    ref_row["avg_cr_pct"] / 100,
                    ref_row["stdev_pct"] / 100,
                    ref_row["entailment_pct"] / 100,
                    ref_row["cr_ge_1_pct"] / 100,
                    reference.REFERENCE_FLAG,
                ]
            )
        write_table(
            out_dir / "teacher_compression_stats.tsv",
            ["teacher compression and fidelity per exemplar set (unfiltered generations)",
             "stdev is the sample (n-1) estimate"],
            ["prompt_set", "avg_cr", "stdev_cr", "entailment", "pct_cr_ge_1", "note"],
            rows,
        )
        print(f"{len(plan.exemplars)} exemplar sets -> {out_dir / 'teacher_compression_stats.tsv'}")
        return EXIT_OK
    raise ConfigError(f"unknown probe mode {args.mode!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sumdistill",
        description="Iterative, reference-free sentence summarization distillation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="split documents into a sentence corpus")
    p_ingest.add_argument("--input", required=True, help="JSONL of {doc_id, text}")
    p_ingest.add_argument("--min-chars", type=int, default=50, dest="min_chars")
    p_ingest.add_argument("--out", required=True)
    p_ingest.add_argument("--name", default="ingested")
    p_ingest.set_defaults(func=cmd_ingest)

    p_distill = sub.add_parser("distill", help="run the iterative distillation loop")
    p_distill.add_argument("--config", required=True)
    p_distill.add_argument("--resume", action="store_true")
    p_distill.add_argument("--out", default=None)
    p_distill.set_defaults(func=cmd_distill)

    p_control = sub.add_parser("control", help="run the bucket-control loop")
    p_control.add_argument("--config", required=True)
    p_control.add_argument("--resume", action="store_true")
    p_control.add_argument("--out", default=None)
    p_control.set_defaults(func=cmd_control)

    p_eval = sub.add_parser("eval", help="evaluation reports")
    p_eval.add_argument("--mode", required=True, choices=["stats", "paired", "buckets", "dual", "human"])
    p_eval.add_argument("--corpus")
    p_eval.add_argument("--a")
    p_eval.add_argument("--b")
    p_eval.add_argument("--metric", choices=["rouge1", "rouge2", "rougeL", "similarity"], default="rouge1")
    p_eval.add_argument("--max-delta", type=float, default=DEFAULT_MAX_DELTA, dest="max_delta")
    p_eval.add_argument("--k", type=float, default=0.9)
    p_eval.add_argument("--n-buckets", type=int, default=10, dest="n_buckets")
    p_eval.add_argument("--annotations")
    p_eval.add_argument("--config")
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_probe = sub.add_parser("probe", help="teacher behavior probes")
    p_probe.add_argument("--mode", required=True, choices=["gpt3-compression", "idempotence"])
    p_probe.add_argument("--config", required=True)
    p_probe.add_argument("--corpus", required=True)
    p_probe.add_argument("--depth", type=int, default=3)
    p_probe.add_argument("--sample", type=int, default=0)
    p_probe.add_argument("--model", default=None)
    p_probe.add_argument("--out", required=True)
    p_probe.set_defaults(func=cmd_probe)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TransportError, UndecidedBudgetExceeded) as exc:
        print(f"backend unavailable: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except EmptyCorpusError as exc:
        print(f"empty corpus: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except SumdistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
