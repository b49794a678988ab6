"""Measurement protocol: bucket accuracy, length-matched paired comparison,
dual shortest-summary selection, recall monotonicity, human-evaluation
aggregation, and deterministic report emission."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from . import reference
from .corpus import Corpus, SummaryPair, read_corpus
from .distill import RunLog
from .errors import MetricError
from .metrics import (
    OVERFLOW,
    BucketSpec,
    CorpusStats,
    bucket_of,
    corpus_stats,
    fleiss_kappa,
    lnds_length,
)
from .util import char_count

DEFAULT_MAX_DELTA = 0.1

Scorer = Callable[[str, str], float]


def bucket_accuracy(pairs: Sequence[SummaryPair], spec: BucketSpec) -> float:
    """Fraction of pairs whose measured bucket equals the prompted bucket.

    Overflow generations count as misses.
    """
    if not pairs:
        raise MetricError("bucket accuracy of an empty pair list is undefined")
    hits = 0
    for pair in pairs:
        if pair.prompted_bucket is None:
            raise MetricError(f"pair {pair.id} has no prompted bucket")
        if bucket_of(pair.ratio, spec) == pair.prompted_bucket:
            hits += 1
    return hits / len(pairs)


def accuracy_within(
    pairs: Sequence[SummaryPair],
    prompted_bucket: int,
    lo_bucket: int,
    hi_bucket: int,
    spec: BucketSpec,
) -> float:
    """Fraction of generations prompted with one bucket that landed in the
    inclusive bucket range [lo_bucket, hi_bucket]."""
    if lo_bucket > hi_bucket:
        raise MetricError(f"bad bucket range [{lo_bucket}, {hi_bucket}]")
    selected = [p for p in pairs if p.prompted_bucket == prompted_bucket]
    if not selected:
        raise MetricError(f"no pairs prompted with bucket {prompted_bucket}")
    hits = 0
    for pair in selected:
        actual = bucket_of(pair.ratio, spec)
        if actual is not OVERFLOW and lo_bucket <= actual <= hi_bucket:
            hits += 1
    return hits / len(selected)


@dataclass(frozen=True)
class PairedComparisonReport:
    metric: str
    mean_diff: float
    comparative_mean: float
    pct_comparable: float
    pct_equal_summaries: float
    pct_equal_of_delta_ok: float
    count: int
    joined: int

    def to_json(self) -> dict:
        return {
            "metric": self.metric,
            "mean_diff": self.mean_diff,
            "comparative_mean": self.comparative_mean,
            "pct_comparable": self.pct_comparable,
            "pct_equal_summaries": self.pct_equal_summaries,
            "pct_equal_of_delta_ok": self.pct_equal_of_delta_ok,
            "count": self.count,
            "joined": self.joined,
        }


def paired_comparison(
    a: Sequence[SummaryPair],
    b: Sequence[SummaryPair],
    metric: Scorer,
    max_delta: float = DEFAULT_MAX_DELTA,
    *,
    metric_name: str = "metric",
) -> PairedComparisonReport:
    """Mean metric difference over pairs joined on the source sentence.

    Only pairs whose compression ratios differ by at most ``max_delta`` are
    comparable; string-identical summaries are excluded from the diffs but
    reported under both denominators (all joined pairs, and pairs inside the
    delta window). Positive means the first argument scored better.
    """
    by_source = {pair.source_id: pair for pair in b}
    joined = [(pa, by_source[pa.source_id]) for pa in a if pa.source_id in by_source]
    if not joined:
        raise MetricError("no pairs share a source id")
    delta_ok = [(pa, pb) for pa, pb in joined if abs(pa.ratio - pb.ratio) <= max_delta]
    equal = [(pa, pb) for pa, pb in delta_ok if pa.summary == pb.summary]
    comparable = [(pa, pb) for pa, pb in delta_ok if pa.summary != pb.summary]
    diffs = []
    a_scores = []
    for pa, pb in comparable:
        score_a = metric(pa.summary, pa.source)
        score_b = metric(pb.summary, pb.source)
        diffs.append(score_a - score_b)
        a_scores.append(score_a)
    return PairedComparisonReport(
        metric=metric_name,
        mean_diff=sum(diffs) / len(diffs) if diffs else 0.0,
        comparative_mean=sum(a_scores) / len(a_scores) if a_scores else 0.0,
        pct_comparable=len(comparable) / len(joined),
        pct_equal_summaries=len(equal) / len(joined),
        pct_equal_of_delta_ok=len(equal) / len(delta_ok) if delta_ok else 0.0,
        count=len(comparable),
        joined=len(joined),
    )


def dual_select(
    bucket_summaries: Mapping[int, Tuple[str, float]],
    k: float,
) -> Optional[Tuple[int, str, float]]:
    """Shortest summary whose recall meets the tolerance k.

    Returns (bucket, summary, recall) or None when nothing qualifies. Ties
    break toward higher recall, then lower bucket index.
    """
    if not bucket_summaries:
        raise MetricError("dual selection over an empty bucket mapping")
    qualifying = [
        (bucket, summary, recall)
        for bucket, (summary, recall) in bucket_summaries.items()
        if recall >= k
    ]
    if not qualifying:
        return None
    return min(qualifying, key=lambda item: (char_count(item[1]), -item[2], item[0]))


def monotonicity_score(per_item: Sequence[Sequence[float]]) -> float:
    """Mean longest non-decreasing subsequence length of per-bucket recall
    sequences ordered by increasing bucket."""
    if not per_item:
        raise MetricError("monotonicity over an empty item set")
    lengths = [lnds_length(seq) for seq in per_item]
    return sum(lengths) / len(lengths)


@dataclass(frozen=True)
class HumanAnnotation:
    """Per-item rater scores on the three quality axes, plus length adherence."""

    item_id: str
    scores: Tuple[Tuple[int, int, int], ...]  # one (faithful, relevant, fluent) per rater
    length_ok: bool


AXES = ("faithful", "relevant", "fluent")


def read_annotations(path: Path) -> List[HumanAnnotation]:
    """Load line-delimited {item_id, rater_id, faithful, relevant, fluent, length_ok}."""
    rows: Dict[str, list] = {}
    length_ok: Dict[str, bool] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            item = obj["item_id"]
            scores = (int(obj["faithful"]), int(obj["relevant"]), int(obj["fluent"]))
            ok = bool(obj["length_ok"])
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise MetricError(f"{path}: line {lineno}: bad annotation row ({exc})")
        rows.setdefault(item, []).append(scores)
        if item in length_ok and length_ok[item] != ok:
            raise MetricError(f"{path}: line {lineno}: inconsistent length_ok for item {item}")
        length_ok[item] = ok
    return [
        HumanAnnotation(item_id=item, scores=tuple(scores), length_ok=length_ok[item])
        for item, scores in sorted(rows.items())
    ]


@dataclass(frozen=True)
class HumanEvalReport:
    acc: float
    acc_plus: float
    per_axis_means: Dict[str, float]
    kappa_per_axis: Dict[str, float]
    items: int

    def to_json(self) -> dict:
        return {
            "acc": self.acc,
            "acc_plus": self.acc_plus,
            "per_axis_means": self.per_axis_means,
            "kappa_per_axis": self.kappa_per_axis,
            "items": self.items,
        }


def human_eval_aggregate(annotations: Sequence[HumanAnnotation]) -> HumanEvalReport:
    """acc: length adherence plus a median rater score of at least 2 on every
    axis; acc+: the same with a unanimous-median 3. Scores are on {1,2,3}."""
    if not annotations:
        raise MetricError("no annotations to aggregate")
    raters = len(annotations[0].scores)
    if raters < 2:
        raise MetricError("need at least 2 raters per item")
    for ann in annotations:
        if len(ann.scores) != raters:
            raise MetricError(
                f"item {ann.item_id} has {len(ann.scores)} raters, expected {raters}"
            )
        for triple in ann.scores:
            if any(score not in (1, 2, 3) for score in triple):
                raise MetricError(f"item {ann.item_id}: scores must be in {{1,2,3}}")
    acc_hits = 0
    plus_hits = 0
    axis_totals = {axis: 0.0 for axis in AXES}
    axis_counts = {axis: [] for axis in AXES}  # rows of per-category rater counts
    for ann in annotations:
        medians = []
        for axis_idx, axis in enumerate(AXES):
            values = [triple[axis_idx] for triple in ann.scores]
            medians.append(statistics.median(values))
            axis_totals[axis] += sum(values) / raters
            counts = [0, 0, 0]
            for v in values:
                counts[v - 1] += 1
            axis_counts[axis].append(counts)
        if ann.length_ok and all(m >= 2 for m in medians):
            acc_hits += 1
        if ann.length_ok and all(m == 3 for m in medians):
            plus_hits += 1
    n = len(annotations)
    return HumanEvalReport(
        acc=acc_hits / n,
        acc_plus=plus_hits / n,
        per_axis_means={axis: axis_totals[axis] / n for axis in AXES},
        kappa_per_axis={axis: fleiss_kappa(axis_counts[axis]) for axis in AXES},
        items=n,
    )


# -- report emission ---------------------------------------------------------


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    if value is None:
        return ""
    return str(value)


def write_table(path: Path, header_notes: Sequence[str], columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Tab-separated table with '#' metadata lines, fixed column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {note}" for note in header_notes]
    lines.append("\t".join(columns))
    for row in rows:
        lines.append("\t".join(_format_cell(cell) for cell in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def stats_table_rows(named_stats: Sequence[Tuple[str, CorpusStats]]) -> "tuple[list, list]":
    columns = ["corpus", "mean_cr", "stdev_cr", "pct_cr_ge_1"]
    columns += [f"hist_{j}" for j in range(10)] + ["hist_overflow", "count", "note"]
    rows = []
    for name, stats in named_stats:
        flat = stats.to_flat()
        row = [name, flat["mean_cr"], flat["stdev_cr"], flat["pct_cr_ge_1"]]
        row += [flat[f"hist_{j}"] for j in range(10)] + [flat["hist_overflow"], stats.count, ""]
        rows.append(row)
    for ref_row in reference.DATASET_STATS:
        rows.append(
            [
                f"published:{ref_row['system']}",
                ref_row["avg_cr_pct"] / 100,
                ref_row["stdev_pct"] / 100,
                ref_row["cr_ge_1_pct"] / 100,
            ]
            + [""] * 11
            + [reference.REFERENCE_FLAG]
        )
    return columns, rows


def emit_report(run_dir: Path, out_dir: Optional[Path] = None) -> List[Path]:
    """Render the four standard report tables from a run directory.

    Missing artifacts leave a flagged gap row instead of failing; reruns over
    the same artifacts are byte-identical.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "reports"
    manifest_path = run_dir / "manifest.jsonl"
    log = RunLog(manifest_path) if manifest_path.exists() else None
    written: List[Path] = []

    # Corpus statistics.
    named_stats: List[Tuple[str, CorpusStats]] = []
    corpora_dir = run_dir / "corpora"
    if corpora_dir.is_dir():
        for corpus_file in sorted(corpora_dir.glob("*.jsonl")):
            corpus = read_corpus(corpus_file)
            if corpus.kind == "summary_pairs" and len(corpus):
                named_stats.append((corpus.name, corpus_stats(corpus, BucketSpec(10))))
    columns, rows = stats_table_rows(named_stats)
    notes = [
        "corpus compression statistics; stdev is the sample (n-1) estimate",
        f"published rows are reference values flagged {reference.REFERENCE_FLAG}",
    ]
    if not named_stats:
        notes.append("gap: no summary-pair corpora found under corpora/")
    stats_path = out_dir / "corpus_stats.tsv"
    write_table(stats_path, notes, columns, rows)
    written.append(stats_path)

    # Bucket accuracy by iteration.
    acc_columns = ["iteration", "accuracy", "accuracy_top1", "generated", "note"]
    acc_rows: List[list] = []
    if log:
        for entry in log.events:
            if entry.get("event") == "control_iteration":
                acc_rows.append(
                    [entry["index"], entry["accuracy"], entry["accuracy_top1"], entry["generated"], ""]
                )
    acc_notes = ["control-loop conditioning accuracy per iteration (pre-relabel)"]
    if not acc_rows:
        acc_notes.append("gap: run has no control iterations")
    for iteration, buckets in sorted(reference.BUCKET_ACCURACY.items()):
        for bucket, pct in sorted(buckets.items()):
            acc_rows.append(
                [iteration, pct / 100, "", f"published bucket {bucket}", reference.REFERENCE_FLAG]
            )
    acc_path = out_dir / "bucket_accuracy.tsv"
    write_table(acc_path, acc_notes, acc_columns, acc_rows)
    written.append(acc_path)

    # Per-bucket ratio quantiles.
    q_columns = ["iteration", "bucket", "count_prompted", "count_in_bucket", "accuracy", "q0", "q1", "q2", "q3", "q4"]
    q_rows: List[list] = []
    if log:
        for entry in log.events:
            if entry.get("event") == "control_iteration":
                for row in entry.get("buckets", []):
                    q_rows.append(
                        [
                            entry["index"],
                            row["bucket"],
                            row["count_prompted"],
                            row["count_in_bucket"],
                            row["accuracy"],
                            row["q0"],
                            row["q1"],
                            row["q2"],
                            row["q3"],
                            row["q4"],
                        ]
                    )
    q_notes = ["per-bucket compression quantiles of rescued generations, by prompted bucket"]
    if not q_rows:
        q_notes.append("gap: run has no control iterations")
    q_path = out_dir / "bucket_quantiles.tsv"
    write_table(q_path, q_notes, q_columns, q_rows)
    written.append(q_path)

    # Paired comparison: populated by the eval command; here reference-only.
    p_columns = ["comparative", "baseline", "metric", "mean_diff", "comparative_mean", "pct_comparable", "pct_equal", "note"]
    p_rows: List[list] = []
    paired_file = run_dir / "reports" / "paired_inputs.json"
    p_notes = ["paired comparison summary"]
    if paired_file.exists():
        for row in json.loads(paired_file.read_text(encoding="utf-8")):
            p_rows.append(
                [
                    row["comparative"], row["baseline"], row["metric"], row["mean_diff"],
                    row["comparative_mean"], row["pct_comparable"], row["pct_equal_summaries"], "",
                ]
            )
    else:
        p_notes.append("gap: no paired comparison artifacts in this run")
    for ref_row in reference.PAIRED_COMPARISON:
        p_rows.append(
            [
                f"published:{ref_row['comparative']}",
                ref_row["baseline"],
                "bertscore_f1",
                ref_row["bertscore_diff"],
                "",
                ref_row["pct_comparable"] / 100,
                ref_row["pct_equal"] / 100,
                reference.REFERENCE_FLAG,
            ]
        )
    p_path = out_dir / "paired_comparison.tsv"
    write_table(p_path, p_notes, p_columns, p_rows)
    written.append(p_path)
    return written
