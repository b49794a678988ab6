import json
import statistics

import pytest

from sumdistill.backends import Candidate, GenerationResult
from sumdistill.backends.toy import ControlSummarizer, ToyBackend, truncate_to_ratio
from sumdistill.config import DEFAULT_EXEMPLARS
from sumdistill.control import (
    BucketedCorpus,
    ControlPlan,
    balance_buckets,
    beam_rescue,
    build_control_seed,
    control_iteration,
    run_control,
)
from sumdistill.corpus import Corpus, Manifest, SummaryPair, partition, read_corpus
from sumdistill.distill import DistillPlan, PipelineContext, run_distill
from sumdistill.errors import ConfigError, EmptyCorpusError, EmptyGeneration
from sumdistill.metrics import OVERFLOW, BucketSpec, bucket_of


@pytest.fixture(scope="module")
def loop(tmp_path_factory, fixture_corpus, lm_lines):
    """One distill run plus one 3-iteration control run, shared by this module."""
    backend = ToyBackend(lm_lines=lm_lines, teacher_mean=0.7, teacher_sd=0.05, seed=17)
    ctx = PipelineContext(
        backend=backend,
        nli_model=backend.ref("toy-nli"),
        lm_model=backend.ref("toy-lm"),
        similarity_model=backend.ref("toy-sim"),
        concurrency=4,
    )
    plan = DistillPlan(
        t=3, schedule=(0.7, 0.5, 0.3), filter_preset="f1",
        exemplars=DEFAULT_EXEMPLARS, sizes=(150, 90, 90, 90), seed=17,
    )
    parts = partition(fixture_corpus, list(plan.sizes), plan.seed)
    out = tmp_path_factory.mktemp("distill")
    distill_result = run_distill(
        plan, backend.ref("toy-teacher"), backend.ref("toy-student-base"), parts, ctx, out
    )
    cplan = ControlPlan(
        n_buckets=10, iterations=3, epochs_per_iter=2, beams_for_rescue=1,
        f_sizes=(50,), seed=17,
    )
    e0, seed_report = build_control_seed(distill_result.corpora, ctx, 10)
    remaining = Corpus(
        manifest=Manifest(name="f-pool", kind="sentences"),
        records=fixture_corpus.records[420:],
    )
    f_parts = partition(remaining, [20, 20, 20], 18)
    control_out = tmp_path_factory.mktemp("control")
    control_result = run_control(cplan, backend.ref("toy-student-base"), e0, f_parts, ctx, control_out)
    return {
        "backend": backend,
        "ctx": ctx,
        "distill": distill_result,
        "e0": e0,
        "seed_report": seed_report,
        "control": control_result,
        "plan": cplan,
    }


def _manifest_events(result, event):
    lines = result.manifest_path.read_text(encoding="utf-8").splitlines()
    return [json.loads(l) for l in lines if json.loads(l).get("event") == event]


class TestControlPlan:
    def test_defaults_valid(self):
        ControlPlan().validate()

    def test_bucket_count_bounded(self):
        with pytest.raises(ConfigError):
            ControlPlan(n_buckets=11).validate()

    def test_iterations_required(self):
        with pytest.raises(ConfigError):
            ControlPlan(iterations=0).validate()


class TestBuildControlSeed:
    def test_bucket_labeling(self, loop):
        for pair in loop["e0"].corpus.records:
            assert pair.actual_bucket == bucket_of(pair.ratio, BucketSpec(10))

    def test_ratio_035_lands_in_bucket_3(self, ctx, toy_backend):
        source = "x" * 100
        pair = SummaryPair.create(source_id="a", doc_id="d", source=source, summary="y" * 35)
        corpus = Corpus(manifest=Manifest(name="one", kind="summary_pairs"), records=[pair])
        # Containment NLI rejects y-vs-x; use identical text for a clean pass.
        good = SummaryPair.create(source_id="b", doc_id="d", source=source, summary="x" * 35)
        corpus = Corpus(manifest=Manifest(name="one", kind="summary_pairs"), records=[good])
        e0, report = build_control_seed([corpus], ctx, 10)
        assert e0.occupancy()[3] == len(e0.corpus.records)

    def test_seed_occupancy_covers_low_buckets_and_leaves_top_sparse(self, loop):
        occupancy = loop["seed_report"].occupancy
        populated = {j for j, n in occupancy.items() if n}
        assert populated
        assert max(populated) <= 8
        assert occupancy[9] == 0

    def test_filter_failures_absent_from_every_bucket(self, loop):
        # Every surviving pair re-passes the control filter's atoms.
        from sumdistill.filters import FilterSpec, apply_filter

        h = FilterSpec.h()
        for pair in loop["e0"].corpus.records:
            assert apply_filter(h, pair, loop["ctx"].filter_context()).accepted

    def test_overflow_dropped_and_counted(self, ctx, toy_backend, fixture_corpus):
        source = fixture_corpus.records[0].text
        over = SummaryPair.create(
            source_id="o", doc_id="d", source=source, summary=f"{source} {source}"
        )
        ok = SummaryPair.create(
            source_id="k", doc_id="d", source=source, summary=truncate_to_ratio(source, 0.5)
        )
        corpus = Corpus(manifest=Manifest(name="mix", kind="summary_pairs"), records=[over, ok])
        e0, report = build_control_seed([corpus], ctx, 10)
        assert report.overflow_dropped == 1
        assert report.rejection["total"] == 1  # only the in-range pair reaches the filter
        assert all(p.actual_bucket is not None for p in e0.corpus.records)

    def test_empty_union_rejected(self, ctx):
        empty = Corpus(manifest=Manifest(name="none", kind="summary_pairs"), records=[])
        with pytest.raises(EmptyCorpusError):
            build_control_seed([empty], ctx, 10)


class TestBalanceBuckets:
    def _bucketed(self, sizes_by_bucket):
        records = []
        for bucket, count in sizes_by_bucket.items():
            for i in range(count):
                ratio_mid = (bucket + 0.5) / 10
                records.append(
                    SummaryPair.create(
                        source_id=f"s{bucket}-{i}",
                        doc_id="d",
                        source="x" * 200,
                        summary="x" * int(ratio_mid * 200),
                        pair_id=f"p{bucket}-{i}",
                        actual_bucket=bucket,
                    )
                )
        corpus = Corpus(manifest=Manifest(name="bal", kind="summary_pairs"), records=records)
        return BucketedCorpus(corpus=corpus, spec=BucketSpec(10))

    def test_min_rule(self):
        balanced, report = balance_buckets(self._bucketed({2: 10, 5: 20, 7: 30}), seed=3)
        assert report.min_size == 10
        occupancy = balanced.occupancy()
        assert occupancy[2] == occupancy[5] == occupancy[7] == 10

    def test_empty_buckets_stay_empty_and_reported(self):
        balanced, report = balance_buckets(self._bucketed({1: 4, 6: 9}), seed=3)
        assert report.empty_buckets == [0, 2, 3, 4, 5, 7, 8, 9]
        assert balanced.occupancy()[0] == 0

    def test_deterministic_given_seed(self):
        first, _ = balance_buckets(self._bucketed({3: 20, 8: 7}), seed=11)
        second, _ = balance_buckets(self._bucketed({3: 20, 8: 7}), seed=11)
        other, _ = balance_buckets(self._bucketed({3: 20, 8: 7}), seed=12)
        ids = lambda bc: [p.id for p in bc.corpus.records]  # noqa: E731
        assert ids(first) == ids(second)
        assert ids(first) != ids(other)

    def test_all_empty_rejected(self):
        with pytest.raises(EmptyCorpusError):
            balance_buckets(self._bucketed({}), seed=0)


class TestBeamRescue:
    def _result(self, source, specs):
        # specs: list of (ratio, logprob); texts built to the exact length.
        candidates = [
            Candidate(text="y" * int(round(ratio * len(source))), logprob=lp)
            for ratio, lp in specs
        ]
        return GenerationResult.from_candidates(candidates)

    def test_forced_choice(self):
        source = "x" * 100
        result = self._result(source, [(0.45, -5.0), (0.33, -7.0)])
        choice = beam_rescue(result, 3, BucketSpec(10), source)
        assert len(choice.summary) == 33
        assert not choice.unrescued

    def test_fallback_flagged(self):
        source = "x" * 100
        result = self._result(source, [(0.45, -5.0), (0.62, -7.0)])
        choice = beam_rescue(result, 9, BucketSpec(10), source)
        assert len(choice.summary) == 45
        assert choice.unrescued

    def test_highest_logprob_in_bucket_wins(self):
        source = "x" * 100
        result = self._result(
            source,
            [(0.31, -9.0), (0.35, -4.0), (0.39, -6.0), (0.72, -1.0), (0.05, -2.0)],
        )
        choice = beam_rescue(result, 3, BucketSpec(10), source)
        assert len(choice.summary) == 35
        assert choice.logprob == -4.0

    def test_all_empty_is_error(self):
        result = GenerationResult.from_candidates([Candidate(text="  ", logprob=-1.0)])
        with pytest.raises(EmptyGeneration):
            beam_rescue(result, 3, BucketSpec(10), "x" * 50)

    def test_rescue_never_hurts_accuracy(self):
        # On any fixed candidate set, rescue hits whenever top-1 does.
        source = "x" * 100
        spec = BucketSpec(10)
        import random

        rng = random.Random(0)
        for _ in range(200):
            specs = [(rng.uniform(0.05, 1.1), -rng.random() * 10) for _ in range(5)]
            result = self._result(source, specs)
            prompted = rng.randrange(10)
            choice = beam_rescue(result, prompted, spec, source)
            top_ratio = len(result.candidates[0].text) / 100
            top_hit = bucket_of(top_ratio, spec) == prompted
            rescue_hit = bucket_of(len(choice.summary) / 100, spec) == prompted
            assert rescue_hit or not top_hit


class TestControlIteration:
    def test_conditioned_student_near_perfect_and_relabel_noop(self, lm_lines, fixture_corpus):
        backend = ToyBackend(lm_lines=lm_lines, seed=5)
        student = ControlSummarizer(
            "oracle-student",
            per_bucket=tuple((j, ((j + 0.55) / 10, 0.004)) for j in range(10)),
        )
        ref = backend.register(student)
        ctx = PipelineContext(
            backend=backend, nli_model=backend.ref("toy-nli"), lm_model=backend.ref("toy-lm")
        )
        sentences = Corpus(
            manifest=Manifest(name="f", kind="sentences"), records=fixture_corpus.records[:30]
        )
        plan = ControlPlan(n_buckets=10, iterations=1, beams_for_rescue=1, f_sizes=(30,))
        bucketed, stats = control_iteration(ref, sentences, plan, ctx, name="E1", iteration=1)
        assert stats.accuracy > 0.9
        relabel_moves = sum(
            1 for p in bucketed.corpus.records if p.prompted_bucket != p.actual_bucket
        )
        assert relabel_moves / max(1, len(bucketed.corpus.records)) < 0.1

    def test_off_bucket_generation_relabeled(self, lm_lines, fixture_corpus):
        backend = ToyBackend(lm_lines=lm_lines, seed=5)
        # Prompted bucket 3 but the student generates at ~0.55.
        student = ControlSummarizer("skewed", per_bucket=((3, (0.555, 0.002)),))
        ref = backend.register(student)
        ctx = PipelineContext(
            backend=backend, nli_model=backend.ref("toy-nli"), lm_model=backend.ref("toy-lm")
        )
        sentences = Corpus(
            manifest=Manifest(name="f", kind="sentences"), records=fixture_corpus.records[:20]
        )
        plan = ControlPlan(n_buckets=10, iterations=1, beams_for_rescue=1, f_sizes=(20,))
        bucketed, stats = control_iteration(ref, sentences, plan, ctx, name="E1", iteration=1)
        stored = [p for p in bucketed.corpus.records if p.prompted_bucket == 3]
        assert stored
        assert all(p.actual_bucket == 5 for p in stored)

    def test_overflow_dropped(self, lm_lines, fixture_corpus):
        backend = ToyBackend(lm_lines=lm_lines, seed=5)
        student = ControlSummarizer("copycat", per_bucket=((9, (1.0, 0.0)),))
        ref = backend.register(student)
        ctx = PipelineContext(
            backend=backend, nli_model=backend.ref("toy-nli"), lm_model=backend.ref("toy-lm")
        )
        sentences = Corpus(
            manifest=Manifest(name="f", kind="sentences"), records=fixture_corpus.records[:10]
        )
        plan = ControlPlan(n_buckets=10, iterations=1, beams_for_rescue=1, f_sizes=(10,))
        bucketed, stats = control_iteration(ref, sentences, plan, ctx, name="E1", iteration=1)
        assert stats.overflow_dropped > 0
        for pair in bucketed.corpus.records:
            assert bucket_of(pair.ratio, BucketSpec(10)) is not OVERFLOW


class TestRunControl:
    def test_manifest_shapes(self, loop):
        entries = _manifest_events(loop["control"], "control_iteration")
        assert len(entries) == 3
        for entry in entries:
            assert len(entry["buckets"]) == 10
            for row in entry["buckets"]:
                assert {"bucket", "count_prompted", "count_in_bucket", "accuracy",
                        "q0", "q1", "q2", "q3", "q4"} <= set(row)

    def test_accuracy_non_decreasing(self, loop):
        accs = [e["accuracy"] for e in _manifest_events(loop["control"], "control_iteration")]
        assert all(a <= b for a, b in zip(accs, accs[1:]))

    def test_relabel_correctness_everywhere(self, loop):
        for bucketed in loop["control"].corpora:
            bucketed.validate()

    def test_balance_invariant(self, loop):
        for entry in _manifest_events(loop["control"], "balance"):
            non_empty = {b: n for b, n in entry["sizes_after"].items() if n}
            assert len(set(non_empty.values())) == 1

    def test_overflow_never_stored(self, loop):
        for bucketed in loop["control"].corpora:
            for pair in bucketed.corpus.records:
                assert bucket_of(pair.ratio, BucketSpec(10)) is not OVERFLOW

    def test_corpora_reload_with_labels(self, loop):
        path = loop["control"].out_dir / "corpora" / "E1.jsonl"
        loaded = read_corpus(path)
        assert all(p.actual_bucket is not None for p in loaded.records)
        assert all(p.prompted_bucket is not None for p in loaded.records)

    def test_single_iteration_run(self, lm_lines, fixture_corpus, tmp_path, loop):
        backend = ToyBackend(lm_lines=lm_lines, seed=9)
        ctx = PipelineContext(
            backend=backend, nli_model=backend.ref("toy-nli"), lm_model=backend.ref("toy-lm")
        )
        plan = ControlPlan(n_buckets=10, iterations=1, beams_for_rescue=1, f_sizes=(15,), seed=9)
        sentences = Corpus(
            manifest=Manifest(name="f1only", kind="sentences"),
            records=fixture_corpus.records[:15],
        )
        result = run_control(
            plan, backend.ref("toy-student-base"), loop["e0"], [sentences], ctx, tmp_path / "c1"
        )
        assert len(result.models) == 1
        assert [bc.corpus.name for bc in result.corpora] == ["E1"]

    def test_iterative_beats_non_iterative_at_matched_epochs(self, loop, fixture_corpus, lm_lines):
        # One long fine-tune on the seed data only, versus the same total
        # epochs spread over self-training iterations.
        def accuracy_of(iterations, epochs, tag):
            backend = ToyBackend(lm_lines=lm_lines, seed=31)
            ctx = PipelineContext(
                backend=backend, nli_model=backend.ref("toy-nli"),
                lm_model=backend.ref("toy-lm"), concurrency=4,
            )
            plan = ControlPlan(
                n_buckets=10, iterations=iterations, epochs_per_iter=epochs,
                beams_for_rescue=1, f_sizes=(30,) * iterations, seed=31,
            )
            pool = Corpus(
                manifest=Manifest(name=f"pool-{tag}", kind="sentences"),
                records=fixture_corpus.records[330:420],
            )
            f_parts = partition(pool, [30] * iterations, 5)
            import tempfile
            from pathlib import Path

            with tempfile.TemporaryDirectory() as tmp:
                result = run_control(
                    plan, backend.ref("toy-student-base"), loop["e0"], f_parts, ctx, Path(tmp)
                )
                events = [
                    json.loads(line)
                    for line in result.manifest_path.read_text().splitlines()
                ]
            accuracies = [e["accuracy"] for e in events if e.get("event") == "control_iteration"]
            return accuracies[-1]

        non_iterative = accuracy_of(iterations=1, epochs=6, tag="flat")
        iterative = accuracy_of(iterations=3, epochs=2, tag="loop")
        assert iterative > non_iterative

    def test_beam_rescue_accuracy_at_least_top1(self, loop):
        # Regenerate with 5 beams on a fixed sentence set and compare both
        # accuracies on the same generation results.
        from sumdistill import codec
        from sumdistill.util import char_count

        backend = loop["backend"]
        model = loop["control"].models[-1].with_decoding(num_return=5, beam_width=5)
        spec = BucketSpec(10)
        sentences = loop["distill"].corpora[1].records[:10]
        rescue_hits = 0
        top1_hits = 0
        total = 0
        for pair in sentences:
            for j in range(10):
                prompt = codec.build_generation_prompt(pair.source, (j, 10, 10))
                result = backend.generate(model, prompt)
                try:
                    choice = beam_rescue(result, j, spec, pair.source)
                except EmptyGeneration:
                    continue
                total += 1
                if bucket_of(char_count(choice.summary) / char_count(pair.source), spec) == j:
                    rescue_hits += 1
                try:
                    top_text = codec.parse_generation(result.candidates[0].text)
                except EmptyGeneration:
                    continue
                if bucket_of(char_count(top_text) / char_count(pair.source), spec) == j:
                    top1_hits += 1
        assert total > 50
        assert rescue_hits >= top1_hits
