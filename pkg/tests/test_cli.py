import json
from pathlib import Path

import pytest

from sumdistill.cli import main
from sumdistill.corpus import read_corpus


def _write_docs(path: Path, docs) -> None:
    path.write_text("\n".join(json.dumps(d) for d in docs) + "\n", encoding="utf-8")


@pytest.fixture()
def workdir(tmp_path, fixture_docs):
    _write_docs(tmp_path / "docs.jsonl", fixture_docs)
    rc = main(["ingest", "--input", str(tmp_path / "docs.jsonl"), "--out", str(tmp_path / "corpus.jsonl")])
    assert rc == 0
    return tmp_path


def _config(workdir, **overrides):
    cfg = {
        "seed": 13,
        "backend": {"kind": "toy", "lm_corpus": "corpus.jsonl", "teacher_mean": 0.7,
                    "teacher_sd": 0.05, "concurrency": 4},
        "models": {},
        "distill": {
            "corpus": "corpus.jsonl",
            "out_dir": "runs/distill",
            "t": 1,
            "schedule": [0.7],
            "filter_preset": "f1",
            "sizes": [90, 50],
            "epochs_per_iter": 5,
        },
        "control": {
            "corpus": "corpus.jsonl",
            "distill_dir": "runs/distill",
            "out_dir": "runs/control",
            "n_buckets": 10,
            "iterations": 1,
            "epochs_per_iter": 2,
            "f_sizes": [20],
        },
    }
    for key, value in overrides.items():
        section, _, field = key.partition(".")
        if field:
            cfg[section][field] = value
        else:
            cfg[section] = value
    path = workdir / "cfg.json"
    path.write_text(json.dumps(cfg, indent=1), encoding="utf-8")
    return path


class TestIngest:
    def test_hand_counted_records(self, tmp_path):
        long_a = "The harbor council measured the granite jetty for the spring festival season."
        long_b = "Workers repaired the old turbine housing beside the upper mill channel yesterday."
        short = "Too short to keep."
        _write_docs(
            tmp_path / "docs.jsonl",
            [{"doc_id": "d1", "text": f"{long_a} {short} {long_b}"}],
        )
        out = tmp_path / "out.jsonl"
        assert main(["ingest", "--input", str(tmp_path / "docs.jsonl"), "--out", str(out)]) == 0
        corpus = read_corpus(out)
        assert len(corpus) == 2
        assert corpus.records[0].next_text == short

    def test_min_chars_zero_keeps_all(self, tmp_path):
        _write_docs(tmp_path / "docs.jsonl", [{"doc_id": "d", "text": "One. Two. Three."}])
        out = tmp_path / "all.jsonl"
        assert main([
            "ingest", "--input", str(tmp_path / "docs.jsonl"), "--out", str(out), "--min-chars", "0",
        ]) == 0
        assert len(read_corpus(out)) == 3

    def test_missing_input_flag_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["ingest", "--out", "x.jsonl"])
        assert excinfo.value.code == 2

    def test_unreadable_input_is_config_error(self, tmp_path):
        assert main(["ingest", "--input", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]) == 2

    def test_rerun_byte_identical(self, tmp_path, fixture_docs):
        _write_docs(tmp_path / "docs.jsonl", fixture_docs)
        out_a = tmp_path / "a.jsonl"
        out_b = tmp_path / "b.jsonl"
        main(["ingest", "--input", str(tmp_path / "docs.jsonl"), "--out", str(out_a)])
        main(["ingest", "--input", str(tmp_path / "docs.jsonl"), "--out", str(out_b)])
        assert out_a.read_bytes() == out_b.read_bytes()


class TestDistillCommand:
    def test_toy_run_completes(self, workdir):
        cfg = _config(workdir)
        assert main(["distill", "--config", str(cfg)]) == 0
        run_dir = workdir / "runs" / "distill"
        assert (run_dir / "corpora" / "C0.jsonl").exists()
        assert (run_dir / "corpora" / "C1.jsonl").exists()
        assert (run_dir / "manifest.jsonl").exists()
        assert (run_dir / "reports" / "corpus_stats.tsv").exists()

    def test_resume_skips_done_work(self, workdir):
        cfg = _config(workdir)
        assert main(["distill", "--config", str(cfg)]) == 0
        manifest = (workdir / "runs" / "distill" / "manifest.jsonl").read_bytes()
        assert main(["distill", "--config", str(cfg), "--resume"]) == 0
        assert (workdir / "runs" / "distill" / "manifest.jsonl").read_bytes() == manifest

    def test_rerun_without_resume_is_config_error(self, workdir):
        cfg = _config(workdir)
        assert main(["distill", "--config", str(cfg)]) == 0
        assert main(["distill", "--config", str(cfg)]) == 2

    def test_increasing_schedule_is_config_error(self, workdir):
        cfg = _config(workdir, **{"distill.schedule": [0.5, 0.7], "distill.t": 2,
                                  "distill.sizes": [90, 40, 40]})
        assert main(["distill", "--config", str(cfg)]) == 2

    def test_empty_seed_aborts_with_code_4(self, workdir):
        cfg = _config(workdir, models={"teacher": "toy-copy"})
        assert main(["distill", "--config", str(cfg)]) == 4

    def test_unreachable_http_backend_is_code_3(self, workdir):
        cfg = _config(workdir, backend={"kind": "http", "url": "http://127.0.0.1:9",
                                        "max_retries": 0, "backoff_base": 0.0, "timeout": 0.2})
        assert main(["distill", "--config", str(cfg)]) == 3


class TestControlCommand:
    def test_toy_run_completes(self, workdir):
        cfg = _config(workdir)
        assert main(["distill", "--config", str(cfg)]) == 0
        assert main(["control", "--config", str(cfg)]) == 0
        run_dir = workdir / "runs" / "control"
        assert (run_dir / "corpora" / "E0.jsonl").exists()
        assert (run_dir / "corpora" / "E1.jsonl").exists()
        events = [
            json.loads(line)["event"]
            for line in (run_dir / "manifest.jsonl").read_text().splitlines()
        ]
        assert "control_iteration" in events

    def test_eleven_buckets_rejected(self, workdir):
        cfg = _config(workdir, **{"control.n_buckets": 11})
        assert main(["control", "--config", str(cfg)]) == 2

    def test_missing_seed_corpora_rejected(self, workdir):
        cfg = _config(workdir, **{"control.distill_dir": "runs/never-ran"})
        assert main(["control", "--config", str(cfg)]) == 2


class TestEvalCommand:
    def test_stats_mode(self, workdir):
        cfg = _config(workdir)
        assert main(["distill", "--config", str(cfg)]) == 0
        out = workdir / "eval"
        rc = main([
            "eval", "--mode", "stats",
            "--corpus", str(workdir / "runs" / "distill" / "corpora" / "C0.jsonl"),
            "--out", str(out),
        ])
        assert rc == 0
        table = (out / "corpus_stats.tsv").read_text(encoding="utf-8")
        assert "mean_cr" in table and "hist_overflow" in table

    def test_paired_self_comparison_zero(self, workdir):
        cfg = _config(workdir)
        assert main(["distill", "--config", str(cfg)]) == 0
        c0 = str(workdir / "runs" / "distill" / "corpora" / "C0.jsonl")
        out = workdir / "paired"
        assert main(["eval", "--mode", "paired", "--a", c0, "--b", c0, "--metric", "rouge1",
                     "--out", str(out)]) == 0
        table = (out / "paired_comparison.tsv").read_text(encoding="utf-8").splitlines()
        header = table[-2].split("\t")
        row = table[-1].split("\t")
        record = dict(zip(header, row))
        assert float(record["mean_diff"]) == 0.0
        assert float(record["pct_equal_summaries"]) == 1.0

    def test_unknown_mode_is_usage_error(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["eval", "--mode", "bogus", "--out", "x"])
        assert excinfo.value.code == 2

    def test_human_mode(self, workdir):
        rows = [
            {"item_id": "a", "rater_id": "r1", "faithful": 3, "relevant": 3, "fluent": 3, "length_ok": True},
            {"item_id": "a", "rater_id": "r2", "faithful": 3, "relevant": 3, "fluent": 3, "length_ok": True},
            {"item_id": "a", "rater_id": "r3", "faithful": 3, "relevant": 3, "fluent": 3, "length_ok": True},
        ]
        ann = workdir / "ann.jsonl"
        ann.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
        out = workdir / "human"
        assert main(["eval", "--mode", "human", "--annotations", str(ann), "--out", str(out)]) == 0
        assert "acc" in (out / "human_eval.tsv").read_text(encoding="utf-8")

    def test_buckets_and_dual_modes(self, workdir):
        cfg = _config(workdir)
        assert main(["distill", "--config", str(cfg)]) == 0
        assert main(["control", "--config", str(cfg)]) == 0
        e1 = str(workdir / "runs" / "control" / "corpora" / "E1.jsonl")
        out = workdir / "beval"
        assert main(["eval", "--mode", "buckets", "--corpus", e1, "--out", str(out)]) == 0
        assert (out / "bucket_accuracy_eval.tsv").exists()
        assert main(["eval", "--mode", "dual", "--corpus", e1, "--k", "0.5",
                     "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "dual_selection.tsv").exists()


class TestProbeCommand:
    def test_idempotence_probe(self, workdir):
        cfg = _config(workdir)
        out = workdir / "probe"
        rc = main([
            "probe", "--mode", "idempotence", "--config", str(cfg),
            "--corpus", "corpus.jsonl", "--depth", "3", "--sample", "5", "--out", str(out),
        ])
        assert rc == 0
        lines = (out / "idempotence_trajectories.tsv").read_text(encoding="utf-8").splitlines()
        data_rows = [l for l in lines if not l.startswith("#")][1:]
        assert len(data_rows) == 5 * 3

    def test_depth_one_is_usage_error(self, workdir):
        cfg = _config(workdir)
        rc = main([
            "probe", "--mode", "idempotence", "--config", str(cfg),
            "--corpus", "corpus.jsonl", "--depth", "1", "--sample", "3",
            "--out", str(workdir / "probe1"),
        ])
        assert rc == 2

    def test_compression_probe(self, workdir):
        cfg = _config(workdir)
        out = workdir / "probe2"
        rc = main([
            "probe", "--mode", "gpt3-compression", "--config", str(cfg),
            "--corpus", "corpus.jsonl", "--sample", "10", "--out", str(out),
        ])
        assert rc == 0
        table = (out / "teacher_compression_stats.tsv").read_text(encoding="utf-8")
        assert "exemplar-set-0" in table
        assert "not-reproduced-at-desk-scale" in table
