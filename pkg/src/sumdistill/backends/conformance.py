"""Shared conformance suite for backend implementations.

One fixture file drives every implementation: the deterministic toys and any
served backend must satisfy the same request/response contract. Checks are
invariant-based (shapes, orderings, distributions, error classes) because
concrete scores legitimately differ between implementations.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, List

from ..errors import BadRequestError, CodecError, ModelNotFoundError, SumdistillError
from . import Backend, ModelRef, NLI_LABELS

_WIRE_LABELS = {"entailment": 0, "neutral": 1, "contradiction": 2}


def load_cases() -> dict:
    data = resources.files("sumdistill.backends").joinpath("conformance_cases.json")
    return json.loads(data.read_text(encoding="utf-8"))


class ConformanceFailure(AssertionError):
    pass


def run_conformance(backend: Backend, roles: Dict[str, ModelRef], workdir: Path) -> List[str]:
    """Run every case; returns a list of failure descriptions (empty = pass).

    ``roles`` maps the suite's abstract roles (generator, scorer, nli,
    similarity) to concrete model refs on the backend under test.
    """
    spec = load_cases()
    texts = spec["texts"]
    failures: List[str] = []
    runner = _Runner(backend, roles, texts, spec, Path(workdir))
    for case in spec["cases"]:
        op = case["op"]
        handler: Callable = getattr(runner, op, None)
        if handler is None:
            failures.append(f"{case['name']}: no handler for op {op!r}")
            continue
        try:
            handler(case)
        except ConformanceFailure as exc:
            failures.append(f"{case['name']}: {exc}")
        except Exception as exc:  # noqa: BLE001 - report, do not mask, unexpected errors
            failures.append(f"{case['name']}: unexpected {type(exc).__name__}: {exc}")
    return failures


def assert_conformant(backend: Backend, roles: Dict[str, ModelRef], workdir: Path) -> None:
    failures = run_conformance(backend, roles, workdir)
    if failures:
        raise ConformanceFailure("; ".join(failures))


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise ConformanceFailure(message)


class _Runner:
    def __init__(self, backend, roles, texts, spec, workdir):
        self.backend = backend
        self.roles = roles
        self.texts = texts
        self.spec = spec
        self.workdir = workdir

    def _prompt(self) -> str:
        return f"{self.texts['sentence']} TL;DR: "

    def generate_shape(self, case):
        ref = self.roles["generator"].with_decoding(
            num_return=case["num_return"], beam_width=case["beam_width"]
        )
        result = self.backend.generate(ref, self._prompt())
        _check(
            len(result.candidates) == case["num_return"],
            f"expected {case['num_return']} candidates, got {len(result.candidates)}",
        )
        logprobs = [c.logprob for c in result.candidates]
        _check(
            all(a >= b for a, b in zip(logprobs, logprobs[1:])),
            f"logprobs not non-increasing: {logprobs}",
        )

    def generate_deterministic(self, case):
        ref = self.roles["generator"].with_decoding(
            num_return=case["num_return"], beam_width=case["beam_width"], seed=7
        )
        first = self.backend.generate(ref, self._prompt())
        second = self.backend.generate(ref, self._prompt())
        _check(
            [c.text for c in first.candidates] == [c.text for c in second.candidates],
            "repeated identical calls returned different candidates",
        )

    def generate_empty_prompt(self, case):
        try:
            self.backend.generate(self.roles["generator"], "")
        except BadRequestError:
            return
        raise ConformanceFailure("empty prompt accepted")

    def generate_unknown_model(self, case):
        ref = ModelRef(self.roles["generator"].backend_id, "no-such-model-xyz")
        try:
            self.backend.generate(ref, self._prompt())
        except ModelNotFoundError:
            return
        raise ConformanceFailure("unknown model accepted")

    def score_shape(self, case):
        lps = self.backend.score_conditional(
            self.roles["scorer"], self.texts["context"], self.texts["continuation"]
        )
        _check(len(lps) >= 1, "empty logprob list")
        _check(all(lp <= 1e-6 for lp in lps), f"positive logprob in {lps[:5]}...")

    def score_unconditional_equivalence(self, case):
        tol = case["tolerance"]
        text = self.texts["continuation"]
        conditional = self.backend.score_conditional(self.roles["scorer"], "", text)
        unconditional = self.backend.score_unconditional(self.roles["scorer"], text)
        _check(len(conditional) == len(unconditional), "token count mismatch")
        worst = max(abs(a - b) for a, b in zip(conditional, unconditional))
        _check(worst <= tol, f"empty-context vs unconditional differ by {worst}")

    def score_empty_continuation(self, case):
        try:
            self.backend.score_conditional(self.roles["scorer"], self.texts["context"], "")
        except (BadRequestError, SumdistillError):
            return
        raise ConformanceFailure("empty continuation accepted")

    def nli_distribution(self, case):
        tol = case["tolerance"]
        result = self.backend.nli(
            self.roles["nli"], self.texts["premise"], self.texts["hypothesis"]
        )
        _check(result.label in NLI_LABELS, f"label {result.label!r} not in enum")
        _check(set(result.probs) == set(_WIRE_LABELS), f"prob keys {sorted(result.probs)}")
        total = sum(result.probs.values())
        _check(abs(total - 1.0) <= tol, f"probs sum to {total}")
        top = max(result.probs, key=result.probs.get)
        _check(result.label.lower() == top, f"label {result.label} but argmax {top}")

    def similarity_identical(self, case):
        tol = case["tolerance"]
        text = self.texts["reference"]
        score = self.backend.similarity(self.roles["similarity"], text, text)
        for name, value in (("precision", score.precision), ("recall", score.recall), ("f1", score.f1)):
            _check(abs(value - 1.0) <= tol, f"identical texts: {name}={value}")

    def similarity_range(self, case):
        score = self.backend.similarity(
            self.roles["similarity"], self.texts["hypothesis"], self.texts["reference"]
        )
        for name, value in (("precision", score.precision), ("recall", score.recall), ("f1", score.f1)):
            _check(0.0 <= value <= 1.0, f"{name}={value} out of [0,1]")

    def _write_training_file(self, lines, name):
        path = self.workdir / name
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def finetune_zero_epochs(self, case):
        path = self._write_training_file(self.spec["training_records"], "train_ok.txt")
        base = self.roles["generator"]
        result = self.backend.finetune(base, path, epochs=0)
        _check(result.model_id == base.model_id, "zero-epoch fine-tune changed the model id")

    def finetune_new_model(self, case):
        path = self._write_training_file(self.spec["training_records"], "train_ok.txt")
        base = self.roles["generator"]
        tuned = self.backend.finetune(base, path, epochs=1)
        _check(tuned.model_id != base.model_id, "fine-tune returned the base model id")
        result = self.backend.generate(tuned.with_decoding(num_return=1), self._prompt())
        _check(len(result.candidates) == 1, "tuned model did not generate")

    def finetune_malformed_line(self, case):
        path = self._write_training_file(self.spec["malformed_records"], "train_bad.txt")
        try:
            self.backend.finetune(self.roles["generator"], path, epochs=1)
        except (CodecError, BadRequestError) as exc:
            _check(
                f"line {case['expect_line']}" in str(exc),
                f"error does not cite line {case['expect_line']}: {exc}",
            )
            return
        raise ConformanceFailure("malformed training file accepted")
