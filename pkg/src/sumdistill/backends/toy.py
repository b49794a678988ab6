"""Deterministic toy backends for offline runs.

The toys are not neural: they are the minimal machinery under which the
iterative loop's observable dynamics hold for real. The ratio-mimic student
literally generates shorter when trained on shorter summaries, the character
n-gram scorer gives order-sensitive log-probabilities, and the containment
NLI accepts truncations while rejecting introduced content. Everything is
seeded and immutable after construction, so concurrent and repeated calls
are byte-stable.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .. import codec
from ..errors import BadRequestError, CodecError, ModelNotFoundError
from ..metrics import tokenize
from ..util import char_count, rng_from, sha256_hex
from . import (
    Backend,
    Candidate,
    GenerationResult,
    HealthStatus,
    LABEL_CONTRADICTION,
    LABEL_ENTAILMENT,
    LABEL_NEUTRAL,
    ModelRef,
    NliResult,
    SimilarityScore,
)

# Dispersion floor for the ratio-mimic student. A normal fitted to an already
# filtered corpus is too tight for the next, stricter compression cut to keep
# any mass, which would starve the loop; real student models keep heavy tails.
STUDENT_SD_FLOOR = 0.12

# Per-bucket noise bounds for the control student.
CONTROL_SD_MIN = 0.008
CONTROL_SD_MAX = 0.08
CONTROL_FALLBACK_SD = 0.12

_TERMINAL = ".!?"
_BOS = "\x02"

STOPWORDS = frozenset(
    {
        "the", "a", "an", "and", "or", "but", "if", "then", "than", "that",
        "this", "these", "those", "is", "are", "was", "were", "be", "been",
        "being", "am", "do", "does", "did", "have", "has", "had", "will",
        "would", "can", "could", "should", "may", "might", "must", "shall",
        "of", "in", "on", "at", "by", "for", "with", "to", "from", "as",
        "it", "its", "he", "she",
    }
)

_NEGATORS = frozenset({"not", "no", "never", "none", "nothing", "neither", "nor", "cannot"})


def truncate_to_ratio(source: str, target: float) -> str:
    """Drop trailing whitespace tokens until the bare text meets the target
    ratio, then re-append a terminal period.

    Returns "" when even a single token is too long. The re-appended period
    may push the final ratio one character past the target; filters judge the
    final text, not the target.
    """
    src = source.strip()
    src_len = len(src)
    if src_len == 0:
        return ""
    tokens = src.split()
    for k in range(len(tokens), 0, -1):
        bare = " ".join(tokens[:k])
        if len(bare) / src_len > target:
            continue
        if k == len(tokens):
            return src
        trimmed = bare.rstrip(",;:-")
        if not trimmed:
            continue
        if trimmed[-1] not in _TERMINAL:
            trimmed += "."
        return trimmed
    return ""


def content_tokens(text: str) -> List[str]:
    return [t for t in tokenize(text) if t not in STOPWORDS]


def _negators(tokens: Sequence[str]) -> set:
    return {t for t in tokens if t in _NEGATORS or t.endswith("n't")}


class CharNgramLM:
    """Character n-gram model with add-1 smoothing; per-character logprobs."""

    kind = "scorer"

    def __init__(self, model_id: str, lines: Sequence[str], order: int = 5):
        self.model_id = model_id
        self.order = order
        self._counts: Dict[str, Counter] = defaultdict(Counter)
        self._totals: Counter = Counter()
        vocab = set()
        pad = _BOS * (order - 1)
        for line in lines:
            stream = pad + line
            vocab.update(line)
            for i in range(order - 1, len(stream)):
                ctx = stream[i - order + 1 : i]
                ch = stream[i]
                self._counts[ctx][ch] += 1
                self._totals[ctx] += 1
        # One extra slot so unseen characters keep positive probability.
        self._vocab_size = len(vocab) + 1

    def _logprob(self, ch: str, history: str) -> float:
        ctx = (_BOS * (self.order - 1) + history)[-(self.order - 1):]
        count = self._counts[ctx][ch] if ctx in self._counts else 0
        total = self._totals[ctx]
        return math.log((count + 1) / (total + self._vocab_size))

    def score(self, context: str, continuation: str) -> List[float]:
        """Log-probabilities for each character of the continuation.

        A non-empty context is joined with a single space; only continuation
        characters are scored, so empty-context scoring is unconditional
        scoring of the text itself.
        """
        stream = f"{context} {continuation}" if context else continuation
        offset = len(stream) - len(continuation)
        return [self._logprob(stream[i], stream[:i]) for i in range(offset, len(stream))]


class ContainmentNli:
    """Entailed iff the hypothesis introduces no content token; an introduced
    negator flips the verdict to contradiction."""

    kind = "nli"

    def __init__(self, model_id: str):
        self.model_id = model_id

    def classify(self, premise: str, hypothesis: str) -> NliResult:
        prem_tokens = tokenize(premise)
        hyp_tokens = tokenize(hypothesis)
        if _negators(hyp_tokens) - _negators(prem_tokens):
            label = LABEL_CONTRADICTION
        elif set(content_tokens(hypothesis)) <= set(content_tokens(premise)):
            label = LABEL_ENTAILMENT
        else:
            label = LABEL_NEUTRAL
        probs = {
            "entailment": 1.0 if label == LABEL_ENTAILMENT else 0.0,
            "neutral": 1.0 if label == LABEL_NEUTRAL else 0.0,
            "contradiction": 1.0 if label == LABEL_CONTRADICTION else 0.0,
        }
        return NliResult(label=label, probs=probs)


class OverlapSimilarity:
    """Clipped token-overlap precision/recall/F1 (stand-in for an embedding scorer)."""

    kind = "similarity"

    def __init__(self, model_id: str):
        self.model_id = model_id

    def score(self, candidate: str, reference: str) -> SimilarityScore:
        cand = Counter(tokenize(candidate))
        ref = Counter(tokenize(reference))
        overlap = sum(min(c, ref[t]) for t, c in cand.items())
        cand_total = sum(cand.values())
        ref_total = sum(ref.values())
        p = overlap / cand_total if cand_total else 0.0
        r = overlap / ref_total if ref_total else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        return SimilarityScore(precision=p, recall=r, f1=f1)


def _clip_ratio(x: float) -> float:
    return min(1.0, max(1e-6, x))


def _log_density_ratio(x: float, mean: float, sd: float) -> float:
    """Log of the normal density at x relative to its mode; 0 at the mode,
    negative elsewhere, so it orders like a pseudo-logprob."""
    if sd <= 0:
        return 0.0 if abs(x - mean) < 1e-9 else -1e9
    z = (x - mean) / sd
    return -0.5 * z * z


@dataclass(frozen=True)
class RatioSummarizer:
    """Truncation summarizer whose target ratios follow a fitted normal.

    State is a memorized exact-match table plus (mean, sd) over training
    compression ratios; that is enough for "trained on shorter summaries,
    generates shorter summaries" to hold literally.
    """

    model_id: str
    mean: float
    sd: float
    table: "tuple[tuple[str, str], ...]" = ()

    kind = "generator"

    def lookup(self, source: str) -> Optional[str]:
        for src, summary in self.table:
            if src == source:
                return summary
        return None

    def sample_target(self, rng) -> float:
        return _clip_ratio(rng.gauss(self.mean, self.sd))

    def score_ratio(self, ratio: float) -> float:
        return _log_density_ratio(ratio, self.mean, self.sd)


@dataclass(frozen=True)
class ControlSummarizer:
    """Bucket-conditional truncation summarizer.

    Per-bucket (mean, sd) are fitted from the control training file; prompting
    with bucket j samples a target near that bucket's training ratios. Unseen
    buckets fall back to the bucket midpoint with wide noise, which is how the
    loop populates compression ranges the seed data never covered.
    """

    model_id: str
    per_bucket: "tuple[tuple[int, tuple[float, float]], ...]"
    table: "tuple[tuple[tuple[str, int], str], ...]" = ()
    n_buckets: int = 10

    kind = "generator"

    def bucket_params(self, bucket: int) -> "tuple[float, float]":
        for b, params in self.per_bucket:
            if b == bucket:
                return params
        return (bucket + 0.5) / self.n_buckets, CONTROL_FALLBACK_SD

    def lookup(self, source: str, bucket: int) -> Optional[str]:
        for (src, b), summary in self.table:
            if src == source and b == bucket:
                return summary
        return None


def _parse_prompt(prompt: str) -> "tuple[str, Optional[int]]":
    """Recover (source, prompted_bucket) from any of the three prompt layouts."""
    text = prompt
    if "ORIGINAL: " in text:
        last = text.rsplit("ORIGINAL: ", 1)[1]
        if last.rstrip().endswith(codec.SEPARATOR):
            last = last.rstrip()[: -len(codec.SEPARATOR)]
        return last.strip(), None
    bucket = None
    if f" {codec.SEP} " in text:
        source, _, rest = text.partition(f" {codec.SEP} ")
        code = rest.split(f" {codec.SEPARATOR}", 1)[0].strip()
        digits = code.split(" ")
        if digits and digits[0].isdigit():
            bucket = int(digits[0])
        return source.strip(), bucket
    if codec.SEPARATOR in text:
        source = text.rsplit(f" {codec.SEPARATOR}", 1)[0]
        return source.strip(), None
    return text.strip(), None


class ToyBackend(Backend):
    """Registry of toy models behind the shared backend contract."""

    backend_id = "toy"

    def __init__(
        self,
        lm_lines: Optional[Sequence[str]] = None,
        *,
        teacher_mean: float = 0.7,
        teacher_sd: float = 0.05,
        seed: int = 0,
    ):
        self.seed = seed
        self._models: Dict[str, object] = {
            "toy-nli": ContainmentNli("toy-nli"),
            "toy-sim": OverlapSimilarity("toy-sim"),
            "toy-teacher": RatioSummarizer("toy-teacher", mean=teacher_mean, sd=teacher_sd),
            "toy-copy": RatioSummarizer("toy-copy", mean=1.0, sd=0.0),
            "toy-empty": RatioSummarizer("toy-empty", mean=1e-4, sd=0.0),
            "toy-student-base": RatioSummarizer("toy-student-base", mean=0.95, sd=STUDENT_SD_FLOOR),
        }
        if lm_lines is not None:
            self._models["toy-lm"] = CharNgramLM("toy-lm", lm_lines)

    def ref(self, model_id: str, **decoding) -> ModelRef:
        ref = ModelRef(backend_id=self.backend_id, model_id=model_id)
        return ref.with_decoding(**decoding) if decoding else ref

    def register(self, model) -> ModelRef:
        """Install a pre-built toy model (handy for engineered test states)."""
        self._models[model.model_id] = model
        return ModelRef(self.backend_id, model.model_id)

    def _get(self, model_id: str, kind: str):
        model = self._models.get(model_id)
        if model is None:
            raise ModelNotFoundError(f"backend {self.backend_id!r} has no model {model_id!r}")
        if model.kind != kind:
            raise ModelNotFoundError(
                f"model {model_id!r} is a {model.kind}, not a {kind}"
            )
        return model

    # -- generation ---------------------------------------------------------

    def generate(self, model: ModelRef, prompt: str) -> GenerationResult:
        if not prompt:
            raise BadRequestError("prompt must be non-empty")
        gen = self._get(model.model_id, "generator")
        source, prompted_bucket = _parse_prompt(prompt)
        if not source:
            raise BadRequestError("prompt carries no source text")
        rng = rng_from(model.model_id, model.decoding.seed, prompt)
        budget = model.decoding.max_new_chars
        candidates = []
        for i in range(model.decoding.num_return):
            if isinstance(gen, ControlSummarizer):
                if prompted_bucket is None:
                    raise BadRequestError(
                        f"model {model.model_id!r} expects a control prompt with a bucket code"
                    )
                bucket = prompted_bucket
                mean, sd = gen.bucket_params(bucket)
                memorized = gen.lookup(source, bucket) if i == 0 else None
                if memorized is not None:
                    text = memorized
                else:
                    text = truncate_to_ratio(source, _clip_ratio(rng.gauss(mean, sd)))
                achieved = char_count(text) / max(1, char_count(source))
                logprob = _log_density_ratio(achieved, mean, sd) if text else -1e9
            else:
                memorized = gen.lookup(source) if i == 0 else None
                if memorized is not None:
                    text = memorized
                else:
                    text = truncate_to_ratio(source, gen.sample_target(rng))
                achieved = char_count(text) / max(1, char_count(source))
                logprob = gen.score_ratio(achieved) if text else -1e9
            if len(text) > budget:
                text = text[:budget].rstrip()
            candidates.append(Candidate(text=text, logprob=logprob))
        return GenerationResult.from_candidates(candidates)

    # -- scoring ------------------------------------------------------------

    def score_conditional(self, model: ModelRef, context: str, continuation: str) -> List[float]:
        if not continuation:
            raise BadRequestError("continuation must be non-empty")
        lm = self._get(model.model_id, "scorer")
        return lm.score(context, continuation)

    # -- classification and similarity --------------------------------------

    def nli(self, model: ModelRef, premise: str, hypothesis: str) -> NliResult:
        if not premise or not hypothesis:
            raise BadRequestError("premise and hypothesis must be non-empty")
        return self._get(model.model_id, "nli").classify(premise, hypothesis)

    def similarity(self, model: ModelRef, candidate: str, reference: str) -> SimilarityScore:
        if not candidate or not reference:
            raise BadRequestError("candidate and reference must be non-empty")
        return self._get(model.model_id, "similarity").score(candidate, reference)

    # -- fine-tuning ---------------------------------------------------------

    def finetune(self, base: ModelRef, training_file: Path, epochs: int) -> ModelRef:
        if epochs < 0:
            raise BadRequestError("epochs must be >= 0")
        base_model = self._get(base.model_id, "generator")
        if epochs == 0:
            return base
        lines = Path(training_file).read_text(encoding="utf-8").splitlines()
        records = [(i, line) for i, line in enumerate(lines, start=1) if line.strip()]
        if not records:
            raise CodecError(f"{training_file}: training file holds no records")
        is_control = f" {codec.SEP} " in records[0][1]
        digest = sha256_hex("\n".join(line for _, line in records), str(epochs))[:8]
        new_id = f"{base.model_id}+ft{digest}"
        if new_id in self._models:
            return ModelRef(self.backend_id, new_id, base.decoding)
        # Fine-tuning starts from the previous student and moves its parameters
        # toward the new data; more epochs move them further.
        rate = 1.0 - 0.5 ** epochs
        if is_control:
            student = self._fit_control(new_id, base_model, records, rate)
        else:
            student = self._fit_ratio(new_id, base_model, records, rate)
        self._models[new_id] = student
        return ModelRef(self.backend_id, new_id, base.decoding)

    def _fit_ratio(self, model_id: str, base_model, records, rate: float) -> RatioSummarizer:
        ratios = []
        table = dict(base_model.table) if isinstance(base_model, RatioSummarizer) else {}
        for lineno, line in records:
            try:
                source, summary = codec.decode_distill_record(line)
            except CodecError as exc:
                raise CodecError(f"training file line {lineno}: {exc}") from exc
            ratios.append(char_count(summary) / max(1, char_count(source)))
            table[source] = summary
        mean = sum(ratios) / len(ratios)
        var = sum((r - mean) ** 2 for r in ratios) / (len(ratios) - 1) if len(ratios) > 1 else 0.0
        sd = max(math.sqrt(var), STUDENT_SD_FLOOR)
        if isinstance(base_model, RatioSummarizer):
            mean = base_model.mean + rate * (mean - base_model.mean)
            sd = max(base_model.sd + rate * (sd - base_model.sd), STUDENT_SD_FLOOR)
        return RatioSummarizer(model_id, mean=mean, sd=sd, table=tuple(sorted(table.items())))

    def _fit_control(self, model_id: str, base_model, records, rate: float) -> ControlSummarizer:
        by_bucket: Dict[int, List[float]] = defaultdict(list)
        table: Dict[Tuple[str, int], str] = (
            dict(base_model.table) if isinstance(base_model, ControlSummarizer) else {}
        )
        for lineno, line in records:
            try:
                source, summary, bucket, _reps = codec.decode_control_record(line)
            except CodecError as exc:
                raise CodecError(f"training file line {lineno}: {exc}") from exc
            by_bucket[bucket].append(char_count(summary) / max(1, char_count(source)))
            table[(source, bucket)] = summary
        is_control_base = isinstance(base_model, ControlSummarizer)
        per_bucket: Dict[int, Tuple[float, float]] = (
            dict(base_model.per_bucket) if is_control_base else {}
        )
        for bucket, ratios in by_bucket.items():
            mean = sum(ratios) / len(ratios)
            if len(ratios) > 1:
                sd = math.sqrt(sum((r - mean) ** 2 for r in ratios) / (len(ratios) - 1))
            else:
                sd = CONTROL_SD_MIN
            sd = min(max(sd, CONTROL_SD_MIN), CONTROL_SD_MAX)
            if is_control_base:
                # Buckets the previous student never trained on still have an
                # effective prior (the midpoint fallback) to move away from.
                prev_mean, prev_sd = base_model.bucket_params(bucket)
                mean = prev_mean + rate * (mean - prev_mean)
                sd = prev_sd + rate * (sd - prev_sd)
            per_bucket[bucket] = (mean, sd)
        return ControlSummarizer(
            model_id,
            per_bucket=tuple(sorted(per_bucket.items())),
            table=tuple(sorted(table.items())),
        )

    def health(self) -> HealthStatus:
        return HealthStatus(status="ok", models=tuple(sorted(self._models)))
