"""Atomic filter predicates over summary pairs and their conjunctions.

The named presets mirror the pipeline's filter compositions: f1 keeps only
accurate-and-short pairs, f2 additionally requires the summary to predict the
following sentence, and h (used by the control loop) pairs entailment with
the fluency check.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

from .backends import Backend, LABEL_ENTAILMENT, ModelRef
from .corpus import Corpus, KIND_SUMMARY_PAIRS, Manifest, SummaryPair
from .errors import FilterError, NSPContextMissing, TransportError, UndecidedBudgetExceeded
from .metrics import avg_nll
from .util import digest_of

ATOM_NLI = "nli"
ATOM_COMPRESS = "compress"
ATOM_NSP = "nsp"
ATOM_AVGNLL = "avgnll"


@dataclass(frozen=True)
class NliAtom:
    name = ATOM_NLI

    def describe(self) -> dict:
        return {"atom": ATOM_NLI}


@dataclass(frozen=True)
class CompressAtom:
    r: float
    name = ATOM_COMPRESS

    def __post_init__(self):
        if not 0 < self.r <= 1:
            raise FilterError(f"compression bound must be in (0, 1], got {self.r}")

    def describe(self) -> dict:
        return {"atom": ATOM_COMPRESS, "r": self.r}


@dataclass(frozen=True)
class NspAtom:
    l: float
    name = ATOM_NSP

    def __post_init__(self):
        if self.l <= 0:
            raise FilterError(f"NSP threshold must be positive, got {self.l}")

    def describe(self) -> dict:
        return {"atom": ATOM_NSP, "l": self.l}


@dataclass(frozen=True)
class AvgNllAtom:
    name = ATOM_AVGNLL

    def describe(self) -> dict:
        return {"atom": ATOM_AVGNLL}


Atom = Union[NliAtom, CompressAtom, NspAtom, AvgNllAtom]


@dataclass(frozen=True)
class FilterSpec:
    """A conjunction of atomic filters."""

    atoms: Tuple[Atom, ...] = ()

    def __post_init__(self):
        if sum(1 for a in self.atoms if isinstance(a, CompressAtom)) > 1:
            raise FilterError("at most one compression atom per filter")

    @classmethod
    def f1(cls, r: float) -> "FilterSpec":
        return cls((NliAtom(), CompressAtom(r)))

    @classmethod
    def f2(cls, r: float, l: float) -> "FilterSpec":
        return cls((NliAtom(), CompressAtom(r), NspAtom(l)))

    @classmethod
    def h(cls) -> "FilterSpec":
        return cls((NliAtom(), AvgNllAtom()))

    def needs_context(self) -> bool:
        return any(isinstance(a, NspAtom) for a in self.atoms)

    def describe(self) -> list:
        return [a.describe() for a in self.atoms]

    def digest(self) -> str:
        return digest_of(self.describe())


@dataclass(frozen=True)
class AtomOutcome:
    passed: bool
    value: Any


@dataclass(frozen=True)
class FilterOutcome:
    accepted: bool
    per_atom: Dict[str, AtomOutcome]


@dataclass
class FilterContext:
    """Backends and limits the filter atoms need at evaluation time."""

    backend: Backend
    nli_model: Optional[ModelRef] = None
    lm_model: Optional[ModelRef] = None
    undecided_budget: float = 0.01
    concurrency: int = 1


@dataclass
class RejectionStats:
    total: int = 0
    accepted: int = 0
    rejected_nli: int = 0
    rejected_compress: int = 0
    rejected_nsp: int = 0
    rejected_avgnll: int = 0
    undecided: int = 0

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "accepted": self.accepted,
            "rejected_nli": self.rejected_nli,
            "rejected_compress": self.rejected_compress,
            "rejected_nsp": self.rejected_nsp,
            "rejected_avgnll": self.rejected_avgnll,
            "undecided": self.undecided,
        }


def eval_compress(pair: SummaryPair, r: float) -> AtomOutcome:
    """Pass iff the measured ratio is at or below the bound (inclusive)."""
    return AtomOutcome(passed=pair.ratio <= r, value=pair.ratio)


def eval_nli(backend: Backend, model: ModelRef, source: str, summary: str) -> AtomOutcome:
    result = backend.nli(model, premise=source, hypothesis=summary)
    return AtomOutcome(passed=result.label == LABEL_ENTAILMENT, value=result.label)


def eval_nsp(
    backend: Backend,
    model: ModelRef,
    source: str,
    summary: str,
    next_text: Optional[str],
    l: float,
) -> AtomOutcome:
    """Pass iff log p(next|summary) - log p(next|source) >= ln(l).

    Decided entirely in log space: the probabilities themselves underflow for
    realistic sentence lengths.
    """
    if not next_text:
        raise NSPContextMissing("NSP filter needs the following sentence")
    given_summary = sum(backend.score_conditional(model, summary, next_text))
    given_source = sum(backend.score_conditional(model, source, next_text))
    log_ratio = given_summary - given_source
    return AtomOutcome(passed=log_ratio >= math.log(l), value=log_ratio)


def eval_avgnll(backend: Backend, model: ModelRef, source: str, summary: str) -> AtomOutcome:
    """Pass iff the summary's mean NLL does not exceed the source's."""
    summary_nll = avg_nll(backend.score_unconditional(model, summary))
    source_nll = avg_nll(backend.score_unconditional(model, source))
    return AtomOutcome(
        passed=summary_nll <= source_nll,
        value={"summary": summary_nll, "source": source_nll},
    )


def _require(model: Optional[ModelRef], what: str) -> ModelRef:
    if model is None:
        raise FilterError(f"filter context is missing the {what} model")
    return model


def apply_filter(spec: FilterSpec, pair: SummaryPair, context: FilterContext) -> FilterOutcome:
    """Evaluate every atom (no short-circuit) and take the conjunction."""
    per_atom: Dict[str, AtomOutcome] = {}
    for atom in spec.atoms:
        if isinstance(atom, NliAtom):
            outcome = eval_nli(
                context.backend, _require(context.nli_model, "NLI"), pair.source, pair.summary
            )
        elif isinstance(atom, CompressAtom):
            outcome = eval_compress(pair, atom.r)
        elif isinstance(atom, NspAtom):
            outcome = eval_nsp(
                context.backend,
                _require(context.lm_model, "scoring"),
                pair.source,
                pair.summary,
                pair.next_text,
                atom.l,
            )
        else:
            outcome = eval_avgnll(
                context.backend, _require(context.lm_model, "scoring"), pair.source, pair.summary
            )
        per_atom[atom.name] = outcome
    return FilterOutcome(accepted=all(o.passed for o in per_atom.values()), per_atom=per_atom)


def filter_corpus(
    spec: FilterSpec,
    corpus: Corpus,
    context: FilterContext,
    *,
    name: Optional[str] = None,
) -> "tuple[Corpus, RejectionStats]":
    """Keep exactly the accepted pairs, order preserved.

    Transport failures leave pairs undecided rather than silently rejected;
    the run aborts once undecided pairs exceed the configured budget.
    """
    if corpus.kind != KIND_SUMMARY_PAIRS:
        raise FilterError(f"can only filter summary pairs, got kind {corpus.kind!r}")

    def evaluate(pair: SummaryPair):
        try:
            return apply_filter(spec, pair, context)
        except TransportError:
            return None

    if context.concurrency > 1 and len(corpus) > 1:
        with ThreadPoolExecutor(max_workers=context.concurrency) as pool:
            outcomes = list(pool.map(evaluate, corpus.records))
    else:
        outcomes = [evaluate(pair) for pair in corpus.records]

    stats = RejectionStats(total=len(corpus))
    kept: List[SummaryPair] = []
    for pair, outcome in zip(corpus.records, outcomes):
        if outcome is None:
            stats.undecided += 1
            continue
        if outcome.accepted:
            stats.accepted += 1
            kept.append(pair)
            continue
        for atom_name, atom_outcome in outcome.per_atom.items():
            if not atom_outcome.passed:
                field_name = f"rejected_{atom_name}"
                setattr(stats, field_name, getattr(stats, field_name) + 1)
    if stats.total and stats.undecided / stats.total > context.undecided_budget:
        raise UndecidedBudgetExceeded(
            f"{stats.undecided}/{stats.total} pairs undecided exceeds budget "
            f"{context.undecided_budget:.2%}: {stats.to_json()}"
        )
    manifest = Manifest(
        name=name or f"{corpus.name}.filtered",
        kind=KIND_SUMMARY_PAIRS,
        parents=(corpus.name,),
        filter_digest=spec.digest(),
        model_ref=corpus.manifest.model_ref,
        iteration=corpus.manifest.iteration,
        seed=corpus.manifest.seed,
        created_at=corpus.manifest.created_at,
    )
    return Corpus(manifest=manifest, records=kept), stats
