"""Shared fixtures: deterministic synthetic documents and toy-backed contexts."""

from __future__ import annotations

import random

import pytest

from sumdistill.backends.toy import ToyBackend
from sumdistill.corpus import ingest_documents
from sumdistill.distill import PipelineContext

# No negators, no abbreviation-shaped tokens: truncation summaries of these
# sentences are always entailed under the containment NLI.
WORD_BANK = [
    "harbor", "signal", "council", "meadow", "turbine", "library", "granite",
    "festival", "archive", "voyage", "lantern", "orchard", "furnace", "gallery",
    "monsoon", "quarry", "saddle", "timber", "valley", "willow", "anchor",
    "ballast", "canyon", "dispatch", "ember", "foundry", "glacier", "hollow",
    "ivory", "junction", "kestrel", "ledger", "marble", "nectar", "outpost",
    "paddock", "quiver", "ridge", "sawmill", "terrace", "upland", "vessel",
    "warden", "yonder", "zephyr", "basin", "copper", "delta", "estuary",
    "fjord", "grove", "harvest", "inlet", "jetty", "kiln", "lagoon",
    "workers", "engineers", "residents", "officials", "students", "farmers",
    "reported", "described", "measured", "repaired", "surveyed", "gathered",
]


def make_documents(n_docs: int = 60, sentences_per_doc: int = 8, seed: int = 11,
                   min_words: int = 20, max_words: int = 32) -> list:
    """Synthetic documents whose sentences run ~140-250 characters."""
    rng = random.Random(seed)
    docs = []
    for d in range(n_docs):
        sentences = []
        for _ in range(sentences_per_doc):
            count = rng.randint(min_words, max_words)
            words = [rng.choice(WORD_BANK) for _ in range(count)]
            sentence = " ".join(words)
            sentence = sentence[0].upper() + sentence[1:] + "."
            sentences.append(sentence)
        docs.append({"doc_id": f"doc{d:03d}", "text": " ".join(sentences)})
    return docs


@pytest.fixture(scope="session")
def fixture_docs():
    return make_documents()


@pytest.fixture(scope="session")
def fixture_corpus(fixture_docs):
    corpus, _ = ingest_documents(fixture_docs, min_chars=50, name="fixture")
    return corpus


@pytest.fixture(scope="session")
def lm_lines(fixture_corpus):
    return [rec.text for rec in fixture_corpus.records]


@pytest.fixture()
def toy_backend(lm_lines):
    return ToyBackend(lm_lines=lm_lines, teacher_mean=0.7, teacher_sd=0.05, seed=3)


@pytest.fixture()
def ctx(toy_backend):
    return PipelineContext(
        backend=toy_backend,
        nli_model=toy_backend.ref("toy-nli"),
        lm_model=toy_backend.ref("toy-lm"),
        similarity_model=toy_backend.ref("toy-sim"),
        concurrency=2,
    )
