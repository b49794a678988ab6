"""Corpus store: sentence ingestion, partitioning, and line-delimited persistence.

A corpus file is UTF-8 JSONL: one manifest line followed by one record per
line. Sentence records carry exactly the fields id, doc_id, text, next_text,
char_len; the manifest carries name, kind, parents, filter_digest, model_ref,
iteration, seed, created_at.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

from .errors import CorpusError, IngestError, PartitionError
from .util import char_count, sha256_hex

KIND_SENTENCES = "sentences"
KIND_SUMMARY_PAIRS = "summary_pairs"

DEFAULT_MIN_CHARS = 50

_MANIFEST_FIELDS = ("name", "kind", "parents", "filter_digest", "model_ref", "iteration", "seed", "created_at")


@dataclass(frozen=True)
class SentenceRecord:
    """One source sentence plus the sentence that follows it in the document."""

    id: str
    doc_id: str
    text: str
    next_text: Optional[str]
    char_len: int

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "doc_id": self.doc_id,
            "text": self.text,
            "next_text": self.next_text,
            "char_len": self.char_len,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SentenceRecord":
        return cls(
            id=obj["id"],
            doc_id=obj["doc_id"],
            text=obj["text"],
            next_text=obj.get("next_text"),
            char_len=obj["char_len"],
        )


@dataclass(frozen=True)
class SummaryPair:
    """A (source, summary) pair with its measured compression ratio.

    ``id`` is unique within a corpus; ``source_id`` keys joins back to the
    sentence the summary was generated from. Bucket fields are optional:
    ``prompted_bucket`` is what generation was conditioned on, ``actual_bucket``
    is where the measured ratio landed.
    """

    id: str
    source_id: str
    doc_id: str
    source: str
    summary: str
    ratio: float
    next_text: Optional[str] = None
    prompted_bucket: Optional[int] = None
    actual_bucket: Optional[int] = None
    logprob: Optional[float] = None
    unrescued: Optional[bool] = None

    @classmethod
    def create(
        cls,
        source_id: str,
        doc_id: str,
        source: str,
        summary: str,
        *,
        pair_id: Optional[str] = None,
        next_text: Optional[str] = None,
        prompted_bucket: Optional[int] = None,
        actual_bucket: Optional[int] = None,
        logprob: Optional[float] = None,
        unrescued: Optional[bool] = None,
    ) -> "SummaryPair":
        if char_count(source) == 0:
            raise CorpusError("summary pair requires a non-empty source")
        ratio = char_count(summary) / char_count(source)
        return cls(
            id=pair_id or source_id,
            source_id=source_id,
            doc_id=doc_id,
            source=source,
            summary=summary,
            ratio=ratio,
            next_text=next_text,
            prompted_bucket=prompted_bucket,
            actual_bucket=actual_bucket,
            logprob=logprob,
            unrescued=unrescued,
        )

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "source_id": self.source_id,
            "doc_id": self.doc_id,
            "source": self.source,
            "summary": self.summary,
            "ratio": self.ratio,
            "next_text": self.next_text,
            "prompted_bucket": self.prompted_bucket,
            "actual_bucket": self.actual_bucket,
            "logprob": self.logprob,
            "unrescued": self.unrescued,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SummaryPair":
        return cls(
            id=obj["id"],
            source_id=obj["source_id"],
            doc_id=obj["doc_id"],
            source=obj["source"],
            summary=obj["summary"],
            ratio=obj["ratio"],
            next_text=obj.get("next_text"),
            prompted_bucket=obj.get("prompted_bucket"),
            actual_bucket=obj.get("actual_bucket"),
            logprob=obj.get("logprob"),
            unrescued=obj.get("unrescued"),
        )


Record = Union[SentenceRecord, SummaryPair]


@dataclass(frozen=True)
class Manifest:
    """Provenance for a corpus: where it came from and under which settings."""

    name: str
    kind: str
    parents: tuple = ()
    filter_digest: Optional[str] = None
    model_ref: Optional[str] = None
    iteration: Optional[int] = None
    seed: Optional[int] = None
    created_at: str = ""

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "parents": list(self.parents),
            "filter_digest": self.filter_digest,
            "model_ref": self.model_ref,
            "iteration": self.iteration,
            "seed": self.seed,
            "created_at": self.created_at,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Manifest":
        missing = [k for k in _MANIFEST_FIELDS if k not in obj]
        if missing:
            raise CorpusError(f"manifest missing fields: {', '.join(missing)}")
        return cls(
            name=obj["name"],
            kind=obj["kind"],
            parents=tuple(obj["parents"]),
            filter_digest=obj["filter_digest"],
            model_ref=obj["model_ref"],
            iteration=obj["iteration"],
            seed=obj["seed"],
            created_at=obj["created_at"],
        )


@dataclass
class Corpus:
    """A named, manifest-tracked collection of records of a single kind."""

    manifest: Manifest
    records: list = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.manifest.name

    @property
    def kind(self) -> str:
        return self.manifest.kind

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    def validate(self) -> None:
        if self.kind not in (KIND_SENTENCES, KIND_SUMMARY_PAIRS):
            raise CorpusError(f"unknown corpus kind {self.kind!r}")
        expected = SentenceRecord if self.kind == KIND_SENTENCES else SummaryPair
        seen = set()
        for rec in self.records:
            if not isinstance(rec, expected):
                raise CorpusError(
                    f"corpus {self.name!r} of kind {self.kind!r} holds a {type(rec).__name__}"
                )
            if rec.id in seen:
                raise CorpusError(f"duplicate record id {rec.id!r} in corpus {self.name!r}")
            seen.add(rec.id)


@dataclass
class IngestStats:
    docs_total: int = 0
    docs_empty: int = 0
    sentences_seen: int = 0
    sentences_kept: int = 0
    sentences_below_min: int = 0


# Words before a period that do not end a sentence. Single uppercase letters
# (initials) are guarded separately.
_ABBREVIATIONS = frozenset(
    {
        "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "lt", "col", "gen",
        "sgt", "capt", "cmdr", "rev", "hon", "gov", "sen", "rep", "pres",
        "vs", "etc", "e.g", "i.e", "cf", "al", "approx", "dept", "est",
        "inc", "ltd", "co", "corp", "no", "vol", "fig", "ed",
        "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept",
        "oct", "nov", "dec", "mon", "tue", "wed", "thu", "fri", "sat", "sun",
        "u.s", "u.k", "u.n", "d.c", "a.m", "p.m",
    }
)

_BOUNDARY = re.compile(r"([.!?])(['\"’”»)\]]*)(\s+)(?=['\"‘“«(\[]?[A-Z0-9])")


def split_sentences(text: str) -> list:
    """Deterministic rule-based sentence splitter.

    Splits after . ! ? (plus closing quotes) followed by whitespace and an
    uppercase, digit, or quote start, unless the preceding word is a known
    abbreviation or a single-letter initial.
    """
    sentences = []
    start = 0
    for m in _BOUNDARY.finditer(text):
        if m.start(1) < start:
            continue
        if m.group(1) == ".":
            before = text[start : m.start(1)]
            tail = before.rsplit(None, 1)
            word = tail[-1] if tail else ""
            word = word.strip("'\"‘’“”()[]").lower()
            if word in _ABBREVIATIONS or (len(word) == 1 and word.isalpha()):
                continue
        sentence = text[start : m.end(2)].strip()
        if sentence:
            sentences.append(sentence)
        start = m.end(3)
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def record_id(doc_id: str, index: int) -> str:
    """Content hash of (doc_id, sentence index): reproducible joins across runs."""
    return sha256_hex(doc_id, str(index))[:16]


def ingest_documents(
    docs: Iterable[dict],
    min_chars: int = DEFAULT_MIN_CHARS,
    *,
    name: str = "ingested",
    created_at: str = "",
) -> "tuple[Corpus, IngestStats]":
    """Split documents into sentence records with next-sentence context.

    The minimum-length cut applies to the sentence being summarized only; a
    short successor is still recorded as ``next_text`` so contextual filtering
    keeps the true next sentence.
    """
    if min_chars < 0:
        raise IngestError("min_chars must be >= 0")
    stats = IngestStats()
    records = []
    for pos, doc in enumerate(docs):
        try:
            doc_id = doc["doc_id"]
            text = doc["text"]
        except (TypeError, KeyError) as exc:
            raise IngestError(f"document {pos}: missing field {exc}") from exc
        stats.docs_total += 1
        sentences = split_sentences(text)
        if not sentences:
            stats.docs_empty += 1
            continue
        for idx, sentence in enumerate(sentences):
            stats.sentences_seen += 1
            if len(sentence) < min_chars:
                stats.sentences_below_min += 1
                continue
            next_text = sentences[idx + 1] if idx + 1 < len(sentences) else None
            records.append(
                SentenceRecord(
                    id=record_id(doc_id, idx),
                    doc_id=doc_id,
                    text=sentence,
                    next_text=next_text,
                    char_len=len(sentence),
                )
            )
            stats.sentences_kept += 1
    manifest = Manifest(name=name, kind=KIND_SENTENCES, created_at=created_at)
    corpus = Corpus(manifest=manifest, records=records)
    corpus.validate()
    return corpus, stats


def read_documents(path: Path) -> Iterator[dict]:
    """Stream {doc_id, text} objects from a JSONL file."""
    path = Path(path)
    try:
        handle = path.open("r", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read document stream {path}: {exc}") from exc
    with handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}: line {lineno}: invalid JSON document") from exc
            yield obj


def partition(corpus: Corpus, sizes: Sequence[int], seed: int) -> list:
    """Split a corpus into disjoint, exactly sized parts, deterministically."""
    total = sum(sizes)
    if any(s < 0 for s in sizes):
        raise PartitionError("partition sizes must be non-negative")
    if total > len(corpus):
        deficit = total - len(corpus)
        raise PartitionError(
            f"requested {total} records but corpus {corpus.name!r} has {len(corpus)}"
            f" (deficit {deficit})"
        )
    indices = list(range(len(corpus)))
    random.Random(seed).shuffle(indices)
    parts = []
    cursor = 0
    for i, size in enumerate(sizes):
        chosen = sorted(indices[cursor : cursor + size])
        cursor += size
        manifest = Manifest(
            name=f"{corpus.name}/part{i}",
            kind=corpus.kind,
            parents=(corpus.name,),
            seed=seed,
            created_at=corpus.manifest.created_at,
        )
        parts.append(Corpus(manifest=manifest, records=[corpus.records[j] for j in chosen]))
    return parts


def _record_from_json(kind: str, obj: dict) -> Record:
    if kind == KIND_SENTENCES:
        return SentenceRecord.from_json(obj)
    return SummaryPair.from_json(obj)


def write_corpus(corpus: Corpus, path: Path) -> None:
    """Persist as one manifest line followed by one record per line."""
    corpus.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as out:
        out.write(json.dumps(corpus.manifest.to_json(), sort_keys=True, ensure_ascii=False))
        out.write("\n")
        for rec in corpus.records:
            out.write(json.dumps(rec.to_json(), sort_keys=True, ensure_ascii=False))
            out.write("\n")


def read_corpus(path: Path) -> Corpus:
    """Inverse of write_corpus; errors cite the offending line number."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    if not lines:
        raise CorpusError(f"{path}: empty file, expected a manifest on line 1")
    try:
        manifest = Manifest.from_json(json.loads(lines[0]))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: line 1: malformed manifest") from exc
    if manifest.kind not in (KIND_SENTENCES, KIND_SUMMARY_PAIRS):
        raise CorpusError(f"{path}: line 1: unknown corpus kind {manifest.kind!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}: line {lineno}: malformed record") from exc
        try:
            records.append(_record_from_json(manifest.kind, obj))
        except KeyError as exc:
            raise CorpusError(
                f"{path}: line {lineno}: record does not match kind {manifest.kind!r}"
                f" (missing {exc})"
            ) from exc
    corpus = Corpus(manifest=manifest, records=records)
    try:
        corpus.validate()
    except CorpusError as exc:
        raise CorpusError(f"{path}: {exc}") from exc
    return corpus
