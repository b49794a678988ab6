"""Bit-exact record, prompt, and control-code templates.

These strings are the fine-tuning file format: one encoded record per line.
"<sep>" and "<eos>" are literal in files; a serving layer maps them to
tokenizer specials.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

from .errors import CodecError, EmptyGeneration

EOS = "<eos>"
SEP = "<sep>"
SEPARATOR = "TL;DR:"

MAX_BUCKETS = 10
DEFAULT_CODE_REPETITIONS = 10

_SENTINELS = (EOS, SEP)


def _check_text(name: str, value: str) -> None:
    if not value:
        raise CodecError(f"{name} must be non-empty")
    for sentinel in _SENTINELS:
        if sentinel in value:
            raise CodecError(f"{name} contains embedded sentinel {sentinel!r}")


def control_code(bucket: int, n_buckets: int, reps: int = DEFAULT_CODE_REPETITIONS) -> str:
    """The single digit character for the bucket, repeated and space-joined."""
    if not 0 < n_buckets <= MAX_BUCKETS:
        raise CodecError(f"n_buckets must be in [1, {MAX_BUCKETS}], got {n_buckets}")
    if not 0 <= bucket < n_buckets:
        raise CodecError(f"bucket {bucket} out of range [0, {n_buckets})")
    if reps < 1:
        raise CodecError(f"code repetitions must be >= 1, got {reps}")
    return " ".join(str(bucket) for _ in range(reps))


def encode_distill_record(source: str, summary: str) -> str:
    _check_text("source", source)
    _check_text("summary", summary)
    return f"{source} {SEPARATOR} {summary} {EOS}"


def decode_distill_record(record: str) -> Tuple[str, str]:
    suffix = f" {EOS}"
    if not record.endswith(suffix):
        raise CodecError(f"record does not end with {EOS!r}")
    body = record[: -len(suffix)]
    sep = f" {SEPARATOR} "
    head, found, summary = body.partition(sep)
    if not found:
        raise CodecError(f"record has no {SEPARATOR!r} separator")
    return head, summary


def encode_control_record(
    source: str,
    summary: str,
    bucket: int,
    n_buckets: int,
    reps: int = DEFAULT_CODE_REPETITIONS,
) -> str:
    _check_text("source", source)
    _check_text("summary", summary)
    code = control_code(bucket, n_buckets, reps)
    return f"{source} {SEP} {code} {SEPARATOR} {summary} {EOS}"


def decode_control_record(record: str) -> Tuple[str, str, int, int]:
    """Returns (source, summary, bucket, reps)."""
    suffix = f" {EOS}"
    if not record.endswith(suffix):
        raise CodecError(f"record does not end with {EOS!r}")
    body = record[: -len(suffix)]
    source, found, rest = body.partition(f" {SEP} ")
    if not found:
        raise CodecError(f"record has no {SEP!r} separator")
    code_part, found, summary = rest.partition(f" {SEPARATOR} ")
    if not found:
        raise CodecError(f"record has no {SEPARATOR!r} separator")
    tokens = code_part.split(" ")
    if not tokens or any(t != tokens[0] for t in tokens) or not tokens[0].isdigit():
        raise CodecError(f"malformed control code {code_part!r}")
    return source, summary, int(tokens[0]), len(tokens)


def build_generation_prompt(
    source: str,
    control: Optional[Tuple[int, int, int]] = None,
) -> str:
    """The training-record prefix up to and including "TL;DR:" plus one space.

    ``control`` is (bucket, n_buckets, reps); when present the prompt carries
    the separator token and the control code.
    """
    _check_text("source", source)
    if control is None:
        return f"{source} {SEPARATOR} "
    bucket, n_buckets, reps = control
    code = control_code(bucket, n_buckets, reps)
    return f"{source} {SEP} {code} {SEPARATOR} "


def parse_generation(raw: str) -> str:
    """Model output up to the first end sentinel, whitespace-trimmed."""
    cut = raw.find(EOS)
    text = raw if cut < 0 else raw[:cut]
    text = text.strip()
    if not text:
        raise EmptyGeneration("generation is empty after sentinel stripping")
    return text


def assemble_fewshot_prompt(exemplars: Sequence[Tuple[str, str]], query: str) -> str:
    """Few-shot teacher prompt: exemplar lines then an unterminated query line."""
    if not exemplars:
        raise CodecError("few-shot prompt requires at least one exemplar")
    _check_text("query", query)
    lines = []
    for source, summary in exemplars:
        _check_text("exemplar source", source)
        _check_text("exemplar summary", summary)
        lines.append(f"ORIGINAL: {source} {SEPARATOR} {summary}")
    lines.append(f"ORIGINAL: {query} {SEPARATOR}")
    return "\n".join(lines)
