"""Small shared helpers: hashing, canonical JSON, deterministic RNG seeding."""

from __future__ import annotations

import hashlib
import json
import random
from typing import Any


def char_count(text: str) -> int:
    """Character length after trimming leading/trailing whitespace.

    Every remaining character counts, including spaces and punctuation.
    This is the single length rule used for compression ratios and buckets.
    """
    return len(text.strip())


def canonical_json(obj: Any) -> str:
    """Stable, diffable JSON: sorted keys, compact separators, raw unicode."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(*parts: str) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()


def digest_of(obj: Any) -> str:
    """Short content digest of a JSON-serializable object."""
    return sha256_hex(canonical_json(obj))[:16]


def rng_from(*parts: Any) -> random.Random:
    """Deterministic RNG derived from a stable hash of the given parts.

    Unlike ``hash()``, this is stable across processes, so concurrent and
    repeated runs draw identical streams.
    """
    seed = int(sha256_hex(*(str(p) for p in parts))[:16], 16)
    return random.Random(seed)


def map_bounded(fn, items, concurrency: int) -> list:
    """Order-preserving map with a bounded number of concurrent workers."""
    items = list(items)
    if concurrency > 1 and len(items) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def provenance_stamp(*parts: Any) -> str:
    """Deterministic provenance stamp for manifest ``created_at`` fields.

    Reruns with identical inputs must be byte-identical, so this is a digest
    of the inputs rather than wall-clock time.
    """
    return "cfg-" + sha256_hex(*(str(p) for p in parts))[:16]
