"""Closed-form measurements: compression ratios, buckets, AvgNLL, ROUGE,
longest non-decreasing subsequence, corpus statistics, and Fleiss kappa."""

from __future__ import annotations

import bisect
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Union

from .corpus import Corpus, KIND_SUMMARY_PAIRS
from .errors import MetricError
from .util import char_count


class _Overflow:
    """Singleton bucket for ratios >= 1: the summary did not compress."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "Overflow"


OVERFLOW = _Overflow()

Bucket = Union[int, _Overflow]


def compression_ratio(source: str, summary: str) -> float:
    """|summary| / |source| in characters, after trimming outer whitespace."""
    src_len = char_count(source)
    if src_len == 0:
        raise MetricError("compression ratio requires a non-empty source")
    return char_count(summary) / src_len


@dataclass(frozen=True)
class BucketSpec:
    """n equal-width compression intervals [j/n, (j+1)/n) tiling [0, 1)."""

    n: int = 10

    def __post_init__(self):
        if not 0 < self.n <= 10:
            raise MetricError(f"bucket count must be in [1, 10], got {self.n}")

    def bounds(self, j: int) -> "tuple[float, float]":
        return j / self.n, (j + 1) / self.n


def bucket_of(ratio: float, spec: BucketSpec) -> Bucket:
    """Left-closed bucket index, or OVERFLOW for ratio >= 1.

    Comparisons run against j/n computed in float, so boundary ratios land in
    the bucket they open (bucket_of(j/n) == j) regardless of rounding.
    """
    if ratio < 0:
        raise MetricError(f"ratio must be non-negative, got {ratio}")
    if ratio >= 1.0:
        return OVERFLOW
    for j in range(spec.n):
        if j / spec.n <= ratio < (j + 1) / spec.n:
            return j
    # Float gaps right below 1.0 belong to the top bucket.
    return spec.n - 1


def avg_nll(token_logprobs: Sequence[float]) -> float:
    """Mean negative log-likelihood per token."""
    if not token_logprobs:
        raise MetricError("AvgNLL of an empty token sequence is undefined")
    for lp in token_logprobs:
        if lp > 0:
            raise MetricError(f"log-probability must be <= 0, got {lp}")
    return -sum(token_logprobs) / len(token_logprobs)


_TOKEN_CLEAN = re.compile(r"[^a-z0-9']+")


def tokenize(text: str) -> List[str]:
    """Lowercase, strip characters outside [a-z0-9'], split on whitespace.

    No stemming, no stopword removal; fixed so scores are reproducible.
    """
    return [t for t in (_TOKEN_CLEAN.sub("", w) for w in text.lower().split()) if t]


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


def _prf(overlap: float, cand_total: float, ref_total: float, degenerate: bool = False) -> RougeScore:
    p = overlap / cand_total if cand_total else 0.0
    r = overlap / ref_total if ref_total else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return RougeScore(p, r, f1, degenerate)


def rouge_n(candidate: str, reference: str, n: int) -> RougeScore:
    """Clipped n-gram overlap precision/recall/F1."""
    if n < 1:
        raise MetricError(f"n-gram order must be >= 1, got {n}")
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if len(cand) < n or len(ref) < n:
        return RougeScore(0.0, 0.0, 0.0, degenerate=True)
    cand_grams = Counter(tuple(cand[i : i + n]) for i in range(len(cand) - n + 1))
    ref_grams = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
    overlap = sum(min(c, ref_grams[g]) for g, c in cand_grams.items())
    return _prf(overlap, sum(cand_grams.values()), sum(ref_grams.values()))


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    row = [0] * (len(b) + 1)
    for x in a:
        prev = 0
        for j, y in enumerate(b, start=1):
            cur = row[j]
            row[j] = prev + 1 if x == y else max(row[j], row[j - 1])
            prev = cur
    return row[len(b)]


def rouge_l(candidate: str, reference: str) -> RougeScore:
    """Token-level longest-common-subsequence precision/recall/F1."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return RougeScore(0.0, 0.0, 0.0, degenerate=True)
    lcs = _lcs_length(cand, ref)
    return _prf(lcs, len(cand), len(ref))


def lnds_length(scores: Sequence[float]) -> int:
    """Length of the longest non-decreasing subsequence."""
    tails: List[float] = []
    for x in scores:
        pos = bisect.bisect_right(tails, x)
        if pos == len(tails):
            tails.append(x)
        else:
            tails[pos] = x
    return len(tails)


@dataclass(frozen=True)
class CorpusStats:
    """Flat per-corpus statistics; stdev is the sample (n-1) estimate."""

    mean_cr: float
    stdev_cr: float
    pct_cr_ge_1: float
    histogram: Dict[str, int]
    count: int

    def to_flat(self) -> Dict[str, object]:
        flat: Dict[str, object] = {
            "mean_cr": self.mean_cr,
            "stdev_cr": self.stdev_cr,
            "pct_cr_ge_1": self.pct_cr_ge_1,
        }
        for j in range(10):
            flat[f"hist_{j}"] = self.histogram.get(str(j), 0)
        flat["hist_overflow"] = self.histogram.get("overflow", 0)
        return flat


def corpus_stats(pairs: Corpus, spec: BucketSpec) -> CorpusStats:
    if pairs.kind != KIND_SUMMARY_PAIRS:
        raise MetricError(f"corpus stats need summary pairs, got kind {pairs.kind!r}")
    if len(pairs) == 0:
        raise MetricError(f"corpus {pairs.name!r} is empty")
    ratios = [p.ratio for p in pairs]
    n = len(ratios)
    mean = sum(ratios) / n
    stdev = math.sqrt(sum((r - mean) ** 2 for r in ratios) / (n - 1)) if n > 1 else 0.0
    histogram = {str(j): 0 for j in range(spec.n)}
    histogram["overflow"] = 0
    for r in ratios:
        b = bucket_of(r, spec)
        histogram["overflow" if b is OVERFLOW else str(b)] += 1
    return CorpusStats(
        mean_cr=mean,
        stdev_cr=stdev,
        pct_cr_ge_1=histogram["overflow"] / n,
        histogram=histogram,
        count=n,
    )


def fleiss_kappa(ratings: Sequence[Sequence[int]]) -> float:
    """Chance-corrected multi-rater agreement over an items x categories count matrix.

    Every item must be rated by the same number of raters. Perfect agreement
    with degenerate chance agreement (both 1) returns 1.0 by convention.
    """
    if not ratings:
        raise MetricError("Fleiss kappa requires at least one item")
    raters = sum(ratings[0])
    if raters < 2:
        raise MetricError("Fleiss kappa requires at least 2 raters per item")
    n_cats = len(ratings[0])
    for i, row in enumerate(ratings):
        if len(row) != n_cats:
            raise MetricError(f"item {i} has {len(row)} categories, expected {n_cats}")
        if sum(row) != raters:
            raise MetricError(f"item {i} rated by {sum(row)} raters, expected {raters}")
    n_items = len(ratings)
    p_i = [
        (sum(c * c for c in row) - raters) / (raters * (raters - 1))
        for row in ratings
    ]
    p_bar = sum(p_i) / n_items
    totals = [sum(row[j] for row in ratings) for j in range(n_cats)]
    grand = n_items * raters
    p_j = [t / grand for t in totals]
    p_e = sum(p * p for p in p_j)
    if p_e == 1.0:
        return 1.0 if p_bar == 1.0 else 0.0
    return (p_bar - p_e) / (1 - p_e)
