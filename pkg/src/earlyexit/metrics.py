"""Bounded similarity metrics over token-id sequences, and the derived
dissimilarity / risk functions (both ``1 - metric``)."""

from __future__ import annotations

import enum
from collections import Counter
from collections.abc import Sequence


class MetricKind(str, enum.Enum):
    TOKEN_F1 = "token_f1"
    ROUGE_L = "rouge_l"
    EDIT = "edit"


def _f_measure(overlap, n_cand, n_ref):
    # 2PR/(P+R) with P = o/n_cand, R = o/n_ref, written with a single division
    return 2 * overlap / (n_cand + n_ref)


def token_f1(candidate: Sequence[int], reference: Sequence[int]) -> float:
    if not candidate and not reference:
        return 1.0
    if not candidate or not reference:
        return 0.0
    overlap = sum((Counter(candidate) & Counter(reference)).values())
    return _f_measure(overlap, len(candidate), len(reference))


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    if len(b) > len(a):
        a, b = b, a
    row = [0] * (len(b) + 1)
    for x in a:
        prev = 0
        for j, y in enumerate(b, 1):
            cur = row[j]
            row[j] = prev + 1 if x == y else max(row[j], row[j - 1])
            prev = cur
    return row[-1]


def rouge_l(candidate: Sequence[int], reference: Sequence[int]) -> float:
    # two empty sequences are identical; otherwise an empty side has no LCS
    if not candidate and not reference:
        return 1.0
    if not candidate or not reference:
        return 0.0
    return _f_measure(lcs_length(candidate, reference), len(candidate), len(reference))


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    row = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        prev, row[0] = row[0], i
        for j, y in enumerate(b, 1):
            cur = row[j]
            row[j] = min(row[j] + 1, row[j - 1] + 1, prev + (x != y))
            prev = cur
    return row[-1]


def norm_edit_similarity(candidate: Sequence[int], reference: Sequence[int]) -> float:
    longest = max(len(candidate), len(reference))
    if longest == 0:
        return 1.0
    return (longest - levenshtein(candidate, reference)) / longest


_METRICS = {
    MetricKind.TOKEN_F1: token_f1,
    MetricKind.ROUGE_L: rouge_l,
    MetricKind.EDIT: norm_edit_similarity,
}


def similarity(kind, a, b) -> float:
    return _METRICS[MetricKind(kind)](list(a), list(b))


def dissimilarity(kind, a, b) -> float:
    return 1.0 - similarity(kind, a, b)


def risk(kind, a, references) -> float:
    """``1 - max_z metric(a, z)`` over a non-empty reference set."""
    references = list(references)
    if not references:
        raise ValueError("risk needs at least one reference")
    return 1.0 - max(similarity(kind, a, z) for z in references)
