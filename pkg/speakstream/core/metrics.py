from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import EmptyReferenceError


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Edit distance (substitutions, insertions, deletions all cost 1)."""
    prev = np.arange(len(b) + 1)
    for i, x in enumerate(a, start=1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return int(prev[-1])


def cer(reference: str, hypothesis: str) -> float:
    """Character error rate: edit distance over reference length."""
    if len(reference) == 0:
        raise EmptyReferenceError("reference text is empty")
    return levenshtein(reference, hypothesis) / len(reference)


def wer(reference: str, hypothesis: str) -> float:
    """Word error rate over whitespace-separated words."""
    ref = reference.split()
    if not ref:
        raise EmptyReferenceError("reference text has no words")
    return levenshtein(ref, hypothesis.split()) / len(ref)
