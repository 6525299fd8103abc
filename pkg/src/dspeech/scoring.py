"""Word and character error rates."""

from __future__ import annotations

from typing import Sequence

from dspeech.errors import UndefinedRateError


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    if len(ref) < len(hyp):
        ref, hyp = hyp, ref
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def word_errors(reference: str, hypothesis: str) -> tuple[int, int]:
    """(edits, reference word count)."""
    ref = reference.split()
    return edit_distance(ref, hypothesis.split()), len(ref)


def char_errors(reference: str, hypothesis: str) -> tuple[int, int]:
    return edit_distance(reference, hypothesis), len(reference)


def _rate(edits: int, n: int) -> float:
    if n == 0:
        if edits == 0:
            return 0.0
        raise UndefinedRateError(f"{edits} errors against an empty reference")
    return edits / n


def wer(reference: str, hypothesis: str) -> float:
    return _rate(*word_errors(reference, hypothesis))


def cer(reference: str, hypothesis: str) -> float:
    return _rate(*char_errors(reference, hypothesis))


def corpus_wer(pairs) -> float:
    """Total word edits over total reference words (not a mean of rates)."""
    edits = n = 0
    for ref, hyp in pairs:
        e, k = word_errors(ref, hyp)
        edits += e
        n += k
    return _rate(edits, n)


def corpus_cer(pairs) -> float:
    edits = n = 0
    for ref, hyp in pairs:
        e, k = char_errors(ref, hyp)
        edits += e
        n += k
    return _rate(edits, n)
