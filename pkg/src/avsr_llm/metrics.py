"""Word error rate via minimal edit distance."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import DegenerateInputError


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = np.arange(len(hyp) + 1)
    for i, r in enumerate(ref, start=1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return int(prev[-1])


def _words(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def wer(reference, hypothesis) -> float:
    """(S + D + I) / N_ref for one utterance; strings are split on whitespace."""
    ref, hyp = _words(reference), _words(hypothesis)
    if not ref:
        raise DegenerateInputError("WER needs a non-empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(references, hypotheses) -> float:
    """Total edits over total reference words, in percent."""
    edits = words = 0
    for r, h in zip(references, hypotheses, strict=True):
        r = _words(r)
        if not r:
            raise DegenerateInputError("WER needs non-empty references")
        edits += edit_distance(r, _words(h))
        words += len(r)
    return 100.0 * edits / words
