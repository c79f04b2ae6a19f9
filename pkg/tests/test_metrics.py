import itertools
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avsr_llm.autograd import DegenerateInputError
from avsr_llm.metrics import corpus_wer, edit_distance, wer

ALPHABET = "abc"
MAX_LEN = 5


def all_strings(max_len=MAX_LEN):
    return [s for n in range(max_len + 1) for s in map("".join, itertools.product(ALPHABET, repeat=n))]


def neighbours(s, max_len):
    """Strings one insertion, deletion or substitution away, capped at ``max_len``."""
    out = set()
    for i in range(len(s)):
        out.add(s[:i] + s[i + 1:])
        for c in ALPHABET:
            if c != s[i]:
                out.add(s[:i] + c + s[i + 1:])
    if len(s) < max_len:
        for i in range(len(s) + 1):
            for c in ALPHABET:
                out.add(s[:i] + c + s[i:])
    return out


def bfs_distances(src, max_len=MAX_LEN):
    """Shortest number of single edits from ``src`` to every short string.

    An optimal edit script can do deletions first and insertions last, so
    paths never need strings longer than the longer endpoint.
    """
    dist = {src: 0}
    queue = deque([src])
    while queue:
        s = queue.popleft()
        for t in neighbours(s, max_len):
            if t not in dist:
                dist[t] = dist[s] + 1
                queue.append(t)
    return dist


def full_matrix_distance(a, b):
    """Independent Wagner-Fischer with the full table in plain lists."""
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        table[i][0] = i
    for j in range(len(b) + 1):
        table[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            table[i][j] = min(table[i - 1][j] + 1, table[i][j - 1] + 1,
                              table[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return table[-1][-1]


class TestEditDistance:
    def test_exhaustive_short_strings(self):
        strings = all_strings()
        mismatches = 0
        for a in strings:
            dist = bfs_distances(a)
            mismatches += sum(edit_distance(a, b) != dist[b] for b in strings)
        assert mismatches == 0

    def test_random_long_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a = list(rng.integers(0, 6, rng.integers(0, 25)))
            b = list(rng.integers(0, 6, rng.integers(0, 25)))
            assert edit_distance(a, b) == full_matrix_distance(a, b)

    @pytest.mark.parametrize("a,b,d", [("", "", 0), ("abc", "", 3), ("", "ab", 2), ("kitten", "sitting", 3),
                                       ("abc", "abc", 0), ("abc", "cba", 2)])
    def test_known_values(self, a, b, d):
        assert edit_distance(a, b) == d

    @settings(max_examples=100, deadline=None)
    @given(st.text(ALPHABET, max_size=8), st.text(ALPHABET, max_size=8), st.text(ALPHABET, max_size=8))
    def test_metric_axioms(self, a, b, c):
        assert edit_distance(a, b) == edit_distance(b, a)
        assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
        assert abs(len(a) - len(b)) <= edit_distance(a, b) <= max(len(a), len(b))
        assert (edit_distance(a, b) == 0) == (a == b)


class TestWer:
    def test_substitution_and_deletion(self):
        assert wer("a b c d", "a x c") == 0.5

    def test_insertions_can_exceed_one(self):
        assert wer("a", "b c d") == 3.0

    def test_accepts_token_lists(self):
        assert wer(["w01", "w02"], ["w01"]) == 0.5

    def test_empty_reference(self):
        with pytest.raises(DegenerateInputError):
            wer("", "a")
        with pytest.raises(DegenerateInputError):
            corpus_wer(["a", ""], ["a", "b"])

    def test_corpus_pools_edits(self):
        assert corpus_wer(["a b c d", "e f"], ["a x c", "e f"]) == pytest.approx(100 * 2 / 6)

    def test_corpus_length_mismatch(self):
        with pytest.raises(ValueError):
            corpus_wer(["a"], ["a", "b"])
