import itertools

import numpy as np
import pytest

from avsr_llm import autograd as ag
from avsr_llm.autograd import ParameterError, Tensor
from avsr_llm.decoding import DecodeConfig, Hypothesis, Session, beam_search, decode, greedy_decode

from helpers import tiny_decoder

V, HORIZON, EOS = 4, 4, 3


def toy_session(seed, vocab=V, eos=EOS, prefix_len=3):
    dec, _ = tiny_decoder(seed, vocab_size=vocab, d_model=8)
    prefix = Tensor(np.random.default_rng([seed, 1]).normal(size=(prefix_len, 8)))
    return Session(dec, None, eos), prefix


def full_forward_log_probs(session, prefix, tokens, tau):
    """Per-step log p(token | prefix, earlier tokens) from one uncached forward pass."""
    dec = session.decoder
    x = prefix
    if len(tokens) > 1:
        x = ag.concat([prefix, dec.embed(np.array(tokens[:-1], dtype=np.int64))], axis=0)
    with ag.no_grad():
        z = dec.forward(ag.reshape(x, (1,) + x.shape)).data[0].astype(np.float64) / tau
    z = z[prefix.shape[0] - 1:]
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return [logp[i, t] for i, t in enumerate(tokens)]


def exhaustive_best(session, prefix, horizon, tau):
    """Best terminal continuation by enumeration of every length-``horizon``
    token string; a string is cut after its first EOS, and strings without
    EOS are the horizon-truncated candidates."""
    best = None
    for seq in itertools.product(range(V), repeat=horizon):
        seq = list(seq[: seq.index(EOS) + 1]) if EOS in seq else list(seq)
        score = float(sum(full_forward_log_probs(session, prefix, seq, tau)))
        body = tuple(t for t in seq if t != EOS)
        if best is None or (-score, body) < (-best[0], best[1]):
            best = (score, body)
    return best


class _Reorderable(list):
    def reorder(self, idx):
        return _Reorderable(self[i] for i in idx)


class ScriptedSession:
    """Session stand-in that replays fixed next-token distributions by prefix.

    Unlisted prefixes emit EOS with certainty.
    """

    def __init__(self, table, vocab, eos):
        self.table, self.vocab, self.eos_id = table, vocab, eos

    def _logits(self, prefixes):
        rows = []
        for p in prefixes:
            probs = self.table.get(tuple(p), None)
            row = np.full(self.vocab, -1e9) if probs is None else np.log(np.maximum(probs, 1e-300))
            if probs is None:
                row[self.eos_id] = 0.0
            rows.append(row)
        return np.array(rows)

    def prefill(self, prefix):
        return self._logits([()]), _Reorderable([()])

    def step(self, state, tokens):
        new = _Reorderable(tuple(p) + (int(t),) for p, t in zip(state, tokens))
        return self._logits(new), new


def scripted(table, vocab=3, eos=2):
    return ScriptedSession(table, vocab, eos)


class TestExhaustiveOracle:
    def test_wide_beam_finds_optimum(self):
        cfg = DecodeConfig(beam_width=256, temperature=0.6, max_new_tokens=HORIZON)
        for seed in range(20):
            with ag.default_dtype(np.float64):
                session, prefix = toy_session(seed)
                score, body = exhaustive_best(session, prefix, HORIZON, cfg.temperature)
                top = beam_search(session, prefix, cfg)[0]
            assert top.tokens == body
            assert top.log_score == pytest.approx(score, abs=1e-9)

    def test_width_one_is_greedy(self):
        for seed in range(20):
            session, prefix = toy_session(seed)
            for tau in (1.0, 0.6):
                g = greedy_decode(session, prefix, DecodeConfig(temperature=tau, max_new_tokens=6))
                b = beam_search(session, prefix, DecodeConfig(beam_width=1, temperature=tau, max_new_tokens=6))[0]
                assert b.tokens == g.tokens and b.log_score == pytest.approx(g.log_score)

    def test_width_fifteen_not_worse_than_greedy(self):
        for seed in range(20):
            session, prefix = toy_session(seed)
            cfg = DecodeConfig(beam_width=15, temperature=0.6, max_new_tokens=HORIZON)
            g = greedy_decode(session, prefix, cfg)
            b = beam_search(session, prefix, cfg)[0]
            assert b.log_score >= g.log_score - 1e-12


class TestScriptedDistributions:
    def test_forced_chain(self):
        table = {(): [1, 0, 0], (0,): [0, 1, 0], (0, 1): [0, 0, 1]}
        hyp = decode(scripted(table), None, DecodeConfig(beam_width=3, temperature=1.0, max_new_tokens=5))
        assert hyp.tokens == (0, 1) and hyp.finished
        assert hyp.log_score == pytest.approx(0.0, abs=1e-12)

    def test_immediate_eos(self):
        hyp = decode(scripted({(): [0, 0, 1]}), None, DecodeConfig(max_new_tokens=5))
        assert hyp.tokens == () and hyp.finished

    def test_beam_escapes_greedy_trap(self):
        # greedy takes 0 (0.6) then a flat tail; token 1 (0.4) leads to a certain EOS
        table = {(): [0.6, 0.4, 0.0], (0,): [0.5, 0.5, 0.0], (0, 0): [0, 0, 1], (0, 1): [0, 0, 1],
                 (1,): [0, 0, 1]}
        cfg = DecodeConfig(beam_width=2, temperature=1.0, max_new_tokens=5)
        s = scripted(table)
        assert greedy_decode(s, None, cfg).tokens == (0, 0)
        assert beam_search(s, None, cfg)[0].tokens == (1,)

    def test_ties_prefer_smaller_sequence(self):
        table = {(): [0.5, 0.5, 0.0], (0,): [0, 0, 1], (1,): [0, 0, 1]}
        assert decode(scripted(table), None, DecodeConfig(beam_width=4, temperature=1.0)).tokens == (0,)

    def test_truncation_is_flagged(self):
        table = {(): [1, 0, 0], (0,): [1, 0, 0], (0, 0): [1, 0, 0]}
        hyp = decode(scripted(table), None, DecodeConfig(beam_width=2, max_new_tokens=3))
        assert hyp.truncated and not hyp.finished and hyp.tokens == (0, 0, 0)
        assert greedy_decode(scripted(table), None, DecodeConfig(max_new_tokens=3)).truncated

    def test_truncated_candidate_competes_with_completed(self):
        # EOS early costs log 0.3; the horizon-truncated path costs nothing
        table = {(): [0.7, 0.0, 0.3], (0,): [1, 0, 0], (0, 0): [1, 0, 0]}
        pool = beam_search(scripted(table), None, DecodeConfig(beam_width=3, temperature=1.0, max_new_tokens=3))
        assert pool[0].truncated and pool[0].tokens == (0, 0, 0)
        assert pool[1].finished and pool[1].tokens == ()

    def test_length_normalisation_prefers_longer_when_average_is_higher(self):
        table = {(): [0.45, 0.0, 0.55], (0,): [0.9, 0.0, 0.1], (0, 0): [0, 0, 1]}
        none = DecodeConfig(beam_width=3, temperature=1.0, max_new_tokens=4)
        by_len = DecodeConfig(beam_width=3, temperature=1.0, max_new_tokens=4, length_normalization="by-length")
        assert decode(scripted(table), None, none).tokens == ()
        assert decode(scripted(table), None, by_len).tokens == (0, 0)


class TestScores:
    def test_greedy_tokens_do_not_depend_on_temperature(self):
        for seed in range(10):
            session, prefix = toy_session(seed, vocab=6, eos=5)
            runs = {greedy_decode(session, prefix, DecodeConfig(temperature=t, max_new_tokens=5)).tokens
                    for t in (0.3, 0.6, 1.0, 2.0)}
            assert len(runs) == 1

    def test_step_scores_are_nonpositive_and_sum(self):
        session, prefix = toy_session(3)
        for h in beam_search(session, prefix, DecodeConfig(beam_width=8, max_new_tokens=5)):
            assert all(s <= 0 for s in h.step_scores)
            assert h.log_score == pytest.approx(sum(h.step_scores))
            assert h.score("by-length") == pytest.approx(h.log_score / len(h.step_scores))

    def test_completed_pool_sorted(self):
        session, prefix = toy_session(5)
        pool = beam_search(session, prefix, DecodeConfig(beam_width=10, max_new_tokens=4))
        scores = [h.log_score for h in pool]
        assert scores == sorted(scores, reverse=True)

    def test_invalid_configs(self):
        for kw in ({"beam_width": 0}, {"temperature": 0.0}, {"max_new_tokens": 0},
                   {"length_normalization": "avg"}):
            with pytest.raises(ParameterError):
                DecodeConfig(**kw)
        session, prefix = toy_session(0)
        with pytest.raises(ParameterError):
            decode(session, prefix, DecodeConfig(), method="sample")

    def test_hypothesis_default_score(self):
        assert Hypothesis((1,), -2.0, True, False, (-1.0, -1.0)).score() == -2.0
